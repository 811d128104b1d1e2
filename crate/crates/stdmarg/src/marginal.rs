//! Marginal treatment-group means and their variance menu.
//!
//! Three estimators of the arm-z marginal mean (rate when follow-up
//! varies) are provided:
//!
//! - [`mu1`]: the crude arm-specific rate Σ1(Z=z)Y / Σ1(Z=z)T;
//! - [`mu2`]: the standardized (g-computation) mean n⁻¹Σ h(Xᵢ,z,β̂),
//!   averaging model predictions with every patient's arm set to z;
//! - [`mu3`]: the augmented estimator μ̂₁ − n⁻¹Σ[(1(Zᵢ=z)−π̂_z)/π̂_z]·h(Xᵢ,z,β̂),
//!   consistent under arbitrary working-model misspecification.
//!
//! Variance estimators mirror that menu. For μ̂₂ the conditional-on-X
//! delta-method variance Ĝ_β·Var(β̂)·Ĝ_βᵀ ([`VarianceMethod::FixedX`])
//! understates the sampling variance when covariates are resampled with
//! the trial; [`VarianceMethod::RandomX`] adds n⁻²Σ{h(Xᵢ,z,β̂)−μ̂₂}², and
//! [`VarianceMethod::FullInfluence`] rebuilds the variance from the full
//! estimated influence function h−μ̂₂+Ĝ_θψ̂ᵢ without assuming the mean
//! model is correct.
//!
//! Confidence intervals are normal-theory, on the identity scale or (for
//! positive rates) on the log scale via the delta method.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::glm::FitResult;
use crate::model::Family;

/// Which marginal-mean estimator produced an estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Mu1,
    Mu2,
    Mu3,
}

impl EstimatorKind {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Mu1 => "mu1",
            EstimatorKind::Mu2 => "mu2",
            EstimatorKind::Mu3 => "mu3",
        }
    }
}

/// Source of Var(β̂) inside the fixed-X / random-X formulas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VcovSource {
    Model,
    #[default]
    Sandwich,
}

/// The variance-estimator menu. `FixedX`/`RandomX` carry their Var(β̂)
/// source; the bare names parse with the sandwich default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarianceMethod {
    /// Sample-rate variance for μ̂₁ under i.i.d. sampling.
    IidSandwich,
    /// Delta-method variance of μ̂₂ conditioning on the observed
    /// covariates: Ĝ_β Var(β̂) Ĝ_βᵀ.
    FixedX(VcovSource),
    /// FixedX plus the covariate-resampling correction n⁻²Σ(hᵢ−μ̂₂)².
    RandomX(VcovSource),
    /// Empirical variance of the full estimated influence function of
    /// μ̂₂.
    FullInfluence,
    /// Sandwich variance of the augmented estimator μ̂₃.
    Augmented,
}

impl VarianceMethod {
    /// Whether this method estimates the variance of the given
    /// estimator.
    pub fn applies_to(self, estimator: EstimatorKind) -> bool {
        match estimator {
            EstimatorKind::Mu1 => matches!(self, VarianceMethod::IidSandwich),
            EstimatorKind::Mu2 => matches!(
                self,
                VarianceMethod::FixedX(_)
                    | VarianceMethod::RandomX(_)
                    | VarianceMethod::FullInfluence
            ),
            EstimatorKind::Mu3 => matches!(self, VarianceMethod::Augmented),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VarianceMethod::IidSandwich => "iid_sandwich",
            VarianceMethod::FixedX(VcovSource::Sandwich) => "fixed_x",
            VarianceMethod::FixedX(VcovSource::Model) => "fixed_x_model",
            VarianceMethod::RandomX(VcovSource::Sandwich) => "random_x",
            VarianceMethod::RandomX(VcovSource::Model) => "random_x_model",
            VarianceMethod::FullInfluence => "full_influence",
            VarianceMethod::Augmented => "augmented",
        }
    }
}

impl std::str::FromStr for VarianceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "iid_sandwich" => VarianceMethod::IidSandwich,
            "fixed_x" => VarianceMethod::FixedX(VcovSource::Sandwich),
            "fixed_x_model" => VarianceMethod::FixedX(VcovSource::Model),
            "random_x" => VarianceMethod::RandomX(VcovSource::Sandwich),
            "random_x_model" => VarianceMethod::RandomX(VcovSource::Model),
            "full_influence" => VarianceMethod::FullInfluence,
            "augmented" => VarianceMethod::Augmented,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown variance method '{}' (expected one of iid_sandwich, fixed_x, \
                     fixed_x_model, random_x, random_x_model, full_influence, augmented)",
                    other
                )))
            }
        })
    }
}

impl std::fmt::Display for VarianceMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for VarianceMethod {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for VarianceMethod {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Scale on which a confidence interval is constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiScale {
    Identity,
    Log,
}

impl CiScale {
    /// Log intervals for count outcomes (back-transformed, asymmetric),
    /// identity otherwise.
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Poisson | Family::NegBin2 => CiScale::Log,
            Family::Gaussian | Family::Binomial => CiScale::Identity,
        }
    }
}

/// Residual convention inside the μ̂₁ and μ̂₃ sandwich variances when
/// follow-up varies.
///
/// The estimating function behind the crude rate is 1(Z=z){Y − μ(z)T},
/// so the derivation-consistent residual is `Y − μ̂·T`
/// ([`ResidualForm::FollowupScaled`], the default): it is exactly zero on
/// exact-fit data. [`ResidualForm::Unscaled`] uses the plain `Y − μ̂`
/// instead. The two coincide when T ≡ 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualForm {
    #[default]
    FollowupScaled,
    Unscaled,
}

/// A point estimate of the arm-`arm` marginal mean with a variance under
/// one named method and a normal-theory confidence interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalEstimate {
    pub arm: usize,
    pub estimator: EstimatorKind,
    pub estimate: f64,
    pub variance: f64,
    pub variance_method: VarianceMethod,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_scale: CiScale,
    /// Rows entering the estimate: the arm count for μ̂₁, all rows for
    /// μ̂₂/μ̂₃.
    pub n_used: usize,
}

impl MarginalEstimate {
    pub fn se(&self) -> f64 {
        self.variance.max(0.0).sqrt()
    }

    /// Replace the interval with one at the given scale and level.
    pub fn with_interval(mut self, scale: CiScale, level: f64) -> Result<Self> {
        let (low, high) = confidence_interval(&self, scale, level)?;
        self.ci_low = low;
        self.ci_high = high;
        self.ci_scale = scale;
        Ok(self)
    }

    fn finish(mut self) -> Self {
        let (low, high) =
            confidence_interval(&self, CiScale::Identity, 0.95).expect("identity interval");
        self.ci_low = low;
        self.ci_high = high;
        self
    }
}

/// Crude arm-z mean (rate when follow-up varies), with the i.i.d.
/// sandwich variance in the default follow-up–scaled residual form.
pub fn mu1(dataset: &TrialDataset, z: usize) -> Result<MarginalEstimate> {
    mu1_with_form(dataset, z, ResidualForm::default())
}

pub fn mu1_with_form(
    dataset: &TrialDataset,
    z: usize,
    form: ResidualForm,
) -> Result<MarginalEstimate> {
    dataset.require_arm(z)?;
    let n_z = dataset.arm_count(z);
    let tau = dataset.mean_followup(z);
    let (sum_y, sum_t) = dataset
        .rows()
        .iter()
        .filter(|r| r.arm == z)
        .fold((0.0, 0.0), |(sy, st), r| (sy + r.y, st + r.t));
    let estimate = sum_y / sum_t;

    let resid_sq: f64 = dataset
        .rows()
        .iter()
        .filter(|r| r.arm == z)
        .map(|r| {
            let resid = match form {
                ResidualForm::FollowupScaled => r.y - estimate * r.t,
                ResidualForm::Unscaled => r.y - estimate,
            };
            resid * resid
        })
        .sum();
    let variance = resid_sq / (tau * tau * (n_z * n_z) as f64);

    Ok(MarginalEstimate {
        arm: z,
        estimator: EstimatorKind::Mu1,
        estimate,
        variance,
        variance_method: VarianceMethod::IidSandwich,
        ci_low: f64::NAN,
        ci_high: f64::NAN,
        ci_scale: CiScale::Identity,
        n_used: n_z,
    }
    .finish())
}

/// Standardized mean: model predictions at arm z averaged over the
/// pooled covariate distribution, with the requested variance method.
pub fn mu2(
    dataset: &TrialDataset,
    fit: &FitResult,
    z: usize,
    method: VarianceMethod,
) -> Result<MarginalEstimate> {
    check_fit(dataset, fit)?;
    dataset.require_arm(z)?;
    let n = dataset.n() as f64;
    let h = fit.h_all(dataset, z)?;
    let estimate = h.iter().sum::<f64>() / n;

    let variance = match method {
        VarianceMethod::FixedX(source) => fixed_x_variance(dataset, fit, z, &h, source)?,
        VarianceMethod::RandomX(source) => {
            fixed_x_variance(dataset, fit, z, &h, source)?
                + h.iter().map(|hi| (hi - estimate) * (hi - estimate)).sum::<f64>() / (n * n)
        }
        VarianceMethod::FullInfluence => full_influence_variance(dataset, fit, z, &h, estimate)?,
        other => {
            return Err(Error::InvalidConfig(format!(
                "variance method {} does not apply to the standardized mean",
                other
            )))
        }
    };

    Ok(MarginalEstimate {
        arm: z,
        estimator: EstimatorKind::Mu2,
        estimate,
        variance,
        variance_method: method,
        ci_low: f64::NAN,
        ci_high: f64::NAN,
        ci_scale: CiScale::Identity,
        n_used: dataset.n(),
    }
    .finish())
}

/// Augmented estimator: the crude rate plus a mean-zero, covariate-based
/// correction, with its sandwich variance.
pub fn mu3(dataset: &TrialDataset, fit: &FitResult, z: usize) -> Result<MarginalEstimate> {
    mu3_with_form(dataset, fit, z, ResidualForm::default())
}

pub fn mu3_with_form(
    dataset: &TrialDataset,
    fit: &FitResult,
    z: usize,
    form: ResidualForm,
) -> Result<MarginalEstimate> {
    check_fit(dataset, fit)?;
    dataset.require_arm(z)?;
    let n = dataset.n() as f64;
    let pi = dataset.arm_proportion(z);
    let tau = dataset.mean_followup(z);
    let h = fit.h_all(dataset, z)?;
    let mu2_center = h.iter().sum::<f64>() / n;

    let crude = mu1_with_form(dataset, z, form)?;
    let augmentation: f64 = dataset
        .rows()
        .iter()
        .zip(&h)
        .map(|(r, hi)| {
            let ind = if r.arm == z { 1.0 } else { 0.0 };
            (ind - pi) / pi * hi
        })
        .sum::<f64>()
        / n;
    let estimate = crude.estimate - augmentation;

    let sum_sq: f64 = dataset
        .rows()
        .iter()
        .zip(&h)
        .map(|(r, hi)| {
            let ind = if r.arm == z { 1.0 } else { 0.0 };
            let resid = match form {
                ResidualForm::FollowupScaled => r.y - estimate * r.t,
                ResidualForm::Unscaled => r.y - estimate,
            };
            let term = ind * resid - tau * (ind - pi) * (hi - mu2_center);
            term * term
        })
        .sum();
    let variance = sum_sq / (pi * pi * tau * tau * n * n);

    Ok(MarginalEstimate {
        arm: z,
        estimator: EstimatorKind::Mu3,
        estimate,
        variance,
        variance_method: VarianceMethod::Augmented,
        ci_low: f64::NAN,
        ci_high: f64::NAN,
        ci_scale: CiScale::Identity,
        n_used: dataset.n(),
    }
    .finish())
}

/// Ĝ_β = n⁻¹ Σᵢ ∂h(Xᵢ,z,β̂)/∂βᵀ: the average design row at arm z, scaled
/// by the link derivative (1 for identity, h for log, h(1−h) for logit).
pub fn gbeta(dataset: &TrialDataset, fit: &FitResult, z: usize) -> Result<DVector<f64>> {
    check_fit(dataset, fit)?;
    let q = fit.beta_hat.len();
    let mut g = DVector::zeros(q);
    for r in dataset.rows() {
        let row = fit.design().row(&r.x, z)?;
        let h = fit.h(&r.x, z)?;
        let scale = fit.spec().link.mu_eta(h);
        for j in 0..q {
            g[j] += scale * row[j];
        }
    }
    Ok(g / dataset.n() as f64)
}

/// Normal-theory interval for `est` at the given scale and level.
///
/// Identity: est ± z*·SE. Log (delta method, requires a positive
/// estimate): exp(ln est ± z*·SE/est).
pub fn confidence_interval(
    est: &MarginalEstimate,
    scale: CiScale,
    level: f64,
) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "confidence level must be in (0, 1), got {}",
            level
        )));
    }
    let z = Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(0.5 + level / 2.0);
    let se = est.se();
    match scale {
        CiScale::Identity => Ok((est.estimate - z * se, est.estimate + z * se)),
        CiScale::Log => {
            if est.estimate <= 0.0 {
                return Err(Error::NonPositiveEstimateForLogScale { estimate: est.estimate });
            }
            let log_se = se / est.estimate;
            Ok((est.estimate * (-z * log_se).exp(), est.estimate * (z * log_se).exp()))
        }
    }
}

fn check_fit(dataset: &TrialDataset, fit: &FitResult) -> Result<()> {
    fit.check_dataset(dataset)?;
    if !fit.converged {
        return Err(Error::NotConverged);
    }
    Ok(())
}

/// Ĝ_β Var(β̂) Ĝ_βᵀ with the chosen covariance source (β block only —
/// predictions do not involve the NB2 dispersion).
fn fixed_x_variance(
    dataset: &TrialDataset,
    fit: &FitResult,
    z: usize,
    h: &[f64],
    source: VcovSource,
) -> Result<f64> {
    debug_assert_eq!(h.len(), dataset.n());
    let g = gbeta(dataset, fit, z)?;
    let q = g.len();
    let vcov = match source {
        VcovSource::Model => fit.vcov_model.view((0, 0), (q, q)),
        VcovSource::Sandwich => fit.vcov_sandwich.view((0, 0), (q, q)),
    };
    Ok((g.transpose() * vcov * &g)[(0, 0)])
}

/// n⁻² Σᵢ [hᵢ − μ̂₂ + Ĝ_θ ψ̂ᵢ]² with ψ̂ᵢ = −M̂⁻¹mᵢ and Ĝ_θ = (Ĝ_β, 0):
/// the β gradient padded with a zero for the NB2 dispersion, whose
/// estimate does not enter the predictions.
fn full_influence_variance(
    dataset: &TrialDataset,
    fit: &FitResult,
    z: usize,
    h: &[f64],
    estimate: f64,
) -> Result<f64> {
    let n = h.len() as f64;
    let q = fit.beta_hat.len();
    let theta_dim = fit.theta_dim;

    let g = gbeta(dataset, fit, z)?;
    let mut g_theta = DVector::zeros(theta_dim);
    g_theta.rows_mut(0, q).copy_from(&g);

    // Ĝ_θ ψ̂ᵢ = −(M̂⁻ᵀ Ĝ_θᵀ)·mᵢ, so one transposed solve serves all rows.
    let weights = solve_bread_transpose(&fit.bread, &g_theta)?;

    let mut sum_sq = 0.0;
    for (i, hi) in h.iter().enumerate() {
        let mut correction = 0.0;
        for j in 0..theta_dim {
            correction += weights[j] * fit.scores[(i, j)];
        }
        let infl = hi - estimate - correction;
        sum_sq += infl * infl;
    }
    Ok(sum_sq / (n * n))
}

/// Solve M̂ᵀ w = g, reporting a singular bread with its reciprocal
/// condition number if the system is numerically rank-deficient.
fn solve_bread_transpose(bread: &DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = bread.transpose().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
    if !(rcond >= crate::glm::RCOND_MIN) {
        return Err(Error::SingularBread { rcond });
    }
    svd.solve(g, 0.0)
        .map_err(|_| Error::SingularBread { rcond })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::glm::fit;
    use crate::model::ModelSpec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Four patients, unit follow-up: (y, x, arm) =
    /// (1,0,0), (3,1,0), (2,0,1), (6,1,1).
    fn d4() -> TrialDataset {
        TrialDataset::from_unit_followup(vec![
            (1.0, vec![0.0], 0),
            (3.0, vec![1.0], 0),
            (2.0, vec![0.0], 1),
            (6.0, vec![1.0], 1),
        ])
        .unwrap()
    }

    fn estimate_for_ci(value: f64, se: f64) -> MarginalEstimate {
        MarginalEstimate {
            arm: 0,
            estimator: EstimatorKind::Mu1,
            estimate: value,
            variance: se * se,
            variance_method: VarianceMethod::IidSandwich,
            ci_low: f64::NAN,
            ci_high: f64::NAN,
            ci_scale: CiScale::Identity,
            n_used: 1,
        }
    }

    #[test]
    fn crude_rate_with_exact_fit_has_zero_variance() {
        // Arm 0 carries y = (2, 4) over t = (1, 2): the rate 2.0 fits both
        // rows exactly, so every follow-up–scaled residual vanishes.
        let data = TrialDataset::new(vec![
            crate::data::PatientRow::new(2.0, vec![], 0, 1.0),
            crate::data::PatientRow::new(4.0, vec![], 0, 2.0),
            crate::data::PatientRow::new(1.0, vec![], 1, 1.0),
        ])
        .unwrap();
        let est = mu1(&data, 0).unwrap();
        assert_relative_eq!(est.estimate, 2.0);
        assert_eq!(est.variance, 0.0);
        assert_eq!(est.n_used, 2);
        assert_eq!(est.variance_method, VarianceMethod::IidSandwich);
    }

    #[test]
    fn crude_rate_unit_followup_variance() {
        let data = TrialDataset::from_unit_followup(vec![
            (1.0, vec![], 0),
            (3.0, vec![], 0),
            (0.0, vec![], 1),
        ])
        .unwrap();
        let est = mu1(&data, 0).unwrap();
        assert_relative_eq!(est.estimate, 2.0);
        // n_z⁻² Σ (y − 2)² = (1 + 1) / 4.
        assert_relative_eq!(est.variance, 0.5);
    }

    #[test]
    fn unscaled_residuals_change_the_crude_variance_when_followup_varies() {
        let data = TrialDataset::new(vec![
            crate::data::PatientRow::new(2.0, vec![], 0, 1.0),
            crate::data::PatientRow::new(4.0, vec![], 0, 2.0),
            crate::data::PatientRow::new(1.0, vec![], 1, 1.0),
        ])
        .unwrap();
        let scaled = mu1_with_form(&data, 0, ResidualForm::FollowupScaled).unwrap();
        let unscaled = mu1_with_form(&data, 0, ResidualForm::Unscaled).unwrap();
        assert_eq!(scaled.estimate, unscaled.estimate);
        assert_eq!(scaled.variance, 0.0);
        // Residuals y − μ̂ = (0, 2); τ̂ = 1.5 → 4 / (1.5² · 2²) = 4/9.
        assert_relative_eq!(unscaled.variance, 4.0 / 9.0, max_relative = 1e-12);
    }

    #[test]
    fn standardized_mean_on_linear_fit_matches_hand_solution() {
        let data = d4();
        let fit = fit(&data, &ModelSpec::canonical(Family::Gaussian)).unwrap();

        let m2 = mu2(&data, &fit, 1, VarianceMethod::FixedX(VcovSource::Model)).unwrap();
        // Predictions at arm 1 are (2.5, 5.5, 2.5, 5.5).
        assert_relative_eq!(m2.estimate, 4.0, max_relative = 1e-10);
        // gᵀ(X'X)⁻¹g with g = (1, 0.5, 1) and σ̂² = 1.
        assert_relative_eq!(m2.variance, 0.5, max_relative = 1e-10);

        // HC0 with constant squared residual 0.25 is exactly a quarter of
        // the model-based covariance.
        let sandwich = mu2(&data, &fit, 1, VarianceMethod::FixedX(VcovSource::Sandwich)).unwrap();
        assert_relative_eq!(sandwich.variance, 0.125, max_relative = 1e-10);

        let random = mu2(&data, &fit, 1, VarianceMethod::RandomX(VcovSource::Sandwich)).unwrap();
        // Adds n⁻² Σ (hᵢ − 4)² = 4 · 2.25 / 16 = 9/16.
        assert_relative_eq!(random.variance - sandwich.variance, 0.5625, max_relative = 1e-10);

        let full = mu2(&data, &fit, 1, VarianceMethod::FullInfluence).unwrap();
        // Influence values (−1.5, 1.5, −2.5, 2.5) → 17/16.
        assert_relative_eq!(full.variance, 1.0625, max_relative = 1e-10);
    }

    #[test]
    fn gradient_of_standardized_mean_is_average_forced_design_row() {
        let data = d4();
        let fit = fit(&data, &ModelSpec::canonical(Family::Gaussian)).unwrap();
        let g = gbeta(&data, &fit, 1).unwrap();
        assert_relative_eq!(g[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(g[1], 0.5, max_relative = 1e-12);
        assert_relative_eq!(g[2], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn all_three_estimators_agree_on_balanced_linear_data() {
        let data = d4();
        let fit = fit(&data, &ModelSpec::canonical(Family::Gaussian)).unwrap();
        for z in 0..2 {
            let m1 = mu1(&data, z).unwrap();
            let m2 = mu2(&data, &fit, z, VarianceMethod::RandomX(VcovSource::Sandwich)).unwrap();
            let m3 = mu3(&data, &fit, z).unwrap();
            assert_relative_eq!(m2.estimate, m1.estimate, max_relative = 1e-10);
            assert_relative_eq!(m3.estimate, m1.estimate, max_relative = 1e-10);
        }
    }

    #[test]
    fn saturated_count_model_standardizes_to_stratum_weighted_means() {
        // Cell means: (x=0,z=0) 1.5, (x=0,z=1) 3, (x=1,z=0) 3, (x=1,z=1) 5.5;
        // x=0 has weight 3/8. A log-link fit with an arm-by-x interaction is
        // saturated over the four cells, so standardization averages the cell
        // means over the pooled x distribution.
        let data = TrialDataset::from_unit_followup(vec![
            (1.0, vec![0.0], 0),
            (2.0, vec![0.0], 0),
            (3.0, vec![0.0], 1),
            (2.0, vec![1.0], 0),
            (2.0, vec![1.0], 0),
            (5.0, vec![1.0], 0),
            (4.0, vec![1.0], 1),
            (7.0, vec![1.0], 1),
        ])
        .unwrap();
        let spec = ModelSpec::canonical(Family::Poisson).with_interactions();
        let fit = fit(&data, &spec).unwrap();

        let m2_arm1 = mu2(&data, &fit, 1, VarianceMethod::FullInfluence).unwrap();
        assert_relative_eq!(m2_arm1.estimate, 3.0 * 3.0 / 8.0 + 5.0 * 5.5 / 8.0, epsilon = 1e-8);
        let m2_arm0 = mu2(&data, &fit, 0, VarianceMethod::FullInfluence).unwrap();
        assert_relative_eq!(m2_arm0.estimate, 3.0 * 1.5 / 8.0 + 5.0 * 3.0 / 8.0, epsilon = 1e-8);

        // With an arm indicator in a canonical fit and unit follow-up the
        // augmented estimator reproduces the standardized one.
        for z in 0..2 {
            let m2 = mu2(&data, &fit, z, VarianceMethod::FixedX(VcovSource::Sandwich)).unwrap();
            let m3 = mu3(&data, &fit, z).unwrap();
            assert_relative_eq!(m3.estimate, m2.estimate, epsilon = 1e-8);
        }
    }

    #[test]
    fn zero_prediction_model_collapses_augmented_to_crude() {
        let data = d4();
        let mut fit = fit(&data, &ModelSpec::canonical(Family::Gaussian)).unwrap();
        fit.beta_hat.fill(0.0);
        for z in 0..2 {
            let m1 = mu1(&data, z).unwrap();
            let m3 = mu3(&data, &fit, z).unwrap();
            assert_eq!(m3.estimate, m1.estimate);
            assert_relative_eq!(m3.variance, m1.variance, max_relative = 1e-12);
        }
    }

    #[test]
    fn no_covariates_make_standardization_crude() {
        let data = TrialDataset::from_unit_followup(vec![
            (2.0, vec![], 0),
            (5.0, vec![], 0),
            (1.0, vec![], 0),
            (4.0, vec![], 1),
            (9.0, vec![], 1),
        ])
        .unwrap();
        let fit = fit(&data, &ModelSpec::canonical(Family::Poisson)).unwrap();
        for z in 0..2 {
            let m1 = mu1(&data, z).unwrap();
            let fixed = mu2(&data, &fit, z, VarianceMethod::FixedX(VcovSource::Sandwich)).unwrap();
            let random = mu2(&data, &fit, z, VarianceMethod::RandomX(VcovSource::Sandwich)).unwrap();
            assert_relative_eq!(fixed.estimate, m1.estimate, epsilon = 1e-8);
            // Predictions are constant, so the covariate-resampling
            // adjustment is zero.
            assert_relative_eq!(random.variance, fixed.variance, epsilon = 1e-14);
        }
    }

    #[test]
    fn log_scale_interval_matches_delta_method() {
        let est = estimate_for_ci(1.0, 0.1);
        let (low, high) = confidence_interval(&est, CiScale::Log, 0.95).unwrap();
        assert_relative_eq!(low, 0.8220, epsilon = 1e-4);
        assert_relative_eq!(high, 1.2165, epsilon = 1e-4);
    }

    #[test]
    fn identity_interval_is_symmetric() {
        let est = estimate_for_ci(2.0, 1.0);
        let (low, high) = confidence_interval(&est, CiScale::Identity, 0.95).unwrap();
        assert_relative_eq!((low + high) / 2.0, 2.0, epsilon = 1e-10);
        assert_relative_eq!(high - low, 2.0 * 1.959964, epsilon = 1e-5);
    }

    #[test]
    fn log_interval_requires_positive_estimate() {
        let est = estimate_for_ci(0.0, 0.1);
        match confidence_interval(&est, CiScale::Log, 0.95) {
            Err(Error::NonPositiveEstimateForLogScale { estimate }) => assert_eq!(estimate, 0.0),
            other => panic!("expected log-scale error, got {:?}", other),
        }
    }

    #[test]
    fn interval_level_must_be_a_probability() {
        let est = estimate_for_ci(1.0, 0.1);
        assert!(matches!(
            confidence_interval(&est, CiScale::Identity, 1.0),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn missing_arm_is_reported() {
        let data = d4();
        match mu1(&data, 2) {
            Err(Error::EmptyArm { arm }) => assert_eq!(arm, 2),
            other => panic!("expected empty-arm error, got {:?}", other),
        }
    }

    #[test]
    fn crude_variance_is_rejected_for_standardized_mean() {
        let data = d4();
        let fit = fit(&data, &ModelSpec::canonical(Family::Gaussian)).unwrap();
        assert!(matches!(
            mu2(&data, &fit, 0, VarianceMethod::IidSandwich),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn unconverged_fit_is_rejected() {
        let data = d4();
        let mut fit = fit(&data, &ModelSpec::canonical(Family::Gaussian)).unwrap();
        fit.converged = false;
        assert!(matches!(
            mu2(&data, &fit, 0, VarianceMethod::FullInfluence),
            Err(Error::NotConverged)
        ));
    }

    #[test]
    fn variance_method_names_round_trip() {
        let all = [
            VarianceMethod::IidSandwich,
            VarianceMethod::FixedX(VcovSource::Sandwich),
            VarianceMethod::FixedX(VcovSource::Model),
            VarianceMethod::RandomX(VcovSource::Sandwich),
            VarianceMethod::RandomX(VcovSource::Model),
            VarianceMethod::FullInfluence,
            VarianceMethod::Augmented,
        ];
        for method in all {
            let parsed: VarianceMethod = method.as_str().parse().unwrap();
            assert_eq!(parsed, method);
            let json = serde_json::to_string(&method).unwrap();
            let back: VarianceMethod = serde_json::from_str(&json).unwrap();
            assert_eq!(back, method);
        }
        assert!("huber".parse::<VarianceMethod>().is_err());
    }

    proptest! {
        /// On canonical fits with unit follow-up the augmented estimator
        /// equals the standardized one, and the variance menu keeps its
        /// ordering: random-X dominates fixed-X.
        #[test]
        fn canonical_identity_and_variance_ordering(
            cells in proptest::collection::vec((0..2usize, 0..2usize, 0..7u32), 12..40)
        ) {
            let rows: Vec<(f64, Vec<f64>, usize)> = cells
                .iter()
                .map(|&(x, arm, y)| (f64::from(y), vec![x as f64], arm))
                .collect();
            let both_arms = rows.iter().any(|r| r.2 == 0) && rows.iter().any(|r| r.2 == 1);
            prop_assume!(both_arms);
            let data = TrialDataset::from_unit_followup(rows).unwrap();
            let fitted = match fit(&data, &ModelSpec::canonical(Family::Poisson)) {
                Ok(f) => f,
                // Degenerate draws (constant or collinear covariates, all-zero
                // counts) are outside the property's scope.
                Err(_) => return Ok(()),
            };
            for z in 0..2 {
                let m2 = mu2(&data, &fitted, z, VarianceMethod::FixedX(VcovSource::Sandwich)).unwrap();
                let m3 = mu3(&data, &fitted, z).unwrap();
                prop_assert!((m2.estimate - m3.estimate).abs() <= 1e-8 * (1.0 + m2.estimate.abs()));

                let random = mu2(&data, &fitted, z, VarianceMethod::RandomX(VcovSource::Sandwich)).unwrap();
                prop_assert!(random.variance >= m2.variance);

                let full = mu2(&data, &fitted, z, VarianceMethod::FullInfluence).unwrap();
                prop_assert!(full.variance >= 0.0);
                prop_assert!(m3.variance >= 0.0);
            }
        }
    }
}
