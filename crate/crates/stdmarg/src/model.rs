//! Outcome model specification and design-matrix construction.
//!
//! The outcome regression takes the form `E(Y|X,Z) = h(X,Z,β) =
//! g⁻¹(linear predictor)`. With variable follow-up and a log link the
//! conditional mean is `E(Y|X,Z,T) = T·h(X,Z,β)`, specified by passing
//! `log(T)` as an offset.
//!
//! Design-matrix column order is fixed:
//!
//! ```text
//! [intercept, covariates 0..p, arm indicators 1..k-1,
//!  arm1×covariates 0..p, arm2×covariates 0..p, ...]
//! ```
//!
//! Arm 0 is the reference; interaction blocks (when enabled) appear per
//! non-reference arm, covariates in dataset order within each block.

use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::error::{Error, Result};

/// Outcome distribution family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Binomial,
    Poisson,
    /// Negative binomial with `Var(Y) = μ + αμ²`.
    #[serde(rename = "negbin2")]
    NegBin2,
}

impl Family {
    /// The canonical (or, for NB2, required) link.
    pub fn canonical_link(self) -> Link {
        match self {
            Family::Gaussian => Link::Identity,
            Family::Binomial => Link::Logit,
            Family::Poisson | Family::NegBin2 => Link::Log,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Binomial => "binomial",
            Family::Poisson => "poisson",
            Family::NegBin2 => "negbin2",
        }
    }
}

/// Link function `g` with `η = g(μ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Logit,
    Log,
}

impl Link {
    pub fn apply(self, mu: f64) -> f64 {
        match self {
            Link::Identity => mu,
            Link::Logit => (mu / (1.0 - mu)).ln(),
            Link::Log => mu.ln(),
        }
    }

    /// Inverse link `g⁻¹(η)`.
    pub fn inverse(self, eta: f64) -> f64 {
        match self {
            Link::Identity => eta,
            Link::Logit => {
                // numerically stable logistic
                if eta >= 0.0 {
                    1.0 / (1.0 + (-eta).exp())
                } else {
                    let e = eta.exp();
                    e / (1.0 + e)
                }
            }
            Link::Log => eta.exp(),
        }
    }

    /// `dμ/dη` evaluated at `μ = g⁻¹(η)`.
    pub fn mu_eta(self, mu: f64) -> f64 {
        match self {
            Link::Identity => 1.0,
            Link::Logit => mu * (1.0 - mu),
            Link::Log => mu,
        }
    }
}

/// How the follow-up time enters the linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetRule {
    #[default]
    None,
    /// `log(T)` offset with coefficient fixed at 1; log link only.
    LogFollowup,
}

/// Outcome model: family, link, term structure and offset rule.
///
/// Terms are always intercept + covariate main effects + arm indicators,
/// with optional covariate×arm interactions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub link: Link,
    /// Include covariate×arm interaction terms (every covariate crossed
    /// with every non-reference arm indicator).
    #[serde(default)]
    pub interactions: bool,
    #[serde(default)]
    pub offset: OffsetRule,
}

impl ModelSpec {
    /// Canonical model for `family` without interactions or offset.
    pub fn canonical(family: Family) -> Self {
        ModelSpec {
            family,
            link: family.canonical_link(),
            interactions: false,
            offset: OffsetRule::None,
        }
    }

    pub fn with_interactions(mut self) -> Self {
        self.interactions = true;
        self
    }

    pub fn with_log_followup_offset(mut self) -> Self {
        self.offset = OffsetRule::LogFollowup;
        self
    }

    /// Check the family/link pairing (canonical required for gaussian,
    /// binomial and poisson; NB2 uses log) and the offset/link pairing.
    pub fn validate(&self) -> Result<()> {
        if self.link != self.family.canonical_link() {
            return Err(Error::InvalidConfig(format!(
                "family {} requires the {} link",
                self.family.name(),
                match self.family.canonical_link() {
                    Link::Identity => "identity",
                    Link::Logit => "logit",
                    Link::Log => "log",
                }
            )));
        }
        if self.offset == OffsetRule::LogFollowup && self.link != Link::Log {
            return Err(Error::InvalidConfig(
                "offset = log_followup requires the log link".into(),
            ));
        }
        Ok(())
    }

    /// Multiplicative exposure factor for a row: `t` under the log-follow-up
    /// offset, 1 otherwise, so that `E(Y) = factor · h(X,Z,β)`.
    pub fn offset_factor(&self, t: f64) -> f64 {
        match self.offset {
            OffsetRule::None => 1.0,
            OffsetRule::LogFollowup => t,
        }
    }
}

/// Resolved design-matrix layout for a (dataset, model) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    n_covariates: usize,
    n_arms: usize,
    interactions: bool,
    names: Vec<String>,
}

impl Design {
    pub fn new(dataset: &TrialDataset, spec: &ModelSpec) -> Self {
        Self::with_dims(dataset.n_covariates(), dataset.n_arms(), spec.interactions)
    }

    pub fn with_dims(n_covariates: usize, n_arms: usize, interactions: bool) -> Self {
        let mut names = vec!["intercept".to_string()];
        for j in 0..n_covariates {
            names.push(format!("x{}", j));
        }
        for a in 1..n_arms {
            names.push(format!("arm{}", a));
        }
        if interactions {
            for a in 1..n_arms {
                for j in 0..n_covariates {
                    names.push(format!("arm{}:x{}", a, j));
                }
            }
        }
        Design { n_covariates, n_arms, interactions, names }
    }

    /// Number of regression coefficients `q`.
    pub fn n_coef(&self) -> usize {
        self.names.len()
    }

    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    /// Column labels in design order.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Design row for covariates `x` with the arm indicator set to `arm`,
    /// regardless of the patient's actual assignment.
    pub fn row(&self, x: &[f64], arm: usize) -> Result<Vec<f64>> {
        if x.len() != self.n_covariates {
            return Err(Error::DimensionMismatch {
                message: format!(
                    "covariate vector has length {}, design expects {}",
                    x.len(),
                    self.n_covariates
                ),
            });
        }
        if arm >= self.n_arms {
            return Err(Error::DimensionMismatch {
                message: format!("arm {} out of range (k = {})", arm, self.n_arms),
            });
        }
        let mut row = Vec::with_capacity(self.n_coef());
        row.push(1.0);
        row.extend_from_slice(x);
        for a in 1..self.n_arms {
            row.push(if arm == a { 1.0 } else { 0.0 });
        }
        if self.interactions {
            for a in 1..self.n_arms {
                for &xj in x {
                    row.push(if arm == a { xj } else { 0.0 });
                }
            }
        }
        Ok(row)
    }

    /// Write the design row into `out` without allocating. `out` must have
    /// length `n_coef()` and `x`/`arm` must be in range.
    pub(crate) fn fill_row(&self, x: &[f64], arm: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_coef());
        out[0] = 1.0;
        out[1..1 + self.n_covariates].copy_from_slice(x);
        let mut c = 1 + self.n_covariates;
        for a in 1..self.n_arms {
            out[c] = if arm == a { 1.0 } else { 0.0 };
            c += 1;
        }
        if self.interactions {
            for a in 1..self.n_arms {
                for &xj in x {
                    out[c] = if arm == a { xj } else { 0.0 };
                    c += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PatientRow;

    fn two_arm_dataset() -> TrialDataset {
        TrialDataset::new(vec![
            PatientRow::new(1.0, vec![0.5, 2.0], 0, 1.0),
            PatientRow::new(2.0, vec![1.5, 3.0], 1, 1.0),
        ])
        .unwrap()
    }

    #[test]
    fn canonical_pairings_validate() {
        for family in [Family::Gaussian, Family::Binomial, Family::Poisson, Family::NegBin2] {
            assert!(ModelSpec::canonical(family).validate().is_ok());
        }
        let bad = ModelSpec { family: Family::Poisson, link: Link::Identity, ..ModelSpec::canonical(Family::Poisson) };
        assert!(bad.validate().is_err());
        let bad_offset = ModelSpec::canonical(Family::Gaussian).with_log_followup_offset();
        assert!(bad_offset.validate().is_err());
    }

    #[test]
    fn column_order_matches_contract() {
        let d = Design::with_dims(2, 3, true);
        assert_eq!(
            d.names(),
            &[
                "intercept", "x0", "x1", "arm1", "arm2",
                "arm1:x0", "arm1:x1", "arm2:x0", "arm2:x1"
            ]
        );
        let row = d.row(&[5.0, 7.0], 2).unwrap();
        assert_eq!(row, vec![1.0, 5.0, 7.0, 0.0, 1.0, 0.0, 0.0, 5.0, 7.0]);
    }

    #[test]
    fn row_forces_requested_arm() {
        let ds = two_arm_dataset();
        let spec = ModelSpec::canonical(Family::Gaussian);
        let design = Design::new(&ds, &spec);
        // the patient is in arm 0 but we ask for the arm-1 row
        let row = design.row(&ds.rows()[0].x, 1).unwrap();
        assert_eq!(row, vec![1.0, 0.5, 2.0, 1.0]);
    }

    #[test]
    fn fill_row_matches_row() {
        let d = Design::with_dims(2, 3, true);
        let mut buf = vec![0.0; d.n_coef()];
        for arm in 0..3 {
            d.fill_row(&[1.0, -2.0], arm, &mut buf);
            assert_eq!(buf, d.row(&[1.0, -2.0], arm).unwrap());
        }
    }

    #[test]
    fn row_rejects_bad_dims() {
        let d = Design::with_dims(2, 2, false);
        assert!(d.row(&[1.0], 0).is_err());
        assert!(d.row(&[1.0, 2.0], 5).is_err());
    }

    #[test]
    fn logit_is_stable_at_extremes() {
        assert!(Link::Logit.inverse(-800.0) >= 0.0);
        assert!(Link::Logit.inverse(800.0) <= 1.0);
        assert!((Link::Logit.inverse(0.0) - 0.5).abs() < 1e-15);
    }
}
