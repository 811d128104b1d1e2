//! Outcome-model fitting by Fisher scoring, viewed as M-estimation.
//!
//! For the canonical families (gaussian/identity, binomial/logit,
//! poisson/log) the per-row estimating function is the unscaled score
//! `mᵢ = (Yᵢ − μᵢ)·xᵢ`, where `xᵢ` is the design row and `μᵢ` the fitted
//! mean including any follow-up offset. The negative binomial (NB2)
//! extends the parameter vector to `θ = (β, α)` with dispersion α
//! (`Var = μ + αμ²`); its β-score is weighted by `1/(1 + αμ)` and α is
//! estimated by maximum likelihood, alternating a one-dimensional Newton
//! update for α with each β step.
//!
//! A [`FitResult`] keeps everything downstream variance formulas need:
//! the per-row scores, the bread matrix `M̂ = n⁻¹ Σᵢ ∂mᵢ/∂θᵀ`, and both
//! the model-based covariance and the sandwich `M̂⁻¹ B̂ M̂⁻ᵀ/n` with
//! `B̂ = n⁻¹ Σᵢ mᵢmᵢᵀ`.
//!
//! For NB2 the bread is block diagonal between β and α: the cross blocks
//! have expectation zero under a correct mean model (the two parameters
//! are orthogonal), the ββ block uses the Fisher weights `μ/(1+αμ)`, and
//! the αα entry is the observed mean derivative of the α-score. Digamma
//! differences are evaluated through the integer-count identity
//! `ψ(y+r) − ψ(r) = Σ_{j<y} 1/(r+j)` with `r = 1/α`, rearranged so that
//! the near-Poisson limit (huge `r`) does not lose precision to
//! cancellation.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::TrialDataset;
use crate::error::{Error, Result};
use crate::model::{Design, Family, Link, ModelSpec};

/// Lower clamp for the NB2 dispersion; a fit ending here is reported as
/// [`FitResult::effectively_poisson`].
pub const ALPHA_MIN: f64 = 1e-8;
/// Upper clamp for the NB2 dispersion.
pub const ALPHA_MAX: f64 = 1e8;

/// At convergence failure, a binomial fit with a linear predictor beyond
/// this magnitude is classified as separation rather than plain
/// non-convergence.
const SEPARATION_ETA: f64 = 30.0;
/// Reciprocal-condition-number floor below which the bread matrix is
/// treated as singular.
pub(crate) const RCOND_MIN: f64 = 1e-12;
/// The NB2 likelihood sums are O(y) per row, so implausibly large counts
/// are rejected rather than silently looped over.
const MAX_NB2_COUNT: f64 = 100_000.0;

/// Solver controls for [`fit_with_options`].
///
/// Convergence requires both the score and the log-likelihood criterion:
/// every component of the total score must fall to `score_tol` in
/// absolute value, and the objective must change by no more than
/// `loglik_tol` in relative terms between successive iterations.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub score_tol: f64,
    pub loglik_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iterations: 100, score_tol: 1e-8, loglik_tol: 1e-10 }
    }
}

/// A converged model fit together with its estimating-equation anatomy.
#[derive(Debug, Clone)]
pub struct FitResult {
    spec: ModelSpec,
    design: Design,
    n: usize,
    /// Estimated coefficients, in design-column order.
    pub beta_hat: DVector<f64>,
    /// NB2 dispersion estimate; `None` for the other families.
    pub alpha_hat: Option<f64>,
    /// Length of θ̂: number of coefficients, plus one for NB2.
    pub theta_dim: usize,
    /// n×theta_dim matrix of per-row estimating-function values mᵢ at θ̂.
    /// Column sums are ~0 at a converged solution.
    pub scores: DMatrix<f64>,
    /// M̂ = n⁻¹ Σᵢ ∂mᵢ/∂θᵀ at θ̂ (block diagonal for NB2).
    pub bread: DMatrix<f64>,
    /// Model-based covariance of θ̂: the inverse expected information,
    /// scaled by the residual variance for the gaussian family. When the
    /// NB2 dispersion sits at a clamp its curvature can lose the usual
    /// sign; the αα entry is then reported in absolute value so the
    /// matrix stays positive semidefinite.
    pub vcov_model: DMatrix<f64>,
    /// Sandwich covariance M̂⁻¹ B̂ M̂⁻ᵀ / n.
    pub vcov_sandwich: DMatrix<f64>,
    pub converged: bool,
    /// Number of β update steps taken.
    pub iterations: usize,
    /// NB2 dispersion finished at its lower clamp, so the fitted model is
    /// indistinguishable from Poisson.
    pub effectively_poisson: bool,
    /// Maximized objective, up to additive constants not involving θ.
    pub loglik: f64,
}

impl FitResult {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    /// Number of rows in the dataset the model was fitted to.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Rate-scale prediction h(x, arm, β̂), with the arm indicator forced
    /// to `arm` regardless of any actual assignment.
    pub fn h(&self, x: &[f64], arm: usize) -> Result<f64> {
        let row = self.design.row(x, arm)?;
        let eta: f64 = row.iter().zip(self.beta_hat.iter()).map(|(a, b)| a * b).sum();
        Ok(self.spec.link.inverse(eta))
    }

    /// Expected outcome for covariates `x` under assignment to `arm`:
    /// `h(x, arm, β̂)` without an offset, `t·h(x, arm, β̂)` with the
    /// log-follow-up offset.
    pub fn predict_mean(&self, x: &[f64], arm: usize, t: f64) -> Result<f64> {
        Ok(self.spec.offset_factor(t) * self.h(x, arm)?)
    }

    /// h(Xᵢ, z, β̂) for every row of `dataset`, each with the arm forced
    /// to `z`.
    pub fn h_all(&self, dataset: &TrialDataset, z: usize) -> Result<Vec<f64>> {
        self.check_dataset(dataset)?;
        dataset.rows().iter().map(|r| self.h(&r.x, z)).collect()
    }

    /// Per-row estimating-function contributions (alias for the `scores`
    /// field, mirroring the operation vocabulary).
    pub fn score_contributions(&self) -> &DMatrix<f64> {
        &self.scores
    }

    pub fn bread_matrix(&self) -> &DMatrix<f64> {
        &self.bread
    }

    pub fn sandwich_vcov(&self) -> &DMatrix<f64> {
        &self.vcov_sandwich
    }

    /// Sandwich standard errors of the coefficients, in design-column
    /// order.
    pub fn sandwich_se(&self) -> Vec<f64> {
        (0..self.beta_hat.len()).map(|j| self.vcov_sandwich[(j, j)].max(0.0).sqrt()).collect()
    }

    pub(crate) fn check_dataset(&self, dataset: &TrialDataset) -> Result<()> {
        if dataset.n() != self.n || dataset.n_covariates() + 1 > self.beta_hat.len() {
            return Err(Error::DimensionMismatch {
                message: format!(
                    "fit was computed on {} rows, dataset has {}",
                    self.n,
                    dataset.n()
                ),
            });
        }
        Ok(())
    }
}

/// Fit `spec` to `dataset` with default solver controls.
pub fn fit(dataset: &TrialDataset, spec: &ModelSpec) -> Result<FitResult> {
    fit_with_options(dataset, spec, FitOptions::default())
}

pub fn fit_with_options(
    dataset: &TrialDataset,
    spec: &ModelSpec,
    options: FitOptions,
) -> Result<FitResult> {
    spec.validate()?;
    check_family_data(dataset, spec.family)?;

    let design = Design::new(dataset, spec);
    let q = design.n_coef();
    let x = design_matrix(dataset, &design);
    check_rank(&x)?;

    let y: Vec<f64> = dataset.rows().iter().map(|r| r.y).collect();
    let log_offset: Vec<f64> = dataset
        .rows()
        .iter()
        .map(|r| spec.offset_factor(r.t).ln())
        .collect();

    let theta_dim = q + usize::from(spec.family == Family::NegBin2);
    let mut beta = DVector::zeros(q);
    beta[0] = initial_intercept(&y, spec.link);
    let mut alpha = (spec.family == Family::NegBin2).then(|| initial_alpha(&y));

    let mut pass = evaluate(&x, &y, &log_offset, spec, &beta, alpha, theta_dim);
    let mut prev_loglik: Option<f64> = None;
    let mut iterations = 0usize;
    let mut converged = false;

    loop {
        let max_score = convergence_score(&pass, alpha, q);
        if let Some(prev) = prev_loglik {
            let flat = (pass.loglik - prev).abs()
                <= options.loglik_tol * (pass.loglik.abs() + options.loglik_tol);
            if max_score <= options.score_tol && flat {
                converged = true;
                break;
            }
        }
        if iterations >= options.max_iterations {
            break;
        }
        prev_loglik = Some(pass.loglik);

        let info = weighted_crossprod(&x, |i| beta_weight(spec.family, pass.mu[i], alpha));
        let Some(chol) = Cholesky::new(info) else {
            break;
        };
        let step = chol.solve(&pass.score.rows(0, q).into_owned());
        beta += step;
        iterations += 1;

        if let Some(a) = alpha {
            // Gauss–Seidel style: refresh μ at the new β before the
            // dispersion update.
            let interim = evaluate(&x, &y, &log_offset, spec, &beta, alpha, theta_dim);
            alpha = Some(alpha_step(interim.score[q], interim.alpha_curvature, a));
        }
        pass = evaluate(&x, &y, &log_offset, spec, &beta, alpha, theta_dim);
    }

    if !converged {
        if spec.family == Family::Binomial && pass.max_abs_eta > SEPARATION_ETA {
            return Err(Error::SeparationDetected { max_eta: pass.max_abs_eta });
        }
        return Err(Error::NonConvergence {
            iterations,
            max_score: convergence_score(&pass, alpha, q),
        });
    }

    finalize(dataset, spec, design, x, &y, pass, beta, alpha, theta_dim, iterations)
}

/// Per-iteration state at a given θ.
struct Pass {
    /// Fitted means, including any offset factor.
    mu: Vec<f64>,
    /// Total estimating-function value, length theta_dim.
    score: DVector<f64>,
    loglik: f64,
    max_abs_eta: f64,
    /// NB2 only: Σᵢ ∂s_{α,i}/∂α (the observed α curvature).
    alpha_curvature: f64,
}

fn evaluate(
    x: &DMatrix<f64>,
    y: &[f64],
    log_offset: &[f64],
    spec: &ModelSpec,
    beta: &DVector<f64>,
    alpha: Option<f64>,
    theta_dim: usize,
) -> Pass {
    let n = y.len();
    let q = beta.len();
    let eta_lin = x * beta;
    let mut mu = vec![0.0; n];
    let mut score = DVector::zeros(theta_dim);
    let mut loglik = 0.0;
    let mut max_abs_eta = 0.0f64;
    let mut alpha_curvature = 0.0;

    for i in 0..n {
        let eta = eta_lin[i] + log_offset[i];
        let m = spec.link.inverse(eta);
        mu[i] = m;
        max_abs_eta = max_abs_eta.max(eta.abs());
        let yi = y[i];

        let weighted_resid = match spec.family {
            Family::Gaussian => {
                loglik += -0.5 * (yi - m) * (yi - m);
                yi - m
            }
            Family::Binomial => {
                loglik += yi * eta - softplus(eta);
                yi - m
            }
            Family::Poisson => {
                loglik += yi * eta - m;
                yi - m
            }
            Family::NegBin2 => {
                let a = alpha.expect("negbin2 carries a dispersion");
                let r = 1.0 / a;
                loglik += nb2_loglik_row(yi, m, r);
                let u = nb2_u(yi, m, r);
                let u_prime = nb2_u_prime(yi, m, r);
                // s_α = −r²·u;  ∂s_α/∂α = 2r³·u + r⁴·u′
                score[q] += -r * r * u;
                alpha_curvature += 2.0 * r * r * r * u + r * r * r * r * u_prime;
                (yi - m) / (1.0 + a * m)
            }
        };
        for j in 0..q {
            score[j] += weighted_resid * x[(i, j)];
        }
    }

    Pass { mu, score, loglik, max_abs_eta, alpha_curvature }
}

/// Largest score component that convergence must drive to zero. An NB2
/// dispersion pinned at a clamp is allowed a nonzero score pointing
/// outward (the constrained optimum lies on the boundary).
fn convergence_score(pass: &Pass, alpha: Option<f64>, q: usize) -> f64 {
    let mut max = 0.0f64;
    for j in 0..q {
        max = max.max(pass.score[j].abs());
    }
    if let Some(a) = alpha {
        let s_alpha = pass.score[q];
        let pinned = (a == ALPHA_MIN && s_alpha < 0.0) || (a == ALPHA_MAX && s_alpha > 0.0);
        if !pinned {
            max = max.max(s_alpha.abs());
        }
    }
    max
}

/// One safeguarded Newton update for the NB2 dispersion: Newton when the
/// curvature has the right sign, a damped ascent step otherwise, with a
/// multiplicative trust region and the hard clamps.
fn alpha_step(s_alpha: f64, curvature: f64, alpha: f64) -> f64 {
    let delta = if curvature < 0.0 {
        -s_alpha / curvature
    } else {
        0.5 * alpha * s_alpha.signum()
    };
    (alpha + delta).clamp(0.25 * alpha, 4.0 * alpha).clamp(ALPHA_MIN, ALPHA_MAX)
}

fn beta_weight(family: Family, mu: f64, alpha: Option<f64>) -> f64 {
    match family {
        Family::Gaussian => 1.0,
        Family::Binomial => mu * (1.0 - mu),
        Family::Poisson => mu,
        Family::NegBin2 => mu / (1.0 + alpha.expect("negbin2 carries a dispersion") * mu),
    }
}

#[allow(clippy::too_many_arguments)]
fn finalize(
    dataset: &TrialDataset,
    spec: &ModelSpec,
    design: Design,
    x: DMatrix<f64>,
    y: &[f64],
    pass: Pass,
    beta: DVector<f64>,
    alpha: Option<f64>,
    theta_dim: usize,
    iterations: usize,
) -> Result<FitResult> {
    let n = dataset.n();
    let q = beta.len();
    let n_f = n as f64;

    let mut scores = DMatrix::zeros(n, theta_dim);
    for i in 0..n {
        let m = pass.mu[i];
        let weighted_resid = match spec.family {
            Family::NegBin2 => {
                let a = alpha.expect("negbin2 carries a dispersion");
                let r = 1.0 / a;
                scores[(i, q)] = -r * r * nb2_u(y[i], m, r);
                (y[i] - m) / (1.0 + a * m)
            }
            _ => y[i] - m,
        };
        for j in 0..q {
            scores[(i, j)] = weighted_resid * x[(i, j)];
        }
    }

    let mut bread = DMatrix::zeros(theta_dim, theta_dim);
    let info = weighted_crossprod(&x, |i| beta_weight(spec.family, pass.mu[i], alpha));
    bread.view_mut((0, 0), (q, q)).copy_from(&(-&info / n_f));
    if theta_dim > q {
        bread[(q, q)] = pass.alpha_curvature / n_f;
    }

    let singular_values = bread.clone().svd(false, false).singular_values;
    let (s_max, s_min) = (singular_values.max(), singular_values.min());
    let rcond = if s_max > 0.0 { s_min / s_max } else { 0.0 };
    if !(rcond >= RCOND_MIN) {
        return Err(Error::SingularBread { rcond });
    }
    let bread_inv = bread.clone().try_inverse().ok_or(Error::SingularBread { rcond })?;

    let meat = scores.transpose() * &scores / n_f;
    let vcov_sandwich = symmetrize(&bread_inv * meat * bread_inv.transpose() / n_f);

    let dispersion = match spec.family {
        Family::Gaussian => {
            let rss = -2.0 * pass.loglik;
            rss / (n.saturating_sub(q).max(1) as f64)
        }
        _ => 1.0,
    };
    let mut vcov_model = symmetrize(-&bread_inv * (dispersion / n_f));
    if theta_dim > q {
        vcov_model[(q, q)] = vcov_model[(q, q)].abs();
    }

    Ok(FitResult {
        spec: *spec,
        design,
        n,
        beta_hat: beta,
        alpha_hat: alpha,
        theta_dim,
        scores,
        bread,
        vcov_model,
        vcov_sandwich,
        converged: true,
        iterations,
        effectively_poisson: alpha == Some(ALPHA_MIN),
        loglik: pass.loglik,
    })
}

fn design_matrix(dataset: &TrialDataset, design: &Design) -> DMatrix<f64> {
    let n = dataset.n();
    let q = design.n_coef();
    let mut x = DMatrix::zeros(n, q);
    let mut buf = vec![0.0; q];
    for (i, row) in dataset.rows().iter().enumerate() {
        design.fill_row(&row.x, row.arm, &mut buf);
        for j in 0..q {
            x[(i, j)] = buf[j];
        }
    }
    x
}

/// Rank-revealing check of the design matrix; deficiency is a hard error
/// so that downstream gradient dimensions can never be silently wrong.
fn check_rank(x: &DMatrix<f64>) -> Result<()> {
    let q = x.ncols();
    let r = x.clone().col_piv_qr().r();
    let lead = r[(0, 0)].abs();
    let tol = lead * (x.nrows().max(q) as f64) * f64::EPSILON;
    let diag_len = r.nrows().min(q);
    let rank = (0..diag_len).take_while(|&j| r[(j, j)].abs() > tol).count();
    if rank < q {
        return Err(Error::RankDeficientDesign { rank, cols: q });
    }
    Ok(())
}

fn check_family_data(dataset: &TrialDataset, family: Family) -> Result<()> {
    let bad = |i: usize, message: String| Error::InvalidFamilyData {
        family: family.name().to_string(),
        message: format!("row {}: {}", i, message),
    };
    for (i, row) in dataset.rows().iter().enumerate() {
        let y = row.y;
        match family {
            Family::Gaussian => {}
            Family::Binomial => {
                if y != 0.0 && y != 1.0 {
                    return Err(bad(i, format!("outcome {} is not 0 or 1", y)));
                }
            }
            Family::Poisson => {
                if y < 0.0 {
                    return Err(bad(i, format!("outcome {} is negative", y)));
                }
            }
            Family::NegBin2 => {
                if y < 0.0 || y.fract() != 0.0 {
                    return Err(bad(i, format!("outcome {} is not a nonnegative integer", y)));
                }
                if y > MAX_NB2_COUNT {
                    return Err(bad(
                        i,
                        format!("count {} exceeds the supported maximum {}", y, MAX_NB2_COUNT),
                    ));
                }
            }
        }
    }
    Ok(())
}

fn initial_intercept(y: &[f64], link: Link) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    match link {
        Link::Identity => mean,
        Link::Log => mean.max(1e-6).ln(),
        Link::Logit => {
            let p = mean.clamp(1e-6, 1.0 - 1e-6);
            (p / (1.0 - p)).ln()
        }
    }
}

/// Method-of-moments dispersion start, floored so the α-Newton never
/// begins in the flat near-Poisson region.
fn initial_alpha(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return 0.01;
    }
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    ((var - mean) / (mean * mean)).clamp(0.01, ALPHA_MAX)
}

fn weighted_crossprod(x: &DMatrix<f64>, weight: impl Fn(usize) -> f64) -> DMatrix<f64> {
    let (n, q) = x.shape();
    let mut h = DMatrix::zeros(q, q);
    for i in 0..n {
        let w = weight(i);
        for a in 0..q {
            let wxa = w * x[(i, a)];
            if wxa == 0.0 {
                continue;
            }
            for b in a..q {
                h[(a, b)] += wxa * x[(i, b)];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            h[(a, b)] = h[(b, a)];
        }
    }
    h
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// ln(1 + eˣ) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// NB2 log-likelihood contribution of one row, dropping the −ln y! term:
/// Σ_{j<y} ln(r+j) + r·ln(r/(r+μ)) + y·ln(μ/(r+μ)).
fn nb2_loglik_row(y: f64, mu: f64, r: f64) -> f64 {
    let count = y as u64;
    let mut ll = -r * (mu / r).ln_1p();
    if count > 0 {
        for j in 0..count {
            ll += (r + j as f64).ln();
        }
        ll += y * (mu.ln() - (r + mu).ln());
    }
    ll
}

/// u(r) = ∂ℓ/∂r = Σ_{j<y} 1/(r+j) + ln(r/(r+μ)) + (μ−y)/(r+μ), rewritten
/// as yμ/(r(r+μ)) − Σ_{j<y} j/(r(r+j)) − f(μ/r) with
/// f(s) = ln(1+s) − s/(1+s), so that the O(1/r) pieces cancel
/// symbolically instead of numerically when r is huge.
fn nb2_u(y: f64, mu: f64, r: f64) -> f64 {
    let count = y as u64;
    let mut u = y * mu / (r * (r + mu));
    for j in 1..count {
        let jf = j as f64;
        u -= jf / (r * (r + jf));
    }
    let s = mu / r;
    u - (s.ln_1p() - s / (1.0 + s))
}

/// u′(r) = ∂²ℓ/∂r² = −Σ_{j<y} 1/(r+j)² + μ/(r(r+μ)) + (y−μ)/(r+μ)².
fn nb2_u_prime(y: f64, mu: f64, r: f64) -> f64 {
    let count = y as u64;
    let mut v = mu / (r * (r + mu)) + (y - mu) / ((r + mu) * (r + mu));
    for j in 0..count {
        let d = r + j as f64;
        v -= 1.0 / (d * d);
    }
    v
}
