//! Shared test helpers: an independent brute-force likelihood maximizer
//! (finite-difference Newton over directly coded log-likelihoods) used
//! as an oracle for the model-fitting code, plus deterministic random
//! dataset generators.
//!
//! Nothing here shares numerical code with the library: log-likelihoods
//! are written straight from the density definitions and derivatives are
//! taken by finite differences, so agreement with the library's scoring
//! algebra is meaningful evidence of correctness.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson as PoissonDist};
use statrs::function::gamma::ln_gamma;
use stdmarg::{PatientRow, TrialDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleFamily {
    Gaussian,
    Binomial,
    Poisson,
    NegBin2,
}

/// A likelihood-maximization problem stated directly in terms of a dense
/// design matrix, outcomes, and per-row log exposure offsets.
pub struct OracleProblem {
    pub family: OracleFamily,
    pub design: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub log_offset: Vec<f64>,
}

impl OracleProblem {
    pub fn n_coefficients(&self) -> usize {
        self.design[0].len()
    }

    /// Free parameters: regression coefficients, plus ln(dispersion) for
    /// the negative binomial.
    pub fn dim(&self) -> usize {
        self.n_coefficients() + usize::from(self.family == OracleFamily::NegBin2)
    }

    /// Log-likelihood up to additive constants in the parameters.
    pub fn loglik(&self, theta: &[f64]) -> f64 {
        let q = self.n_coefficients();
        let mut total = 0.0;
        for (i, row) in self.design.iter().enumerate() {
            let eta: f64 = row.iter().zip(&theta[..q]).map(|(x, b)| x * b).sum();
            let y = self.y[i];
            total += match self.family {
                OracleFamily::Gaussian => -0.5 * (y - eta) * (y - eta),
                // y ln p + (1-y) ln(1-p), p = logistic(eta), rewritten
                // as y*eta - ln(1+e^eta) for stability.
                OracleFamily::Binomial => y * eta - ln_1p_exp(eta),
                OracleFamily::Poisson => {
                    let ln_mu = eta + self.log_offset[i];
                    y * ln_mu - ln_mu.exp()
                }
                OracleFamily::NegBin2 => {
                    let alpha = theta[q].exp();
                    let r = 1.0 / alpha;
                    let ln_mu = eta + self.log_offset[i];
                    let mu = ln_mu.exp();
                    ln_gamma(y + r) - ln_gamma(r) + r * (r.ln() - (r + mu).ln())
                        + y * (ln_mu - (r + mu).ln())
                }
            };
        }
        total
    }
}

fn ln_1p_exp(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

/// Maximize the log-likelihood by damped Newton iteration with
/// central-difference gradients and Hessians, falling back to steepest
/// ascent when the Hessian step is not an improvement direction.
pub fn maximize(problem: &OracleProblem, start: &[f64]) -> Vec<f64> {
    assert_eq!(start.len(), problem.dim());
    let objective = |t: &DVector<f64>| -problem.loglik(t.as_slice());
    let mut theta = DVector::from_column_slice(start);
    let mut fval = objective(&theta);
    for _ in 0..200 {
        let (grad, hess) = fd_derivatives(&objective, &theta);
        let mut dir = hess.lu().solve(&(-&grad)).unwrap_or_else(|| -grad.clone());
        if grad.dot(&dir) >= 0.0 {
            dir = -grad.clone();
        }
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = &theta + step * &dir;
            let fc = objective(&cand);
            if fc < fval {
                theta = cand;
                fval = fc;
                moved = true;
                break;
            }
            step *= 0.5;
        }
        if !moved || step * dir.amax() < 1e-11 {
            break;
        }
    }
    theta.as_slice().to_vec()
}

fn fd_derivatives<F: Fn(&DVector<f64>) -> f64>(
    f: &F,
    theta: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let d = theta.len();
    let h: Vec<f64> = theta.iter().map(|t| 1e-5 * (1.0 + t.abs())).collect();
    let at = |shifts: &[(usize, f64)]| {
        let mut t = theta.clone();
        for &(j, s) in shifts {
            t[j] += s;
        }
        f(&t)
    };
    let f0 = f(theta);
    let mut grad = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..d {
        let fp = at(&[(i, h[i])]);
        let fm = at(&[(i, -h[i])]);
        grad[i] = (fp - fm) / (2.0 * h[i]);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in (i + 1)..d {
            let fpp = at(&[(i, h[i]), (j, h[j])]);
            let fpm = at(&[(i, h[i]), (j, -h[j])]);
            let fmp = at(&[(i, -h[i]), (j, h[j])]);
            let fmm = at(&[(i, -h[i]), (j, -h[j])]);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    (grad, hess)
}

/// The library's main-effects design layout for a dataset:
/// [1, covariates..., arm-1 indicator, ..., arm-(k-1) indicator].
pub fn main_effects_design(dataset: &TrialDataset) -> Vec<Vec<f64>> {
    dataset
        .rows()
        .iter()
        .map(|r| {
            let mut row = vec![1.0];
            row.extend(r.x.iter().copied());
            for z in 1..dataset.n_arms() {
                row.push(if r.arm == z { 1.0 } else { 0.0 });
            }
            row
        })
        .collect()
}

/// Deterministic random trial dataset for a given family.
///
/// Covariate x ~ N(0, 1); arms assigned Bernoulli(1/2) with the first
/// two rows pinned so both arms are always present; count families get
/// variable follow-up in [0.5, 2.0] and the others unit follow-up. True
/// coefficients are moderate so separation and clamped dispersion do
/// not occur at the seeds used by the tests.
pub fn random_dataset(family: OracleFamily, seed: u64, n: usize) -> TrialDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let b0: f64 = rng.gen_range(0.1..0.6);
    let b1: f64 = rng.gen_range(-0.5..0.5);
    let b2: f64 = rng.gen_range(-0.5..0.5);
    let alpha_true = 0.7;
    let frailty = Gamma::new(1.0 / alpha_true, alpha_true).unwrap();

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let x = normal.sample(&mut rng);
        let arm = if i < 2 { i } else { usize::from(rng.gen_bool(0.5)) };
        let z = if arm == 1 { 1.0 } else { 0.0 };
        let eta = b0 + b1 * x + b2 * z;
        let (y, t) = match family {
            OracleFamily::Gaussian => (eta + normal.sample(&mut rng), 1.0),
            OracleFamily::Binomial => {
                let p = 1.0 / (1.0 + (-eta).exp());
                (f64::from(u8::from(rng.gen_bool(p))), 1.0)
            }
            OracleFamily::Poisson => {
                let t = rng.gen_range(0.5..2.0);
                let mu = t * (1.0 + eta.max(-4.0).min(2.5)).exp();
                (PoissonDist::new(mu).unwrap().sample(&mut rng), t)
            }
            OracleFamily::NegBin2 => {
                let t = rng.gen_range(0.5..2.0);
                let g = frailty.sample(&mut rng);
                let mu = g * t * (1.0 + eta.max(-4.0).min(2.5)).exp();
                (PoissonDist::new(mu.max(1e-12)).unwrap().sample(&mut rng), t)
            }
        };
        rows.push(PatientRow::new(y, vec![x], arm, t));
    }
    TrialDataset::new(rows).unwrap()
}
