//! Trial data container.
//!
//! A [`TrialDataset`] holds one row per patient: outcome `y`, covariate
//! vector `x`, randomised arm `z` and follow-up time `t`. Arms are indexed
//! `0..k-1` with arm 0 as the reference. Follow-up defaults to 1 and is
//! required to be strictly positive; the common no-variable-follow-up case
//! `t ≡ 1` is detected and exposed via [`TrialDataset::unit_followup`].

use crate::error::{Error, Result};

/// One patient's record.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientRow {
    /// Outcome value: a count, a binary 0/1 indicator, or a real.
    pub y: f64,
    /// Covariate vector, pre-expanded (indicators for categorical levels).
    pub x: Vec<f64>,
    /// Randomised arm index in `0..k-1`.
    pub arm: usize,
    /// Follow-up time, strictly positive.
    pub t: f64,
}

impl PatientRow {
    pub fn new(y: f64, x: Vec<f64>, arm: usize, t: f64) -> Self {
        PatientRow { y, x, arm, t }
    }
}

/// Immutable per-patient trial data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    rows: Vec<PatientRow>,
    n_covariates: usize,
    n_arms: usize,
    unit_followup: bool,
}

impl TrialDataset {
    /// Build a dataset from rows, validating the structural invariants:
    /// all covariate vectors share one length, every `t > 0`, and the arm
    /// indices cover `{0..k-1}` for some `k >= 2` without gaps.
    pub fn new(rows: Vec<PatientRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidDataset("dataset is empty".into()));
        }
        let p = rows[0].x.len();
        for (i, row) in rows.iter().enumerate() {
            if row.x.len() != p {
                return Err(Error::InvalidDataset(format!(
                    "row {} has {} covariates, expected {}",
                    i,
                    row.x.len(),
                    p
                )));
            }
            if !(row.t > 0.0) || !row.t.is_finite() {
                return Err(Error::NonPositiveFollowup { row: i, value: row.t });
            }
            if !row.y.is_finite() {
                return Err(Error::InvalidDataset(format!("row {} has non-finite outcome", i)));
            }
        }
        let k = rows.iter().map(|r| r.arm).max().unwrap() + 1;
        if k < 2 {
            return Err(Error::InvalidDataset("need at least two arms".into()));
        }
        for arm in 0..k {
            if !rows.iter().any(|r| r.arm == arm) {
                return Err(Error::InvalidDataset(format!(
                    "arm {} absent: arm indices must cover 0..{} without gaps",
                    arm, k
                )));
            }
        }
        let unit_followup = rows.iter().all(|r| r.t == 1.0);
        Ok(TrialDataset { rows, n_covariates: p, n_arms: k, unit_followup })
    }

    /// Convenience constructor for `t ≡ 1` data given as `(y, x, arm)` triples.
    pub fn from_unit_followup(rows: Vec<(f64, Vec<f64>, usize)>) -> Result<Self> {
        Self::new(rows.into_iter().map(|(y, x, arm)| PatientRow::new(y, x, arm, 1.0)).collect())
    }

    pub fn rows(&self) -> &[PatientRow] {
        &self.rows
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// Number of covariates per patient (may be zero).
    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    /// Number of arms `k`.
    pub fn n_arms(&self) -> usize {
        self.n_arms
    }

    /// True when every follow-up time is exactly 1.
    pub fn unit_followup(&self) -> bool {
        self.unit_followup
    }

    /// Number of patients randomised to `arm`.
    pub fn arm_count(&self, arm: usize) -> usize {
        self.rows.iter().filter(|r| r.arm == arm).count()
    }

    /// Errors unless `arm` is a valid, non-empty arm.
    pub fn require_arm(&self, arm: usize) -> Result<()> {
        if arm >= self.n_arms || self.arm_count(arm) == 0 {
            return Err(Error::EmptyArm { arm });
        }
        Ok(())
    }

    /// Mean follow-up time among patients randomised to `arm` (τ̂_z).
    pub fn mean_followup(&self, arm: usize) -> f64 {
        let (sum, count) = self
            .rows
            .iter()
            .filter(|r| r.arm == arm)
            .fold((0.0, 0usize), |(s, c), r| (s + r.t, c + 1));
        sum / count as f64
    }

    /// Sample proportion randomised to `arm` (π̂_z).
    pub fn arm_proportion(&self, arm: usize) -> f64 {
        self.arm_count(arm) as f64 / self.n() as f64
    }
}
