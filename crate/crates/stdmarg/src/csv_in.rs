//! CSV dataset ingestion.
//!
//! A trial arrives as a header CSV with an outcome column, a treatment
//! column, optional covariate columns, and an optional follow-up column
//! (absent ⇒ T ≡ 1). Loading is strict: a missing cell is a hard error,
//! never an imputation or a silent row drop, because dropping rows would
//! bias the crude estimator.
//!
//! Treatment labels map to arm codes 0..k−1 deterministically: numeric
//! order when every label parses as an integer, lexicographic order
//! otherwise; the mapping is reported alongside the dataset. Categorical
//! covariate columns (any non-numeric value) expand to reference-coded
//! indicators with lexicographic level order, the first level as
//! reference.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{PatientRow, TrialDataset};
use crate::error::{Error, Result};

/// Which CSV columns play which role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSchema {
    pub outcome: String,
    pub treatment: String,
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default)]
    pub followup: Option<String>,
}

/// A typed dataset plus the naming decisions made while loading it.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub dataset: TrialDataset,
    /// Arm code -> original treatment label.
    pub treatment_levels: Vec<String>,
    /// Names of the expanded covariate columns, in design order.
    pub covariate_names: Vec<String>,
}

impl LoadedDataset {
    /// Wrap an in-memory dataset with positional labels, for callers
    /// that never touched a CSV.
    pub fn from_dataset(dataset: TrialDataset) -> Self {
        let treatment_levels = (0..dataset.n_arms()).map(|a| a.to_string()).collect();
        let covariate_names =
            (0..dataset.n_covariates()).map(|j| format!("x{}", j)).collect();
        LoadedDataset { dataset, treatment_levels, covariate_names }
    }
}

/// Load and type-check a trial dataset from a header CSV file.
pub fn load_dataset(path: impl AsRef<Path>, schema: &DataSchema) -> Result<LoadedDataset> {
    let file = std::fs::File::open(path)?;
    load_dataset_from_reader(file, schema)
}

/// Same as [`load_dataset`] for any reader (used by tests and pipes).
pub fn load_dataset_from_reader<R: Read>(
    reader: R,
    schema: &DataSchema,
) -> Result<LoadedDataset> {
    let mut csv_reader = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn { column: name.to_string() })
    };

    let outcome_idx = column(&schema.outcome)?;
    let treatment_idx = column(&schema.treatment)?;
    let covariate_idx: Vec<usize> =
        schema.covariates.iter().map(|c| column(c)).collect::<Result<_>>()?;
    let followup_idx = match &schema.followup {
        Some(name) => Some(column(name)?),
        None => None,
    };

    // First pass: pull every needed cell as a string so covariate typing
    // can look at whole columns.
    struct RawRow {
        outcome: String,
        treatment: String,
        covariates: Vec<String>,
        followup: Option<String>,
    }
    let mut raw = Vec::new();
    for record in csv_reader.records() {
        let record = record?;
        let cell = |idx: usize| record.get(idx).unwrap_or("").trim().to_string();
        raw.push(RawRow {
            outcome: cell(outcome_idx),
            treatment: cell(treatment_idx),
            covariates: covariate_idx.iter().map(|&i| cell(i)).collect(),
            followup: followup_idx.map(cell),
        });
    }
    if raw.is_empty() {
        return Err(Error::InvalidDataset("CSV contains a header but no data rows".into()));
    }

    let require = |value: &str, column: &str, row: usize| -> Result<()> {
        if value.is_empty() {
            return Err(Error::MissingValue { column: column.to_string(), row });
        }
        Ok(())
    };
    let parse_number = |value: &str, column: &str, row: usize| -> Result<f64> {
        require(value, column, row)?;
        match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::NonNumericValue {
                column: column.to_string(),
                row,
                value: value.to_string(),
            }),
        }
    };

    // Treatment mapping: numeric order when all labels are integers,
    // lexicographic otherwise.
    let mut levels: Vec<String> = Vec::new();
    for (i, row) in raw.iter().enumerate() {
        require(&row.treatment, &schema.treatment, i + 1)?;
        if !levels.contains(&row.treatment) {
            levels.push(row.treatment.clone());
        }
    }
    let all_integers: Option<Vec<i64>> =
        levels.iter().map(|l| l.parse::<i64>().ok()).collect();
    match all_integers {
        Some(values) => {
            let mut paired: Vec<(i64, String)> =
                values.into_iter().zip(levels.iter().cloned()).collect();
            paired.sort_by_key(|(v, _)| *v);
            levels = paired.into_iter().map(|(_, l)| l).collect();
        }
        None => levels.sort(),
    }
    let arm_of = |label: &str| levels.iter().position(|l| l == label).unwrap();

    // Covariate typing: a column is numeric when every cell parses as a
    // finite number; otherwise its sorted distinct values become
    // reference-coded indicator columns.
    enum ColumnKind {
        Numeric,
        Categorical(Vec<String>),
    }
    let mut kinds = Vec::with_capacity(covariate_idx.len());
    for (c, name) in schema.covariates.iter().enumerate() {
        for (i, row) in raw.iter().enumerate() {
            require(&row.covariates[c], name, i + 1)?;
        }
        let numeric = raw
            .iter()
            .all(|row| matches!(row.covariates[c].parse::<f64>(), Ok(v) if v.is_finite()));
        if numeric {
            kinds.push(ColumnKind::Numeric);
        } else {
            let mut column_levels: Vec<String> = Vec::new();
            for row in &raw {
                if !column_levels.contains(&row.covariates[c]) {
                    column_levels.push(row.covariates[c].clone());
                }
            }
            column_levels.sort();
            kinds.push(ColumnKind::Categorical(column_levels));
        }
    }

    let mut covariate_names = Vec::new();
    for (name, kind) in schema.covariates.iter().zip(&kinds) {
        match kind {
            ColumnKind::Numeric => covariate_names.push(name.clone()),
            ColumnKind::Categorical(column_levels) => {
                for level in &column_levels[1..] {
                    covariate_names.push(format!("{}={}", name, level));
                }
            }
        }
    }

    let mut rows = Vec::with_capacity(raw.len());
    for (i, row) in raw.iter().enumerate() {
        let row_no = i + 1;
        let y = parse_number(&row.outcome, &schema.outcome, row_no)?;
        let arm = arm_of(&row.treatment);
        let mut x = Vec::with_capacity(covariate_names.len());
        for ((value, name), kind) in
            row.covariates.iter().zip(&schema.covariates).zip(&kinds)
        {
            match kind {
                ColumnKind::Numeric => x.push(parse_number(value, name, row_no)?),
                ColumnKind::Categorical(column_levels) => {
                    for level in &column_levels[1..] {
                        x.push(if value == level { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        let t = match (&row.followup, &schema.followup) {
            (Some(value), Some(name)) => {
                let t = parse_number(value, name, row_no)?;
                if t <= 0.0 {
                    return Err(Error::NonPositiveFollowup { row: row_no, value: t });
                }
                t
            }
            _ => 1.0,
        };
        rows.push(PatientRow::new(y, x, arm, t));
    }

    let dataset = TrialDataset::new(rows)?;
    Ok(LoadedDataset { dataset, treatment_levels: levels, covariate_names })
}
