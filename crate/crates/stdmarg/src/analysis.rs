//! Analysis configuration, the (arm × estimator × variance method) grid,
//! and report rendering.
//!
//! [`analyze`] fits one working regression model to a dataset and fills
//! every requested grid cell with a [`MarginalEstimate`]; the resulting
//! [`AnalysisReport`] carries fit diagnostics (convergence, coefficient
//! table with sandwich standard errors) next to the estimates and
//! renders as an aligned text table, as CSV, or as versioned JSON that
//! parses back into the identical report.

use serde::{Deserialize, Serialize};

use crate::csv_in::{DataSchema, LoadedDataset};
use crate::error::{Error, Result};
use crate::glm::{fit, FitResult};
use crate::marginal::{
    mu1_with_form, mu2, mu3_with_form, CiScale, EstimatorKind, MarginalEstimate, ResidualForm,
    VarianceMethod, VcovSource,
};
use crate::model::{Family, Link, ModelSpec, OffsetRule};
use crate::sim::SCHEMA_VERSION;

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

fn default_ci_level() -> f64 {
    0.95
}

fn default_estimators() -> Vec<EstimatorKind> {
    vec![EstimatorKind::Mu1, EstimatorKind::Mu2, EstimatorKind::Mu3]
}

fn default_variance_methods() -> Vec<VarianceMethod> {
    vec![
        VarianceMethod::IidSandwich,
        VarianceMethod::FixedX(VcovSource::Sandwich),
        VarianceMethod::RandomX(VcovSource::Sandwich),
        VarianceMethod::Augmented,
    ]
}

/// The `model` section of an analysis config. Link defaults to the
/// family's canonical link; the offset defaults to log follow-up exactly
/// when the dataset has non-unit follow-up and the link is log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    #[serde(default)]
    pub link: Option<Link>,
    #[serde(default)]
    pub interactions: bool,
    #[serde(default)]
    pub offset: Option<OffsetRule>,
}

impl ModelConfig {
    pub fn new(family: Family) -> Self {
        ModelConfig { family, link: None, interactions: false, offset: None }
    }

    pub fn to_spec(&self, has_followup: bool) -> ModelSpec {
        let link = self.link.unwrap_or_else(|| self.family.canonical_link());
        let offset = self.offset.unwrap_or(if link == Link::Log && has_followup {
            OffsetRule::LogFollowup
        } else {
            OffsetRule::None
        });
        ModelSpec { family: self.family, link, interactions: self.interactions, offset }
    }
}

/// Everything `analyze` needs besides the dataset itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub data: DataSchema,
    pub model: ModelConfig,
    /// Arms to report; absent means every arm in the data.
    #[serde(default)]
    pub arms: Option<Vec<usize>>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default = "default_variance_methods")]
    pub variance_methods: Vec<VarianceMethod>,
    /// Interval scale; absent means log for count families, identity
    /// otherwise.
    #[serde(default)]
    pub ci_scale: Option<CiScale>,
    #[serde(default = "default_ci_level")]
    pub ci_level: f64,
    /// Use the plain `Y − μ̂` residual inside the crude/augmented
    /// variances instead of the follow-up–scaled `Y − μ̂T`.
    #[serde(default)]
    pub printed_variance: bool,
}

impl AnalysisConfig {
    pub fn new(data: DataSchema, model: ModelConfig) -> Self {
        AnalysisConfig {
            schema_version: SCHEMA_VERSION,
            data,
            model,
            arms: None,
            estimators: default_estimators(),
            variance_methods: default_variance_methods(),
            ci_scale: None,
            ci_level: default_ci_level(),
            printed_variance: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {} (this build writes {})",
                self.schema_version, SCHEMA_VERSION
            )));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidConfig("no estimators requested".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ci_level must be in (0, 1), got {}",
                self.ci_level
            )));
        }
        for &estimator in &self.estimators {
            if !self.variance_methods.iter().any(|m| m.applies_to(estimator)) {
                return Err(Error::InvalidConfig(format!(
                    "no requested variance method applies to {}",
                    estimator.label()
                )));
            }
        }
        Ok(())
    }
}

/// One row of the coefficient table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub sandwich_se: f64,
}

/// Fit-level facts reported next to the estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDiagnostics {
    pub family: Family,
    pub link: Link,
    pub interactions: bool,
    pub offset: OffsetRule,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    /// NB2 dispersion estimate, when the family has one.
    pub alpha: Option<f64>,
    /// True when the NB2 dispersion collapsed to its lower clamp.
    pub effectively_poisson: bool,
    pub coefficients: Vec<Coefficient>,
}

/// The full output of [`analyze`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub n: usize,
    /// Arm code -> original treatment label.
    pub treatment_levels: Vec<String>,
    pub model: ModelDiagnostics,
    pub ci_level: f64,
    pub ci_scale: CiScale,
    pub printed_variance: bool,
    pub estimates: Vec<MarginalEstimate>,
}

/// Output formats for [`render_report`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Text,
    Csv,
    Json,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(OutputFormat::Text),
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::InvalidConfig(format!(
                "unknown output format '{}' (expected text, csv, or json)",
                other
            ))),
        }
    }
}

/// Fit the configured model once and fill every requested
/// (arm, estimator, variance method) cell.
pub fn analyze(loaded: &LoadedDataset, config: &AnalysisConfig) -> Result<AnalysisReport> {
    config.validate()?;
    let dataset = &loaded.dataset;
    let arms: Vec<usize> = match &config.arms {
        Some(arms) => arms.clone(),
        None => (0..dataset.n_arms()).collect(),
    };
    for &arm in &arms {
        dataset.require_arm(arm)?;
    }

    let spec = config.model.to_spec(!dataset.unit_followup());
    let fitted = fit(dataset, &spec)?;
    let ci_scale = config.ci_scale.unwrap_or_else(|| CiScale::default_for(spec.family));
    let form = if config.printed_variance {
        ResidualForm::Unscaled
    } else {
        ResidualForm::FollowupScaled
    };

    let mut estimates = Vec::new();
    for &arm in &arms {
        for &estimator in &config.estimators {
            for method in config.variance_methods.iter().filter(|m| m.applies_to(estimator)) {
                let cell = compute_cell(dataset, &fitted, arm, estimator, *method, form)
                    .and_then(|e| e.with_interval(ci_scale, config.ci_level))
                    .map_err(|e| Error::CellFailure {
                        arm,
                        estimator: estimator.label().to_string(),
                        method: method.to_string(),
                        source: Box::new(e),
                    })?;
                estimates.push(cell);
            }
        }
    }

    Ok(AnalysisReport {
        schema_version: SCHEMA_VERSION,
        n: dataset.n(),
        treatment_levels: loaded.treatment_levels.clone(),
        model: diagnostics(&fitted, loaded),
        ci_level: config.ci_level,
        ci_scale,
        printed_variance: config.printed_variance,
        estimates,
    })
}

fn compute_cell(
    dataset: &crate::data::TrialDataset,
    fitted: &FitResult,
    arm: usize,
    estimator: EstimatorKind,
    method: VarianceMethod,
    form: ResidualForm,
) -> Result<MarginalEstimate> {
    match estimator {
        EstimatorKind::Mu1 => mu1_with_form(dataset, arm, form),
        EstimatorKind::Mu2 => mu2(dataset, fitted, arm, method),
        EstimatorKind::Mu3 => mu3_with_form(dataset, fitted, arm, form),
    }
}

fn diagnostics(fitted: &FitResult, loaded: &LoadedDataset) -> ModelDiagnostics {
    let spec = fitted.spec();
    let names = coefficient_names(loaded, fitted);
    let vcov = fitted.sandwich_vcov();
    let coefficients = names
        .into_iter()
        .enumerate()
        .map(|(j, name)| Coefficient {
            name,
            estimate: if j < fitted.beta_hat.len() {
                fitted.beta_hat[j]
            } else {
                fitted.alpha_hat.unwrap_or(f64::NAN)
            },
            sandwich_se: vcov[(j, j)].max(0.0).sqrt(),
        })
        .collect();
    ModelDiagnostics {
        family: spec.family,
        link: spec.link,
        interactions: spec.interactions,
        offset: spec.offset,
        converged: fitted.converged,
        iterations: fitted.iterations,
        loglik: fitted.loglik,
        alpha: fitted.alpha_hat,
        effectively_poisson: fitted.effectively_poisson,
        coefficients,
    }
}

/// Human-readable coefficient names in design-column order: intercept,
/// covariates, arm indicators, then arm×covariate interactions, with the
/// NB2 dispersion appended when present.
fn coefficient_names(loaded: &LoadedDataset, fitted: &FitResult) -> Vec<String> {
    let levels = &loaded.treatment_levels;
    let covs = &loaded.covariate_names;
    let mut names = vec!["intercept".to_string()];
    names.extend(covs.iter().cloned());
    for level in &levels[1..] {
        names.push(format!("arm:{}", level));
    }
    if fitted.spec().interactions {
        for level in &levels[1..] {
            for cov in covs {
                names.push(format!("arm:{}:{}", level, cov));
            }
        }
    }
    if fitted.alpha_hat.is_some() {
        names.push("alpha".to_string());
    }
    names
}

/// Render a report as an aligned text table, CSV (full precision), or
/// JSON (full precision, parses back into the identical report).
pub fn render_report(report: &AnalysisReport, format: OutputFormat) -> String {
    match format {
        OutputFormat::Json => render_json(report),
        OutputFormat::Csv => render_csv(report),
        OutputFormat::Text => render_text(report),
    }
}

fn render_json(report: &AnalysisReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

fn render_csv(report: &AnalysisReport) -> String {
    let mut out = String::from(
        "arm,treatment,estimator,variance_method,estimate,variance,se,ci_low,ci_high,ci_scale,n_used\n",
    );
    for e in &report.estimates {
        let label = report
            .treatment_levels
            .get(e.arm)
            .cloned()
            .unwrap_or_else(|| e.arm.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            e.arm,
            label,
            e.estimator.label(),
            e.variance_method,
            e.estimate,
            e.variance,
            e.se(),
            e.ci_low,
            e.ci_high,
            match e.ci_scale {
                CiScale::Identity => "identity",
                CiScale::Log => "log",
            },
            e.n_used
        ));
    }
    out
}

fn render_text(report: &AnalysisReport) -> String {
    use std::fmt::Write;

    let mut out = String::new();
    let m = &report.model;
    writeln!(
        out,
        "Model: {} ({} link){}{}",
        family_name(m.family),
        link_name(m.link),
        if m.interactions { ", arm-by-covariate interactions" } else { "" },
        match m.offset {
            OffsetRule::None => "",
            OffsetRule::LogFollowup => ", log follow-up offset",
        }
    )
    .unwrap();
    write!(
        out,
        "Fit: {} in {} iterations, log-likelihood {:.4}",
        if m.converged { "converged" } else { "NOT converged" },
        m.iterations,
        m.loglik
    )
    .unwrap();
    match m.alpha {
        Some(alpha) if m.effectively_poisson => {
            writeln!(out, ", dispersion alpha {:.3e} (effectively Poisson)", alpha).unwrap()
        }
        Some(alpha) => writeln!(out, ", dispersion alpha {:.4}", alpha).unwrap(),
        None => writeln!(out).unwrap(),
    }

    writeln!(out, "Coefficients (sandwich SE):").unwrap();
    let name_width =
        m.coefficients.iter().map(|c| c.name.len()).max().unwrap_or(0).max(4);
    for c in &m.coefficients {
        writeln!(
            out,
            "  {:<name_width$}  {:>12.6}  ({:.6})",
            c.name, c.estimate, c.sandwich_se
        )
        .unwrap();
    }
    writeln!(out).unwrap();

    writeln!(
        out,
        "Marginal means, {:.0}% CI ({} scale):",
        100.0 * report.ci_level,
        match report.ci_scale {
            CiScale::Identity => "identity",
            CiScale::Log => "log",
        }
    )
    .unwrap();

    // Column per (estimator, method) in first-appearance order; row per
    // arm.
    let mut columns: Vec<(EstimatorKind, VarianceMethod)> = Vec::new();
    for e in &report.estimates {
        if !columns.contains(&(e.estimator, e.variance_method)) {
            columns.push((e.estimator, e.variance_method));
        }
    }
    let mut arms: Vec<usize> = Vec::new();
    for e in &report.estimates {
        if !arms.contains(&e.arm) {
            arms.push(e.arm);
        }
    }

    let mut table: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["Arm".to_string()];
    header.extend(
        columns.iter().map(|(est, method)| format!("{} [{}]", est.label(), method)),
    );
    table.push(header);
    for &arm in &arms {
        let label = report
            .treatment_levels
            .get(arm)
            .cloned()
            .unwrap_or_else(|| arm.to_string());
        let mut row = vec![format!("{} ({})", arm, label)];
        for &(est, method) in &columns {
            let cell = report
                .estimates
                .iter()
                .find(|e| e.arm == arm && e.estimator == est && e.variance_method == method)
                .map_or("-".to_string(), |e| {
                    format!("{:.3} ({:.3}, {:.3})", e.estimate, e.ci_low, e.ci_high)
                });
            row.push(cell);
        }
        table.push(row);
    }

    let widths: Vec<usize> = (0..table[0].len())
        .map(|j| table.iter().map(|row| row[j].len()).max().unwrap_or(0))
        .collect();
    for row in &table {
        let mut line = String::new();
        for (j, cell) in row.iter().enumerate() {
            if j > 0 {
                line.push_str("   ");
            }
            line.push_str(&format!("{:<width$}", cell, width = widths[j]));
        }
        writeln!(out, "{}", line.trim_end()).unwrap();
    }
    out
}

fn family_name(family: Family) -> &'static str {
    match family {
        Family::Gaussian => "gaussian",
        Family::Binomial => "binomial",
        Family::Poisson => "poisson",
        Family::NegBin2 => "negbin2",
    }
}

fn link_name(link: Link) -> &'static str {
    match link {
        Link::Identity => "identity",
        Link::Logit => "logit",
        Link::Log => "log",
    }
}
