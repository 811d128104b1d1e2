//! Marginal treatment-group means for randomized trials.
//!
//! This crate estimates the marginal (population-averaged) mean outcome
//! under each treatment arm of a randomized trial, on the rate scale when
//! follow-up varies. Three estimators are provided:
//!
//! - the **crude** arm-specific rate (events per unit follow-up),
//! - the **standardized** mean, which averages model predictions over the
//!   pooled covariate distribution (g-computation), and
//! - an **augmented** estimator that combines the two, retaining the crude
//!   estimator's robustness while recovering the precision of covariate
//!   adjustment.
//!
//! Outcome working models are GLMs (gaussian, binomial, poisson) plus the
//! negative binomial with quadratic variance, fitted by Fisher scoring and
//! treated throughout as solutions to estimating equations, so every
//! downstream variance is available in model-based and sandwich form.
//!
//! The [`sim`] module contains a reproducible Monte Carlo harness for
//! studying the estimators' operating characteristics under several
//! randomization schemes; the `stdmarg` binary exposes both analysis and
//! simulation from the command line.
//!
//! The guide built from `book/` is also compiled into [`guide`], so every
//! snippet in the book runs as a doc-test.

pub mod analysis;
pub mod csv_in;
pub mod data;
pub mod error;
pub mod glm;
pub mod guide;
pub mod marginal;
pub mod model;
pub mod sim;

pub use analysis::{
    analyze, render_report, AnalysisConfig, AnalysisReport, Coefficient, ModelConfig,
    ModelDiagnostics, OutputFormat,
};
pub use csv_in::{load_dataset, load_dataset_from_reader, DataSchema, LoadedDataset};
pub use data::{PatientRow, TrialDataset};
pub use error::{Error, Result};
pub use glm::{fit, fit_with_options, FitOptions, FitResult};
pub use marginal::{
    confidence_interval, gbeta, mu1, mu1_with_form, mu2, mu3, mu3_with_form, CiScale,
    EstimatorKind, MarginalEstimate, ResidualForm, VarianceMethod, VcovSource,
};
pub use model::{Design, Family, Link, ModelSpec, OffsetRule};
pub use sim::{
    assign_treatments, generate_scenario, run_simulation, run_simulation_with_threads,
    true_marginal_mean, Frailty, RandomizationKind, RandomizationScheme, ScenarioSpec,
    SimulationConfig, SimulationReport,
};
