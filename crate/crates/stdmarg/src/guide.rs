//! The user guide, compiled.
//!
//! Each module below carries one chapter of the mdbook under `book/` as
//! its documentation, so `cargo test --doc` runs every code block in the
//! book against the current API. A chapter that drifts out of sync with
//! the crate fails the test suite instead of silently rotting. The
//! rendered book and these modules are the same Markdown files; read
//! whichever is closer to hand.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/data-and-models.md")]
pub mod data_and_models {}

#[doc = include_str!("../../../book/src/crude-and-standardized-means.md")]
pub mod crude_and_standardized_means {}

#[doc = include_str!("../../../book/src/variance-estimators.md")]
pub mod variance_estimators {}

#[doc = include_str!("../../../book/src/augmented-estimator.md")]
pub mod augmented_estimator {}

#[doc = include_str!("../../../book/src/randomization-and-simulation.md")]
pub mod randomization_and_simulation {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
