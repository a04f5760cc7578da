//! Command-line front end for filter tuning experiments.
//!
//! Each job reads a JSON campaign configuration (missing fields take the
//! spring-mass-damper defaults), applies `key=value` overrides and writes its
//! results with a `manifest.json` that is sufficient to reproduce them.

pub mod config;
pub mod error;
pub mod manifest;
pub mod output;
pub mod run;

pub use error::CliError;
pub use manifest::{Job, Manifest};
pub use run::{execute, rerun, report, JobInputs, Outcome};
