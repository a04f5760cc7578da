//! Adaptive tuning of extended Kalman filters for joint state and parameter
//! estimation.
//!
//! The filter is run forward, smoothed backward, and the noise covariances
//! `R`, `Q` and the initial covariance `P0` are re-estimated from the pass
//! products until the parameter estimates settle. An output-error
//! Gauss-Newton estimator provides the comparison baseline for data without
//! process noise.

pub mod campaign;
pub mod costs;
pub mod error;
pub mod estimators;
pub mod filter;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod nr;
pub mod rrr;
pub mod sim;

pub use campaign::{run_comparison, run_monte_carlo, CampaignConfig, ComparisonReport, MonteCarloReport};
pub use costs::{compute_costs, CostReport};
pub use error::{Error, Result};
pub use estimators::{EstimatorChoice, P0Method, QMethod, RMethod, TrimMask};
pub use filter::{dynamical_pass, ekf_forward, rts_smooth};
pub use model::{model_from_id, AugmentedState, Model, SpringMassDamper};
pub use nr::{nr_estimate, NrOptions, NrResult};
pub use rrr::{run_rrr, StartPoint, TuningConfig, TuningResult};
pub use sim::{simulate, Dataset, NoiseSpec};
