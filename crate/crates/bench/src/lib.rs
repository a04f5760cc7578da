//! Shared fixtures for the benchmarks.

use kftune_core::campaign::CampaignConfig;
use kftune_core::model::SpringMassDamper;
use kftune_core::sim::Dataset;

/// Desk-scale spring-mass-damper dataset and its perturbed starting parameters.
pub fn smd_fixture(q_positive: bool) -> (SpringMassDamper, CampaignConfig, Dataset, Vec<f64>) {
    let model = SpringMassDamper::default();
    let cfg = CampaignConfig::smd(q_positive);
    let (ds, theta) = cfg.simulation(&model, 0).expect("fixture simulates");
    (model, cfg, ds, theta)
}
