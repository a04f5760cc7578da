//! Monte-Carlo campaigns and the side-by-side comparison of tuning methods.
//!
//! Simulation `i` of a campaign draws its noise from stream `2i` and its
//! initial parameter perturbation from stream `2i + 1` of the campaign seed.
//! Simulations run in parallel on a rayon pool capped by `KFTUNE_THREADS`;
//! results are collected in index order, so the outcome does not depend on
//! the number of threads.

use std::env;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::costs::{sample_second_moment, whiteness};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorChoice, P0Method, QMethod, RMethod, TrimMask};
use crate::linalg::diag_vec;
use crate::metrics::{aggregate_mc, McMetrics, McReference, NrMetrics, SimSummary};
use crate::model::{AugmentedState, Model};
use crate::nr::{nr_estimate, NrOptions, NrResult};
use crate::rrr::{run_rrr, StartPoint, TuningConfig, TuningResult};
use crate::sim::{noise_stream, perturb_parameters_with, perturb_stream, simulate_stream, stream_rng, Dataset, NoiseSpec};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "KFTUNE_THREADS";

/// True system and noise levels used to generate data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub x0: Vec<f64>,
    pub theta: Vec<f64>,
    /// Diagonal of the measurement-noise covariance.
    pub r: Vec<f64>,
    /// Diagonal of the process-noise covariance on the physical states.
    pub q: Vec<f64>,
}

impl TruthConfig {
    pub fn smd(q_positive: bool) -> Self {
        Self {
            x0: vec![1.0, 0.0],
            theta: vec![4.0, 0.4, 0.6],
            r: vec![0.001, 0.004],
            q: if q_positive { vec![0.001, 0.002] } else { vec![0.0, 0.0] },
        }
    }

    pub fn has_process_noise(&self) -> bool {
        self.q.iter().any(|&q| q != 0.0)
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec::diagonal(&self.r, &self.q)
    }

    pub fn initial_state(&self) -> AugmentedState {
        AugmentedState::new(self.x0.clone(), self.theta.clone())
    }
}

/// Which estimates the tuned results are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// Output-error estimates without process noise, truth otherwise.
    Auto,
    Nr,
    Truth,
}

/// A named estimator combination, one row of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub estimator: EstimatorChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub model: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub dt: f64,
    pub seed: u64,
    pub truth: TruthConfig,
    pub tuning: TuningConfig,
    pub nr: NrOptions,
    pub reference: ReferenceKind,
    /// Starting parameters for every simulation instead of perturbed truth.
    pub theta_start: Option<Vec<f64>>,
    /// Rows of a method comparison; the first is usually the reference recipe.
    pub methods: Vec<MethodSpec>,
    pub output_dir: Option<String>,
}

impl CampaignConfig {
    /// Spring-mass-damper campaign at desk scale.
    pub fn smd(q_positive: bool) -> Self {
        let tuning = if q_positive {
            TuningConfig::q_positive()
        } else {
            TuningConfig::q_zero()
        };
        Self {
            model: "smd".into(),
            n: 100,
            dt: 0.1,
            seed: 42,
            truth: TruthConfig::smd(q_positive),
            theta_start: None,
            methods: comparison_methods(&tuning.estimator),
            tuning,
            nr: NrOptions::default(),
            reference: ReferenceKind::Auto,
            output_dir: None,
        }
    }

    /// Build a configuration from a (possibly partial) JSON document.
    ///
    /// Missing fields take the desk-scale defaults of the mode implied by
    /// `truth.q` (any non-zero entry selects the process-noise defaults).
    /// Unknown fields are errors.
    pub fn from_value(user: Value) -> Result<Self> {
        if !user.is_object() {
            return Err(Error::Config("campaign configuration must be a JSON object".into()));
        }
        let q_positive = match user.pointer("/truth/q") {
            Some(Value::Array(q)) => q.iter().any(|v| v.as_f64().is_some_and(|x| x != 0.0)),
            _ => false,
        };
        let mut merged = serde_json::to_value(Self::smd(q_positive)).expect("config serializes");
        if user.pointer("/tuning/estimator").is_some() && user.get("methods").is_none() {
            // Keep the comparison rows anchored on the user's reference recipe.
            let partial: Value = user["tuning"]["estimator"].clone();
            let mut est = merged["tuning"]["estimator"].clone();
            merge(&mut est, partial);
            let est: EstimatorChoice =
                serde_json::from_value(est).map_err(|e| Error::Config(format!("tuning.estimator: {e}")))?;
            merged["methods"] = serde_json::to_value(comparison_methods(&est)).expect("methods serialize");
        }
        merge(&mut merged, user);
        let cfg: Self = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config("N must be at least 2".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if self.tuning.n_sims < 2 {
            return Err(Error::Config("a campaign needs at least two simulations".into()));
        }
        if self.theta_start.as_ref().is_some_and(|t| t.len() != self.truth.theta.len()) {
            return Err(Error::Config("theta_start must have one entry per parameter".into()));
        }
        if self.truth.r.iter().chain(&self.truth.q).any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("noise variances must be non-negative".into()));
        }
        if self.reference_kind() == ReferenceKind::Nr && self.truth.has_process_noise() {
            return Err(Error::Config(
                "the output-error reference is only valid for data without process noise".into(),
            ));
        }
        self.tuning.validate()?;
        for m in &self.methods {
            m.estimator
                .validate()
                .map_err(|e| Error::Config(format!("method '{}': {e}", m.name)))?;
        }
        Ok(())
    }

    /// `Auto` resolved against the truth configuration.
    pub fn reference_kind(&self) -> ReferenceKind {
        match self.reference {
            ReferenceKind::Auto if self.truth.has_process_noise() => ReferenceKind::Truth,
            ReferenceKind::Auto => ReferenceKind::Nr,
            other => other,
        }
    }

    /// Noise and perturbation streams consumed by simulation `index`.
    pub fn streams(&self, index: usize) -> (u64, u64) {
        (noise_stream(index as u64), perturb_stream(index as u64))
    }

    /// Regenerate the dataset and initial parameters of simulation `index`.
    pub fn simulation(&self, model: &dyn Model, index: usize) -> Result<(Dataset, Vec<f64>)> {
        let ds = simulate_stream(
            model,
            &self.truth.initial_state(),
            &self.truth.noise(),
            self.n,
            self.seed,
            self.streams(index).0,
        )?;
        Ok((ds, self.initial_theta(index)))
    }

    /// Starting parameters of simulation `index`: `theta_start` if set,
    /// otherwise the truth perturbed from the simulation's own stream.
    pub fn initial_theta(&self, index: usize) -> Vec<f64> {
        if let Some(theta) = &self.theta_start {
            return theta.clone();
        }
        perturb_parameters_with(
            &self.truth.theta,
            self.tuning.initial_guesses.theta_perturb,
            &mut stream_rng(self.seed, self.streams(index).1),
        )
    }

    /// Check that `model` is the configured one.
    pub fn check_model(&self, model: &dyn Model) -> Result<()> {
        if model.id() != self.model {
            return Err(Error::ModelMismatch {
                expected: self.model.clone(),
                found: model.id().to_string(),
            });
        }
        if (model.dt() - self.dt).abs() > 0.0 {
            return Err(Error::Config(format!(
                "model dt {} differs from configured dt {}",
                model.dt(),
                self.dt
            )));
        }
        Ok(())
    }
}

/// Recursively overlay `patch` onto `base`; objects merge, everything else replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, p) => *slot = p,
    }
}

/// The adaptive methods compared side by side, anchored on `reference`.
pub fn comparison_methods(reference: &EstimatorChoice) -> Vec<MethodSpec> {
    let scaled = |q: QMethod, r: RMethod| EstimatorChoice {
        p0: P0Method::ScaleUp,
        p0_mask: TrimMask::ReferenceParamOnly,
        q,
        q_mask: TrimMask::ReferenceStateOnly,
        q_floor: reference.q_floor,
        r,
        r_mask: TrimMask::DiagOnly,
    };
    vec![
        MethodSpec {
            name: "reference".into(),
            estimator: *reference,
        },
        MethodSpec {
            name: "iim".into(),
            estimator: EstimatorChoice {
                p0: P0Method::Iim,
                ..scaled(QMethod::Mt, RMethod::Mt)
            },
        },
        MethodSpec {
            name: "bavdekar".into(),
            estimator: EstimatorChoice {
                p0: P0Method::Smoothed,
                p0_mask: TrimMask::Full,
                q: QMethod::Em,
                q_mask: TrimMask::Full,
                q_floor: reference.q_floor,
                r: RMethod::Em,
                r_mask: TrimMask::Full,
            },
        },
        MethodSpec {
            name: "mt".into(),
            estimator: scaled(QMethod::Mt, RMethod::Mt),
        },
        MethodSpec {
            name: "ms".into(),
            estimator: scaled(QMethod::Ms, RMethod::Ms),
        },
    ]
}

/// Injected noise second moments next to their estimates, per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCheck {
    pub injected_r: Vec<f64>,
    pub estimated_r: Vec<f64>,
    /// Second moment of the smoothed residues, the estimated measurement-noise sequence.
    pub residue_r: Vec<f64>,
    pub injected_q: Vec<f64>,
    pub estimated_q: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimRecord {
    pub index: usize,
    pub noise_stream: u64,
    pub perturb_stream: u64,
    pub theta_init: Vec<f64>,
    pub tuning: TuningResult,
    pub nr: Option<NrResult>,
    pub nr_error: Option<String>,
    pub noise: Option<NoiseCheck>,
    /// Fraction of innovation autocorrelation lags 1..20 inside the ±2/√N band.
    pub whiteness_inside: Option<f64>,
}

impl SimRecord {
    /// Whether the simulation enters the aggregate metrics.
    pub fn usable(&self, needs_nr: bool) -> bool {
        !self.tuning.is_diverged() && !self.tuning.history.is_empty() && (!needs_nr || self.nr.is_some())
    }
}

/// Qualitative behaviour flags of one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodFlags {
    pub all_converged: bool,
    /// Some component of the R ratio against truth is off by more than 20%.
    pub r_drift: bool,
    /// Fraction of simulations whose J5 history keeps oscillating over its second half.
    pub cost_oscillation: f64,
}

/// Mean of `estimated / injected` per channel over usable simulations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseAgreement {
    pub r: Vec<Option<f64>>,
    pub q: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignAggregate {
    pub method: String,
    pub estimator: EstimatorChoice,
    pub reference: ReferenceKind,
    pub n_sims: usize,
    pub n_used: usize,
    pub n_converged: usize,
    pub n_diverged: usize,
    pub n_nr_failed: usize,
    pub mean_iterations: f64,
    pub metrics: Option<McMetrics>,
    pub noise_agreement: NoiseAgreement,
    /// Innovation whiteness pooled over usable simulations.
    pub whiteness_inside: Option<f64>,
    pub flags: MethodFlags,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub aggregate: CampaignAggregate,
    pub sims: Vec<SimRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub reference: ReferenceKind,
    /// Scatter of the output-error estimates, when they are the reference.
    pub nr: Option<NrMetrics>,
    pub methods: Vec<MonteCarloReport>,
}

/// Worker-thread cap from `KFTUNE_THREADS`, if set to a positive integer.
pub fn thread_cap() -> Option<usize> {
    env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

fn in_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match thread_cap() {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn noise_check(ds: &Dataset, result: &TuningResult) -> Option<NoiseCheck> {
    let passes = result.final_passes.as_ref()?;
    let diag = |seq: &[DVector<f64>]| sample_second_moment(seq).map(|m| diag_vec(&m)).unwrap_or_default();
    Some(NoiseCheck {
        injected_r: diag(&ds.v),
        estimated_r: diag_vec(&result.r_hat),
        residue_r: diag(&passes.smoother.smoothed_residue),
        injected_q: diag(&ds.w),
        estimated_q: diag_vec(&result.q_hat),
    })
}

fn oscillates(result: &TuningResult) -> bool {
    let j5: Vec<f64> = result.history.iter().map(|h| h.costs.j5).collect();
    if j5.len() < 8 {
        return false;
    }
    let tail = &j5[j5.len() / 2..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let std = (tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / tail.len() as f64).sqrt();
    let diffs: Vec<f64> = tail.windows(2).map(|w| w[1] - w[0]).filter(|d| *d != 0.0).collect();
    let sign_changes = diffs.windows(2).filter(|w| w[0].signum() != w[1].signum()).count();
    sign_changes >= 2 && std > 1e-6 * (1.0 + mean.abs())
}

fn compute_nr(model: &dyn Model, cfg: &CampaignConfig) -> Result<Vec<std::result::Result<NrResult, String>>> {
    in_pool(|| {
        (0..cfg.tuning.n_sims)
            .into_par_iter()
            .map(|i| -> Result<std::result::Result<NrResult, String>> {
                let (ds, theta) = cfg.simulation(model, i)?;
                Ok(nr_estimate(model, &ds, &theta, &cfg.nr).map_err(|e| e.to_string()))
            })
            .collect::<Result<Vec<_>>>()
    })?
}

fn run_method(
    model: &dyn Model,
    cfg: &CampaignConfig,
    method: &MethodSpec,
    nr: Option<&[std::result::Result<NrResult, String>]>,
) -> Result<MonteCarloReport> {
    let tuning = TuningConfig {
        estimator: method.estimator,
        ..cfg.tuning.clone()
    };
    tuning.validate()?;
    let sims: Vec<SimRecord> = in_pool(|| {
        (0..cfg.tuning.n_sims)
            .into_par_iter()
            .map(|i| -> Result<SimRecord> {
                let (ds, theta) = cfg.simulation(model, i)?;
                let start = StartPoint {
                    x0: cfg.truth.x0.clone(),
                    theta: theta.clone(),
                };
                let mut result = run_rrr(model, &ds, &tuning, &start)?;
                let noise = noise_check(&ds, &result);
                let whiteness_inside = result.final_passes.as_ref().and_then(|p| {
                    let innov: Vec<DVector<f64>> = p.filter.steps.iter().map(|s| s.innovation.clone()).collect();
                    whiteness(&innov).ok().map(|w| w.fraction_inside())
                });
                result.final_passes = None;
                let (nr_result, nr_error) = match nr.map(|v| &v[i]) {
                    Some(Ok(r)) => (Some(r.clone()), None),
                    Some(Err(e)) => (None, Some(e.clone())),
                    None => (None, None),
                };
                let (noise_stream, perturb_stream) = cfg.streams(i);
                Ok(SimRecord {
                    index: i,
                    noise_stream,
                    perturb_stream,
                    theta_init: theta,
                    tuning: result,
                    nr: nr_result,
                    nr_error,
                    noise,
                    whiteness_inside,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(MonteCarloReport {
        aggregate: aggregate(cfg, method, &sims, nr.is_some())?,
        sims,
    })
}

fn ratio_means(pairs: Vec<Vec<(f64, f64)>>) -> Vec<Option<f64>> {
    pairs
        .into_iter()
        .map(|ch| {
            if ch.is_empty() || ch.iter().any(|(_, d)| *d == 0.0) {
                None
            } else {
                Some(ch.iter().map(|(n, d)| n / d).sum::<f64>() / ch.len() as f64)
            }
        })
        .collect()
}

fn aggregate(cfg: &CampaignConfig, method: &MethodSpec, sims: &[SimRecord], needs_nr: bool) -> Result<CampaignAggregate> {
    let used: Vec<&SimRecord> = sims.iter().filter(|s| s.usable(needs_nr)).collect();
    let summaries: Vec<SimSummary> = used
        .iter()
        .map(|s| SimSummary {
            theta_hat: s.tuning.theta_hat.clone(),
            p_theta: s.tuning.p_theta.clone(),
            r_diag: diag_vec(&s.tuning.r_hat),
            q_diag: diag_vec(&s.tuning.q_hat),
            costs: s.tuning.final_costs().cloned().expect("usable simulations have history"),
        })
        .collect();
    let nr_used: Vec<NrResult> = used.iter().filter_map(|s| s.nr.clone()).collect();
    let metrics = if summaries.len() >= 2 {
        let reference = McReference {
            theta_true: &cfg.truth.theta,
            r_true: &cfg.truth.r,
            q_true: &cfg.truth.q,
            nr: needs_nr.then_some(nr_used.as_slice()),
        };
        Some(aggregate_mc(&summaries, &reference)?)
    } else {
        None
    };

    let m = cfg.truth.r.len();
    let n = cfg.truth.q.len();
    let checks: Vec<&NoiseCheck> = used.iter().filter_map(|s| s.noise.as_ref()).collect();
    let noise_agreement = NoiseAgreement {
        r: ratio_means(
            (0..m)
                .map(|i| checks.iter().map(|c| (c.estimated_r[i], c.injected_r[i])).collect())
                .collect(),
        ),
        q: ratio_means(
            (0..n)
                .map(|i| checks.iter().map(|c| (c.estimated_q[i], c.injected_q[i])).collect())
                .collect(),
        ),
    };
    let white: Vec<f64> = used.iter().filter_map(|s| s.whiteness_inside).collect();
    let whiteness_inside = (!white.is_empty()).then(|| white.iter().sum::<f64>() / white.len() as f64);

    let r_drift = metrics
        .as_ref()
        .map(|mm| mm.r_ratio_true.iter().any(|r| r.is_some_and(|v| (v - 1.0).abs() > 0.2)))
        .unwrap_or(false);
    let oscillating = used.iter().filter(|s| oscillates(&s.tuning)).count();
    let n_converged = sims.iter().filter(|s| s.tuning.converged).count();
    let mean_iterations = sims.iter().map(|s| s.tuning.iterations_used as f64).sum::<f64>() / sims.len().max(1) as f64;

    Ok(CampaignAggregate {
        method: method.name.clone(),
        estimator: method.estimator,
        reference: cfg.reference_kind(),
        n_sims: sims.len(),
        n_used: used.len(),
        n_converged,
        n_diverged: sims.iter().filter(|s| s.tuning.is_diverged()).count(),
        n_nr_failed: sims.iter().filter(|s| s.nr_error.is_some()).count(),
        mean_iterations,
        metrics,
        noise_agreement,
        whiteness_inside,
        flags: MethodFlags {
            all_converged: n_converged == sims.len(),
            r_drift,
            cost_oscillation: if used.is_empty() {
                0.0
            } else {
                oscillating as f64 / used.len() as f64
            },
        },
    })
}

/// Run the configured tuning recipe over `n_sims` fresh datasets.
pub fn run_monte_carlo(model: &dyn Model, cfg: &CampaignConfig) -> Result<MonteCarloReport> {
    cfg.validate()?;
    cfg.check_model(model)?;
    let nr = match cfg.reference_kind() {
        ReferenceKind::Nr => Some(compute_nr(model, cfg)?),
        _ => None,
    };
    let method = MethodSpec {
        name: "reference".into(),
        estimator: cfg.tuning.estimator,
    };
    run_method(model, cfg, &method, nr.as_deref())
}

/// Run every configured method on the same datasets and starting points.
pub fn run_comparison(model: &dyn Model, cfg: &CampaignConfig) -> Result<ComparisonReport> {
    cfg.validate()?;
    cfg.check_model(model)?;
    if cfg.methods.is_empty() {
        return Err(Error::Config("no methods to compare".into()));
    }
    let reference = cfg.reference_kind();
    let nr = match reference {
        ReferenceKind::Nr => Some(compute_nr(model, cfg)?),
        _ => None,
    };
    let methods = cfg
        .methods
        .iter()
        .map(|m| run_method(model, cfg, m, nr.as_deref()))
        .collect::<Result<Vec<_>>>()?;
    let nr_metrics = methods
        .first()
        .and_then(|r| r.aggregate.metrics.as_ref())
        .and_then(|m| m.nr.clone());
    Ok(ComparisonReport {
        reference,
        nr: nr_metrics,
        methods,
    })
}
