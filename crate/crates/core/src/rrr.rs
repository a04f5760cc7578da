//! The iterative tuning recipe: filter, smooth, re-estimate `X0`, `P0`, `Θ`,
//! `Q` and `R`, and repeat until the statistics stop changing.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::costs::{compute_costs, CostReport};
use crate::error::{Error, Result};
use crate::estimators::{
    augment, estimate_q, estimate_r, p0_iim, p0_scale_up, p0_smoothed, EstimatorChoice, P0Method,
    PassProducts, QMethod,
};
use crate::filter::{dynamical_pass, ekf_forward, rts_smooth, DynamicalPass, FilterPass, SmootherPass};
use crate::linalg::{bottom_right, diag_matrix, diag_vec, serde_rows, top_left};
use crate::model::Model;
use crate::sim::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum X0Policy {
    /// Physical initial state known and held fixed.
    Given,
    /// Physical initial state replaced by `x_{0|N}` after each pass.
    Smoothed,
}

/// Diagonal initial guesses for the first pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialGuesses {
    pub p0_diag: f64,
    pub q_diag: f64,
    pub r_diag: f64,
    /// Half-width of the uniform relative perturbation of `Θ_true`.
    pub theta_perturb: f64,
}

impl Default for InitialGuesses {
    fn default() -> Self {
        Self {
            p0_diag: 1e-1,
            q_diag: 1e-1,
            r_diag: 0.5,
            theta_perturb: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningConfig {
    pub estimator: EstimatorChoice,
    pub max_iters: usize,
    pub convergence_tol: f64,
    /// Run exactly `max_iters` iterations and ignore the tolerance.
    #[serde(default)]
    pub fixed_iterations: bool,
    #[serde(default)]
    pub initial_guesses: InitialGuesses,
    pub x0_policy: X0Policy,
    pub n_sims: usize,
    /// Evaluate J0 against the starting `X0` of the first pass.
    #[serde(default)]
    pub j0_prior: bool,
}

impl TuningConfig {
    /// Defaults for data without process noise.
    pub fn q_zero() -> Self {
        Self {
            estimator: EstimatorChoice::reference_q_zero(),
            max_iters: 20,
            convergence_tol: 1e-6,
            fixed_iterations: false,
            initial_guesses: InitialGuesses::default(),
            x0_policy: X0Policy::Given,
            n_sims: 50,
            j0_prior: false,
        }
    }

    /// Defaults for data with process noise.
    pub fn q_positive() -> Self {
        Self {
            estimator: EstimatorChoice::reference_q_positive(),
            max_iters: 100,
            ..Self::q_zero()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.convergence_tol > 0.0) {
            return Err(Error::Config("convergence_tol must be positive".into()));
        }
        let g = &self.initial_guesses;
        if !(g.p0_diag > 0.0 && g.q_diag >= 0.0 && g.r_diag > 0.0 && g.theta_perturb >= 0.0) {
            return Err(Error::Config(
                "initial guesses need p0_diag > 0, q_diag ≥ 0, r_diag > 0, theta_perturb ≥ 0".into(),
            ));
        }
        self.estimator.validate()
    }
}

/// Starting point of a tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartPoint {
    pub x0: Vec<f64>,
    pub theta: Vec<f64>,
}

/// Statistics used by and produced in one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `Θ` in the initial state of this pass.
    pub theta0: Vec<f64>,
    pub p0_diag: Vec<f64>,
    /// Physical-state diagonal of the `Q` used in this pass.
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
    /// `Θ_{N|N}` at the end of this pass.
    pub theta_final: Vec<f64>,
    /// Diagonal of the parameter block of `P_{N|N}`.
    pub p_theta_diag: Vec<f64>,
    pub costs: CostReport,
    /// Largest relative change of `Θ`, diag `R`, diag `Q` against the previous iteration.
    pub max_rel_change: Option<f64>,
    pub ridge_events: usize,
    pub clamp_events: usize,
}

/// Products of the last completed pass, kept for diagnostics and plotting.
#[derive(Debug, Clone)]
pub struct FinalPasses {
    pub filter: FilterPass,
    pub smoother: SmootherPass,
    pub dynamical: DynamicalPass,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuningResult {
    /// `Θ_{N|N}` of the last completed pass.
    pub theta_hat: Vec<f64>,
    /// Parameter block of `P_{N|N}`.
    #[serde(with = "serde_rows")]
    pub p_theta: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub r_hat: DMatrix<f64>,
    /// Physical-state block of the estimated `Q`.
    #[serde(with = "serde_rows")]
    pub q_hat: DMatrix<f64>,
    #[serde(with = "serde_rows")]
    pub p0_hat: DMatrix<f64>,
    pub x0_hat: Vec<f64>,
    pub iterations_used: usize,
    pub history: Vec<IterationRecord>,
    pub converged: bool,
    /// Reason the run stopped early, if the filter diverged.
    pub diverged: Option<String>,
    #[serde(skip)]
    pub final_passes: Option<FinalPasses>,
}

impl TuningResult {
    pub fn final_costs(&self) -> Option<&CostReport> {
        self.history.last().map(|h| &h.costs)
    }

    pub fn is_diverged(&self) -> bool {
        self.diverged.is_some()
    }
}

fn max_rel_change(prev: &[f64], next: &[f64]) -> f64 {
    prev.iter()
        .zip(next)
        .map(|(a, b)| {
            let scale = a.abs().max(b.abs());
            if scale == 0.0 {
                0.0
            } else {
                (a - b).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}

fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::Diverged { .. } | Error::PropagationDiverged { .. } | Error::SingularInnovation { .. }
    )
}

/// Tune the filter statistics on one dataset.
///
/// Numerical breakdown of the filter is not an error: the result comes back
/// with `diverged` set and the history up to the failing iteration.
pub fn run_rrr(
    model: &dyn Model,
    dataset: &Dataset,
    config: &TuningConfig,
    start: &StartPoint,
) -> Result<TuningResult> {
    run_rrr_observed(model, dataset, config, start, &mut |_, _| {})
}

/// [`run_rrr`] that hands the products of every completed pass to `observer`.
pub fn run_rrr_observed(
    model: &dyn Model,
    dataset: &Dataset,
    config: &TuningConfig,
    start: &StartPoint,
    observer: &mut dyn FnMut(usize, &FinalPasses),
) -> Result<TuningResult> {
    config.validate()?;
    dataset.validate_for(model)?;
    let ns = model.n_states();
    let np = model.n_params();
    let dim = ns + np;
    if start.x0.len() != ns || start.theta.len() != np {
        return Err(Error::Dimension {
            context: "tuning start point",
            expected: dim,
            actual: start.x0.len() + start.theta.len(),
        });
    }
    let est = &config.estimator;
    let guesses = &config.initial_guesses;
    let z = &dataset.z;
    let n = z.len();

    let mut x0 = DVector::from_iterator(dim, start.x0.iter().chain(&start.theta).copied());
    let prior_mean = config.j0_prior.then(|| x0.clone());
    let mut p0 = diag_matrix(&vec![guesses.p0_diag; dim]);
    let q_init = if est.q == QMethod::FixedFloor { est.q_floor } else { guesses.q_diag };
    let mut q = augment(&diag_matrix(&vec![q_init; ns]), dim);
    let mut r = diag_matrix(&vec![guesses.r_diag; model.n_meas()]);

    let mut history: Vec<IterationRecord> = Vec::new();
    let mut final_passes = None;
    let mut theta_hat = start.theta.clone();
    let mut p_theta = bottom_right(&p0, ns);
    let mut converged = false;
    let mut diverged = None;
    let mut prev_signature: Option<Vec<f64>> = None;

    for iteration in 1..=config.max_iters {
        let step = (|| -> Result<_> {
            let pass = ekf_forward(model, &x0, &p0, &q, &r, z)?;
            let smoother = rts_smooth(model, &pass, z)?;
            let theta_nn = pass.final_state().rows(ns, np).into_owned();
            let dynamical = dynamical_pass(model, &smoother, &theta_nn)?;
            let costs = compute_costs(model, z, &pass, &smoother, &dynamical, prior_mean.as_ref())?;
            let products = PassProducts {
                model,
                measurements: z,
                filter: &pass,
                smoother: Some(&smoother),
                dynamical: Some(&dynamical),
            };
            let r_new = estimate_r(est.r, &products, est.r_mask)?;
            let q_new = estimate_q(est.q, &products, None, est.q_mask, est.q_floor)?;
            let p0_new = match est.p0 {
                P0Method::ScaleUp => p0_scale_up(pass.final_covariance(), n, est.p0_mask, ns),
                P0Method::Iim => p0_iim(&pass, &r, est.p0_mask, ns)?,
                P0Method::Smoothed => p0_smoothed(&smoother, est.p0_mask, ns),
            };
            Ok((pass, smoother, dynamical, costs, r_new, q_new, p0_new))
        })();
        let (pass, smoother, dynamical, costs, r_new, q_new, p0_new) = match step {
            Ok(v) => v,
            Err(e) if is_divergence(&e) => {
                diverged = Some(format!("iteration {iteration}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };

        let x_nn = pass.final_state().clone();
        let theta_nn: Vec<f64> = x_nn.rows(ns, np).iter().copied().collect();
        let p_nn = pass.final_covariance();
        let q_phys = top_left(&q_new.matrix, ns);

        let mut signature = theta_nn.clone();
        signature.extend(diag_vec(&r_new.matrix));
        signature.extend(diag_vec(&q_phys));
        let change = prev_signature.as_ref().map(|p| max_rel_change(p, &signature));

        history.push(IterationRecord {
            iteration,
            theta0: x0.rows(ns, np).iter().copied().collect(),
            p0_diag: diag_vec(&p0),
            q_diag: diag_vec(&top_left(&q, ns)),
            r_diag: diag_vec(&r),
            theta_final: theta_nn.clone(),
            p_theta_diag: diag_vec(&bottom_right(p_nn, ns)),
            costs,
            max_rel_change: change,
            ridge_events: pass.ridge_events + smoother.ridge_events,
            clamp_events: r_new.clamped + q_new.clamped,
        });

        theta_hat = theta_nn.clone();
        p_theta = bottom_right(p_nn, ns);
        let mut x0_next = x_nn;
        match config.x0_policy {
            X0Policy::Given => x0_next.rows_mut(0, ns).copy_from_slice(&start.x0),
            X0Policy::Smoothed => x0_next.rows_mut(0, ns).copy_from(&smoother.x_smooth[0].rows(0, ns)),
        }
        x0 = x0_next;
        p0 = p0_new;
        q = q_new.matrix;
        r = r_new.matrix;
        final_passes = Some(FinalPasses {
            filter: pass,
            smoother,
            dynamical,
        });
        if let Some(passes) = &final_passes {
            observer(iteration, passes);
        }
        prev_signature = Some(signature);

        if !config.fixed_iterations && change.is_some_and(|c| c <= config.convergence_tol) {
            converged = true;
            break;
        }
    }

    Ok(TuningResult {
        theta_hat,
        p_theta,
        r_hat: r,
        q_hat: top_left(&q, ns),
        p0_hat: p0,
        x0_hat: x0.rows(0, ns).iter().copied().collect(),
        iterations_used: history.len(),
        history,
        converged,
        diverged,
        final_passes,
    })
}

/// Relative change in every tracked statistic between the last two iterations.
pub fn last_changes(result: &TuningResult) -> Option<f64> {
    result.history.last().and_then(|h| h.max_rel_change)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{RMethod, TrimMask};
    use crate::model::{AugmentedState, SmdParams, SpringMassDamper};
    use crate::sim::{perturb_parameters, simulate, NoiseSpec};

    fn smd(r: &[f64], q: &[f64], seed: u64) -> (SpringMassDamper, Dataset) {
        let model = SpringMassDamper::default();
        let x0 = AugmentedState::new(vec![1.0, 0.0], SmdParams::TRUE.to_vec());
        let ds = simulate(&model, &x0, &NoiseSpec::diagonal(r, q), 100, seed).unwrap();
        (model, ds)
    }

    fn start(theta: Vec<f64>) -> StartPoint {
        StartPoint {
            x0: vec![1.0, 0.0],
            theta,
        }
    }

    #[test]
    fn noise_free_data_is_a_fixed_point_for_theta() {
        let (model, ds) = smd(&[0.0, 0.0], &[0.0, 0.0], 1);
        let cfg = TuningConfig {
            max_iters: 2,
            fixed_iterations: true,
            ..TuningConfig::q_zero()
        };
        let res = run_rrr(&model, &ds, &cfg, &start(SmdParams::TRUE.to_vec())).unwrap();
        assert_eq!(res.iterations_used, 2);
        for h in &res.history {
            for (a, b) in h.theta_final.iter().zip(SmdParams::TRUE.to_vec()) {
                assert!((a - b).abs() <= 1e-10 * b, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn history_matches_iterations_and_convergence_flag() {
        let (model, ds) = smd(&[0.001, 0.004], &[0.0, 0.0], 2);
        let cfg = TuningConfig::q_zero();
        let theta = perturb_parameters(&SmdParams::TRUE.to_vec(), 0.2, 11);
        let res = run_rrr(&model, &ds, &cfg, &start(theta)).unwrap();
        assert_eq!(res.history.len(), res.iterations_used);
        assert!(res.iterations_used <= 20);
        if res.converged {
            assert!(last_changes(&res).unwrap() <= cfg.convergence_tol);
        }
        assert!(res.diverged.is_none());
        assert_eq!(res.p_theta.nrows(), 3);
        assert_eq!(res.q_hat[(0, 0)], 1e-10);
    }

    #[test]
    fn theta_settles_within_a_few_iterations() {
        let model = SpringMassDamper::default();
        let cfg = TuningConfig {
            fixed_iterations: true,
            ..TuningConfig::q_zero()
        };
        for seed in 0..8 {
            let (_, ds) = smd(&[0.001, 0.004], &[0.0, 0.0], seed);
            let theta = perturb_parameters(&SmdParams::TRUE.to_vec(), 0.2, seed + 1000);
            let res = run_rrr(&model, &ds, &cfg, &start(theta)).unwrap();
            let last = &res.history.last().unwrap().theta_final;
            let rel = |it: usize, j: usize| ((res.history[it - 1].theta_final[j] - last[j]) / last[j]).abs();
            assert!(rel(3, 0) < 1e-3, "seed {seed}: theta1 at iteration 3 off by {}", rel(3, 0));
            for j in 0..3 {
                assert!(rel(5, j) < 1e-3, "seed {seed}: theta{} at iteration 5 off by {}", j + 1, rel(5, j));
            }
        }
    }

    #[test]
    fn fixed_iteration_mode_runs_every_iteration() {
        let (model, ds) = smd(&[0.001, 0.004], &[0.0, 0.0], 5);
        let cfg = TuningConfig {
            max_iters: 7,
            fixed_iterations: true,
            ..TuningConfig::q_zero()
        };
        let res = run_rrr(&model, &ds, &cfg, &start(SmdParams::TRUE.to_vec())).unwrap();
        assert_eq!(res.iterations_used, 7);
        assert!(!res.converged);
    }

    #[test]
    fn observer_sees_every_pass() {
        let (model, ds) = smd(&[0.001, 0.004], &[0.0, 0.0], 6);
        let cfg = TuningConfig {
            max_iters: 4,
            fixed_iterations: true,
            ..TuningConfig::q_zero()
        };
        let mut seen = Vec::new();
        let res = run_rrr_observed(&model, &ds, &cfg, &start(SmdParams::TRUE.to_vec()), &mut |i, p| {
            seen.push((i, p.filter.final_state()[2]));
        })
        .unwrap();
        assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), [1, 2, 3, 4]);
        for (rec, (_, theta1)) in res.history.iter().zip(&seen) {
            assert_eq!(rec.theta_final[0], *theta1);
        }
    }

    #[test]
    fn divergence_is_reported_with_partial_history() {
        let (model, ds) = smd(&[0.001, 0.004], &[0.0, 0.0], 6);
        let cfg = TuningConfig::q_zero();
        // A wildly unstable parameter guess blows the trajectory up.
        let res = run_rrr(&model, &ds, &cfg, &start(vec![-400.0, -40.0, 60.0])).unwrap();
        assert!(res.is_diverged(), "{:?}", res.history.len());
        assert!(!res.converged);
        assert_eq!(res.history.len(), res.iterations_used);
    }

    #[test]
    fn rejects_bad_configuration() {
        let (model, ds) = smd(&[0.001, 0.004], &[0.0, 0.0], 7);
        let mut cfg = TuningConfig::q_zero();
        cfg.max_iters = 0;
        assert!(run_rrr(&model, &ds, &cfg, &start(SmdParams::TRUE.to_vec())).is_err());
        let mut cfg = TuningConfig::q_positive();
        cfg.estimator.r = RMethod::DynResidue;
        assert!(run_rrr(&model, &ds, &cfg, &start(SmdParams::TRUE.to_vec())).is_err());
        let cfg = TuningConfig::q_zero();
        assert!(run_rrr(&model, &ds, &cfg, &start(vec![1.0])).is_err());
    }

    #[test]
    fn smoothed_initial_state_policy_updates_x0() {
        let (model, ds) = smd(&[0.001, 0.004], &[0.0, 0.0], 8);
        let cfg = TuningConfig {
            x0_policy: X0Policy::Smoothed,
            estimator: EstimatorChoice::reference_q_zero().with_p0(P0Method::ScaleUp, TrimMask::DiagOnly),
            max_iters: 5,
            ..TuningConfig::q_zero()
        };
        let st = StartPoint {
            x0: vec![0.9, 0.1],
            theta: SmdParams::TRUE.to_vec(),
        };
        let res = run_rrr(&model, &ds, &cfg, &st).unwrap();
        assert!((res.x0_hat[0] - 1.0).abs() < 0.05, "{:?}", res.x0_hat);
        assert!(res.x0_hat[1].abs() < 0.1, "{:?}", res.x0_hat);
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = TuningConfig::q_positive();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: TuningConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<TuningConfig>(&text.replace("\"n_sims\"", "\"n_simz\"")).is_err());
    }
}
