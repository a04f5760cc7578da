//! Output-error maximum-likelihood reference estimator for data without process noise.
//!
//! With zero Kalman gain the predicted measurement is the noise-free model
//! output, so the likelihood reduces to an `R̂⁻¹`-weighted least-squares fit of
//! the trajectory. Parameters are updated by Gauss-Newton with trajectory
//! sensitivities from central differences; `R̂` is re-estimated from the
//! residuals at every outer iteration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{diag_matrix, serde_rows};
use crate::model::{fd_step, measure, propagate, Model};
use crate::sim::Dataset;

/// Lower bound on each diagonal entry of `R̂`, reached only by noise-free data.
pub const R_FLOOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NrOptions {
    pub estimate_x0: bool,
    pub max_iters: usize,
    /// Relative cost change below which the iteration stops.
    pub rel_tol: f64,
    pub max_halvings: usize,
    /// Relative perturbation used for the sensitivities.
    pub fd_step: f64,
}

impl Default for NrOptions {
    fn default() -> Self {
        Self {
            estimate_x0: false,
            max_iters: 50,
            rel_tol: 1e-10,
            max_halvings: 10,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrResult {
    pub theta_hat: Vec<f64>,
    pub x0_hat: Vec<f64>,
    /// Cramer-Rao standard deviations of `theta_hat`.
    pub crb: Vec<f64>,
    /// Cramer-Rao standard deviations of `x0_hat`; empty unless estimated.
    pub crb_x0: Vec<f64>,
    #[serde(with = "serde_rows")]
    pub r_hat: DMatrix<f64>,
    /// `(1/N) Σ [eᵀ R̂⁻¹ e + ln det R̂]` at the final estimate.
    pub cost_final: f64,
    /// Weighted least-squares cost before and after each accepted step.
    pub cost_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Free parameters of the fit: optionally `x0`, always `Θ`.
struct Layout {
    n_states: usize,
    estimate_x0: bool,
    x0: DVector<f64>,
}

impl Layout {
    fn initial_state(&self, beta: &DVector<f64>) -> DVector<f64> {
        let ns = self.n_states;
        let np = if self.estimate_x0 { beta.len() - ns } else { beta.len() };
        let mut x = DVector::zeros(ns + np);
        if self.estimate_x0 {
            x.rows_mut(0, ns).copy_from(&beta.rows(0, ns));
            x.rows_mut(ns, np).copy_from(&beta.rows(ns, np));
        } else {
            x.rows_mut(0, ns).copy_from(&self.x0);
            x.rows_mut(ns, np).copy_from(beta);
        }
        x
    }
}

/// Noise-free model output `h(Xd_k)` for `k = 1 … N`.
pub fn model_output(model: &dyn Model, x_init: &DVector<f64>, n: usize) -> Result<Vec<DVector<f64>>> {
    let dt = model.dt();
    let mut x = x_init.clone();
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        x = propagate(model, &x, k as f64 * dt, dt)?;
        out.push(measure(model, &x)?);
    }
    Ok(out)
}

fn residuals(z: &[DVector<f64>], y: &[DVector<f64>]) -> Vec<DVector<f64>> {
    z.iter().zip(y).map(|(z, y)| z - y).collect()
}

/// Diagonal of `(1/N) Σ e eᵀ`, floored at [`R_FLOOR`].
fn r_diag(e: &[DVector<f64>]) -> Vec<f64> {
    let m = e[0].len();
    (0..m)
        .map(|i| (e.iter().map(|v| v[i] * v[i]).sum::<f64>() / e.len() as f64).max(R_FLOOR))
        .collect()
}

fn weighted_sse(e: &[DVector<f64>], r: &[f64]) -> f64 {
    e.iter()
        .map(|v| v.iter().zip(r).map(|(x, ri)| x * x / ri).sum::<f64>())
        .sum()
}

/// Output sensitivities `∂h(Xd_k)/∂β`, one `m × q` block per time step.
fn sensitivities(model: &dyn Model, layout: &Layout, beta: &DVector<f64>, n: usize, rel: f64) -> Result<Vec<DMatrix<f64>>> {
    let m = model.n_meas();
    let mut s = vec![DMatrix::zeros(m, beta.len()); n];
    let mut probe = beta.clone();
    for j in 0..beta.len() {
        let h = fd_step(beta[j], rel);
        let (hi, lo) = (beta[j] + h, beta[j] - h);
        probe[j] = hi;
        let plus = model_output(model, &layout.initial_state(&probe), n)?;
        probe[j] = lo;
        let minus = model_output(model, &layout.initial_state(&probe), n)?;
        probe[j] = beta[j];
        let width = hi - lo;
        for k in 0..n {
            s[k].set_column(j, &((&plus[k] - &minus[k]) / width));
        }
    }
    Ok(s)
}

/// Information matrix `Σ Sᵀ W S` and gradient term `Σ Sᵀ W e` for diagonal `W = R̂⁻¹`.
fn normal_equations(s: &[DMatrix<f64>], e: &[DVector<f64>], r: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let q = s[0].ncols();
    let w = diag_matrix(&r.iter().map(|v| 1.0 / v).collect::<Vec<_>>());
    let mut info = DMatrix::zeros(q, q);
    let mut grad = DVector::zeros(q);
    for (sk, ek) in s.iter().zip(e) {
        let stw = sk.transpose() * &w;
        info += &stw * sk;
        grad += stw * ek;
    }
    (info, grad)
}

/// Weighted least-squares cost `½ Σ eᵀ W e` and its gradient with respect to `Θ`
/// (and `x0` when `estimate_x0`), for a fixed diagonal `R̂`.
pub fn weighted_cost_gradient(
    model: &dyn Model,
    dataset: &Dataset,
    theta: &[f64],
    x0: &[f64],
    estimate_x0: bool,
    r_diag: &[f64],
) -> Result<(f64, DVector<f64>)> {
    let layout = Layout {
        n_states: model.n_states(),
        estimate_x0,
        x0: DVector::from_column_slice(x0),
    };
    let beta = pack(&layout, theta, x0);
    let y = model_output(model, &layout.initial_state(&beta), dataset.len())?;
    let e = residuals(&dataset.z, &y);
    let s = sensitivities(model, &layout, &beta, dataset.len(), NrOptions::default().fd_step)?;
    let (_, grad) = normal_equations(&s, &e, r_diag);
    Ok((0.5 * weighted_sse(&e, r_diag), -grad))
}

fn pack(layout: &Layout, theta: &[f64], x0: &[f64]) -> DVector<f64> {
    if layout.estimate_x0 {
        DVector::from_iterator(x0.len() + theta.len(), x0.iter().chain(theta).copied())
    } else {
        DVector::from_column_slice(theta)
    }
}

fn unidentifiable(info: &DMatrix<f64>, names: &[String]) -> Error {
    let eig = info.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let dirs: Vec<String> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, l)| **l <= 1e-12 * scale)
        .map(|(i, _)| {
            let v = eig.eigenvectors.column(i);
            let terms: Vec<String> = v
                .iter()
                .zip(names)
                .filter(|(c, _)| c.abs() > 1e-3)
                .map(|(c, name)| format!("{c:+.3}·{name}"))
                .collect();
            terms.join(" ")
        })
        .collect();
    Error::SingularInformation(format!(
        "output sensitivities do not determine the direction(s) [{}]",
        dirs.join("], [")
    ))
}

/// Output-error estimate of `Θ` (and optionally `x0`) with Cramer-Rao bounds.
pub fn nr_estimate(
    model: &dyn Model,
    dataset: &Dataset,
    theta_init: &[f64],
    options: &NrOptions,
) -> Result<NrResult> {
    dataset.validate_for(model)?;
    let n = dataset.len();
    let ns = model.n_states();
    if theta_init.len() != model.n_params() {
        return Err(Error::Dimension {
            context: "initial parameters",
            expected: model.n_params(),
            actual: theta_init.len(),
        });
    }
    let layout = Layout {
        n_states: ns,
        estimate_x0: options.estimate_x0,
        x0: DVector::from_column_slice(&dataset.x0_true),
    };
    let mut names: Vec<String> = Vec::new();
    if options.estimate_x0 {
        names.extend((1..=ns).map(|i| format!("x0_{i}")));
    }
    names.extend((1..=model.n_params()).map(|i| format!("theta{i}")));

    let mut beta = pack(&layout, theta_init, &dataset.x0_true);
    let mut e = residuals(&dataset.z, &model_output(model, &layout.initial_state(&beta), n)?);
    let z_scale = dataset.z.iter().map(|z| z.norm_squared()).sum::<f64>();
    let mut cost_history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iters {
        iterations += 1;
        let r = r_diag(&e);
        let cost = weighted_sse(&e, &r);
        let s = sensitivities(model, &layout, &beta, n, options.fd_step)?;
        let (info, grad) = normal_equations(&s, &e, &r);
        let chol = info.clone().cholesky().ok_or_else(|| unidentifiable(&info, &names))?;
        let step = chol.solve(&grad);

        let raw_sse: f64 = e.iter().map(|v| v.norm_squared()).sum();
        let negligible_step = step
            .iter()
            .zip(beta.iter())
            .all(|(d, b)| d.abs() <= 1e-12 * b.abs().max(1e-300));
        if negligible_step || raw_sse <= 1e-28 * z_scale {
            cost_history.push(cost);
            converged = true;
            break;
        }

        let mut accepted = None;
        let mut scale = 1.0;
        for _ in 0..=options.max_halvings {
            let trial = &beta + &step * scale;
            if let Ok(y_trial) = model_output(model, &layout.initial_state(&trial), n) {
                let e_trial = residuals(&dataset.z, &y_trial);
                let c_trial = weighted_sse(&e_trial, &r);
                if c_trial.is_finite() && c_trial <= cost {
                    accepted = Some((trial, e_trial, c_trial));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((trial, e_trial, c_trial)) = accepted else {
            let small = step
                .iter()
                .zip(beta.iter())
                .all(|(d, b)| d.abs() <= 1e-9 * b.abs().max(1e-300));
            if small {
                cost_history.push(cost);
                converged = true;
                break;
            }
            return Err(Error::LineSearch {
                halvings: options.max_halvings,
            });
        };
        cost_history.push(cost);
        let rel_change = (cost - c_trial) / cost.max(f64::MIN_POSITIVE);
        beta = trial;
        e = e_trial;
        if rel_change < options.rel_tol {
            converged = true;
            break;
        }
    }
    let r = r_diag(&e);
    let s = sensitivities(model, &layout, &beta, n, options.fd_step)?;
    let (info, _) = normal_equations(&s, &e, &r);
    let cov = info
        .clone()
        .cholesky()
        .ok_or_else(|| unidentifiable(&info, &names))?
        .inverse();
    let sd: Vec<f64> = cov.diagonal().iter().map(|v| v.sqrt()).collect();
    let off = if options.estimate_x0 { ns } else { 0 };
    let log_det: f64 = r.iter().map(|v| v.ln()).sum();
    let cost_final = weighted_sse(&e, &r) / n as f64 + log_det;
    let state = layout.initial_state(&beta);

    Ok(NrResult {
        theta_hat: state.rows(ns, model.n_params()).iter().copied().collect(),
        x0_hat: state.rows(0, ns).iter().copied().collect(),
        crb: sd[off..].to_vec(),
        crb_x0: sd[..off].to_vec(),
        r_hat: diag_matrix(&r),
        cost_final,
        cost_history,
        iterations,
        converged,
    })
}
