//! Extended Kalman filter pass, RTS smoother, lag-one smoothed covariances
//! and the noise-free dynamical trajectory.
//!
//! Index conventions: the dataset holds measurements `Z_1 … Z_N`. Filter
//! steps are stored in `steps[k − 1]` for `k = 1 … N`. Smoothed quantities
//! cover `k = 0 … N` and are stored at index `k`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{is_finite, spd_solve, symmetrized};
use crate::model::{measure, measurement_jacobian, propagate, state_jacobian, Model};

/// Growth of `trace(P_post)` over `trace(P0)` treated as divergence.
pub const DIVERGENCE_GROWTH: f64 = 1e12;

/// Quantities produced at one measurement time by the forward pass.
#[derive(Debug, Clone)]
pub struct FilterStep {
    /// `F_{k−1}`, Jacobian of the one-step map at `X_{k−1|k−1}`.
    pub f_prev: DMatrix<f64>,
    /// `H_k`, measurement Jacobian at `X_{k|k−1}`.
    pub h: DMatrix<f64>,
    /// `H_{k|k}`, measurement Jacobian at `X_{k|k}`.
    pub h_post: DMatrix<f64>,
    pub x_prior: DVector<f64>,
    pub p_prior: DMatrix<f64>,
    pub x_post: DVector<f64>,
    pub p_post: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    /// `Z_k − h(X_{k|k−1})`.
    pub innovation: DVector<f64>,
    /// `Z_k − h(X_{k|k})`.
    pub residue: DVector<f64>,
    /// `H_k P_{k|k−1} H_kᵀ + R`.
    pub s1: DMatrix<f64>,
}

/// One forward sweep of the EKF over a dataset.
#[derive(Debug, Clone)]
pub struct FilterPass {
    pub x0: DVector<f64>,
    pub p0: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub dt: f64,
    pub steps: Vec<FilterStep>,
    /// Times an innovation covariance needed a ridge before factorizing.
    pub ridge_events: usize,
}

impl FilterPass {
    /// Number of measurements `N`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `X_{k|k}` for `k = 0 … N`, with `X_{0|0} = X0`.
    pub fn x_post(&self, k: usize) -> &DVector<f64> {
        if k == 0 {
            &self.x0
        } else {
            &self.steps[k - 1].x_post
        }
    }

    /// `P_{k|k}` for `k = 0 … N`, with `P_{0|0} = P0`.
    pub fn p_post(&self, k: usize) -> &DMatrix<f64> {
        if k == 0 {
            &self.p0
        } else {
            &self.steps[k - 1].p_post
        }
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.x_post(self.len())
    }

    /// `P_{N|N}`.
    pub fn final_covariance(&self) -> &DMatrix<f64> {
        self.p_post(self.len())
    }

    /// Kalman gain of the last update, `K_N`.
    pub fn final_gain(&self) -> &DMatrix<f64> {
        &self.steps[self.len() - 1].gain
    }
}

/// Run the EKF forward over `measurements` (`Z_1 … Z_N`, spaced by the model's dt).
///
/// `q_aug` is the augmented `(n+p) × (n+p)` process-noise covariance. The
/// covariance update uses the Joseph form and every stored covariance is
/// symmetrized.
pub fn ekf_forward(
    model: &dyn Model,
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
    q_aug: &DMatrix<f64>,
    r: &DMatrix<f64>,
    measurements: &[DVector<f64>],
) -> Result<FilterPass> {
    let dim = model.n_aug();
    let m = model.n_meas();
    for (ctx, mat, d) in [("P0", p0, dim), ("Q", q_aug, dim), ("R", r, m)] {
        if mat.nrows() != d || mat.ncols() != d {
            return Err(Error::Dimension {
                context: ctx,
                expected: d,
                actual: mat.nrows(),
            });
        }
    }
    if x0.len() != dim {
        return Err(Error::Dimension {
            context: "X0",
            expected: dim,
            actual: x0.len(),
        });
    }
    let dt = model.dt();
    let identity = DMatrix::<f64>::identity(dim, dim);
    let p0 = symmetrized(p0.clone());
    let trace0 = p0.trace();
    let mut pass = FilterPass {
        x0: x0.clone(),
        p0: p0.clone(),
        q: q_aug.clone(),
        r: r.clone(),
        dt,
        steps: Vec::with_capacity(measurements.len()),
        ridge_events: 0,
    };

    let mut x = x0.clone();
    let mut p = p0;
    for (idx, z) in measurements.iter().enumerate() {
        let k = idx + 1;
        if z.len() != m {
            return Err(Error::Dimension {
                context: "measurement",
                expected: m,
                actual: z.len(),
            });
        }
        let t_prev = idx as f64 * dt;
        let diverged = |_| Error::Diverged {
            k,
            reason: "state propagation produced non-finite values".into(),
        };
        let f_prev = state_jacobian(model, &x, t_prev, dt).map_err(diverged)?;
        let x_prior = propagate(model, &x, t_prev, dt).map_err(diverged)?;
        let p_prior = symmetrized(&f_prev * &p * f_prev.transpose() + q_aug);

        let h = measurement_jacobian(model, &x_prior)?;
        let innovation = z - measure(model, &x_prior)?;
        let s1 = symmetrized(&h * &p_prior * h.transpose() + r);
        let solved = spd_solve(&s1, &(&h * &p_prior)).ok_or(Error::SingularInnovation { k })?;
        if solved.ridged {
            pass.ridge_events += 1;
        }
        let gain = solved.solution.transpose();

        let x_post = &x_prior + &gain * &innovation;
        let ikh = &identity - &gain * &h;
        let p_post = symmetrized(&ikh * &p_prior * ikh.transpose() + &gain * r * gain.transpose());

        if x_post.iter().any(|v| !v.is_finite()) || !is_finite(&p_post) {
            return Err(Error::Diverged {
                k,
                reason: "non-finite posterior".into(),
            });
        }
        if trace0 > 0.0 && p_post.trace() > DIVERGENCE_GROWTH * trace0 {
            return Err(Error::Diverged {
                k,
                reason: format!("trace(P) grew beyond {DIVERGENCE_GROWTH:e} × trace(P0)"),
            });
        }

        let h_post = measurement_jacobian(model, &x_post)?;
        let residue = z - measure(model, &x_post)?;
        pass.steps.push(FilterStep {
            f_prev,
            h,
            h_post,
            x_prior,
            p_prior,
            x_post: x_post.clone(),
            p_post: p_post.clone(),
            gain,
            innovation,
            residue,
            s1,
        });
        x = x_post;
        p = p_post;
    }
    Ok(pass)
}

/// Backward RTS sweep over a forward pass.
#[derive(Debug, Clone)]
pub struct SmootherPass {
    /// `X_{k|N}`, `k = 0 … N`.
    pub x_smooth: Vec<DVector<f64>>,
    /// `P_{k|N}`, `k = 0 … N`.
    pub p_smooth: Vec<DMatrix<f64>>,
    /// `K_{k|N}`, `k = 0 … N−1`.
    pub gain_smooth: Vec<DMatrix<f64>>,
    /// `P_{k,k−1|N}` at index `k = 1 … N`; index 0 is zero.
    pub lag_one: Vec<DMatrix<f64>>,
    /// `H_{k|N}` for `k = 1 … N`, stored at `k − 1`.
    pub h_smooth: Vec<DMatrix<f64>>,
    /// `Z_k − h(X_{k|N})` for `k = 1 … N`, stored at `k − 1`.
    pub smoothed_residue: Vec<DVector<f64>>,
    /// Times `P_{k+1|k}` needed a ridge before the solve.
    pub ridge_events: usize,
}

/// Rauch-Tung-Striebel smoother, including the smoothed initial state `X_{0|N}`.
pub fn rts_smooth(model: &dyn Model, pass: &FilterPass, measurements: &[DVector<f64>]) -> Result<SmootherPass> {
    let n = pass.len();
    if n == 0 {
        return Err(Error::Config("cannot smooth an empty pass".into()));
    }
    let mut x_smooth = vec![DVector::zeros(0); n + 1];
    let mut p_smooth = vec![DMatrix::zeros(0, 0); n + 1];
    let mut gain_smooth = vec![DMatrix::zeros(0, 0); n];
    let mut ridge_events = 0;

    x_smooth[n] = pass.x_post(n).clone();
    p_smooth[n] = pass.p_post(n).clone();
    for k in (0..n).rev() {
        let next = &pass.steps[k];
        let p_kk = pass.p_post(k);
        // K_{k|N} = P_{k|k} F_kᵀ P_{k+1|k}⁻¹, solved as P_{k+1|k} K_{k|N}ᵀ = F_k P_{k|k}
        let rhs = &next.f_prev * p_kk;
        let solved = spd_solve(&next.p_prior, &rhs).ok_or_else(|| Error::Diverged {
            k,
            reason: "predicted covariance is singular in the smoother".into(),
        })?;
        if solved.ridged {
            ridge_events += 1;
        }
        let g = solved.solution.transpose();
        x_smooth[k] = pass.x_post(k) + &g * (&x_smooth[k + 1] - &next.x_prior);
        p_smooth[k] = symmetrized(p_kk + &g * (&p_smooth[k + 1] - &next.p_prior) * g.transpose());
        gain_smooth[k] = g;
    }

    let mut h_smooth = Vec::with_capacity(n);
    let mut smoothed_residue = Vec::with_capacity(n);
    for k in 1..=n {
        h_smooth.push(measurement_jacobian(model, &x_smooth[k])?);
        smoothed_residue.push(&measurements[k - 1] - measure(model, &x_smooth[k])?);
    }

    let mut sm = SmootherPass {
        x_smooth,
        p_smooth,
        gain_smooth,
        lag_one: Vec::new(),
        h_smooth,
        smoothed_residue,
        ridge_events,
    };
    sm.lag_one = lag_one_covariances(pass, &sm);
    Ok(sm)
}

/// Lag-one smoothed covariances `P_{k,k−1|N}` at index `k = 1 … N` (index 0 is zero).
///
/// `P_{N,N−1|N} = (I − K_N H_N) F_{N−1} P_{N−1|N−1}`, then backwards
/// `P_{k,k−1|N} = P_{k|k} K_{k−1|N}ᵀ + K_{k|N} (P_{k+1,k|N} − F_k P_{k|k}) K_{k−1|N}ᵀ`.
pub fn lag_one_covariances(pass: &FilterPass, smoother: &SmootherPass) -> Vec<DMatrix<f64>> {
    let n = pass.len();
    let dim = pass.x0.len();
    let mut lag = vec![DMatrix::zeros(dim, dim); n + 1];
    let last = &pass.steps[n - 1];
    let ikh = DMatrix::<f64>::identity(dim, dim) - &last.gain * &last.h;
    lag[n] = ikh * &last.f_prev * pass.p_post(n - 1);
    for k in (1..n).rev() {
        let f_k = &pass.steps[k].f_prev;
        let p_kk = pass.p_post(k);
        let g_prev_t = smoother.gain_smooth[k - 1].transpose();
        lag[k] = p_kk * &g_prev_t + &smoother.gain_smooth[k] * (&lag[k + 1] - f_k * p_kk) * &g_prev_t;
    }
    lag
}

/// Noise-free trajectory from the smoothed initial state with the estimated parameters.
#[derive(Debug, Clone)]
pub struct DynamicalPass {
    /// `Xd_{k|N}`, `k = 0 … N`.
    pub xd: Vec<DVector<f64>>,
    /// `Pd_{k|N}`, `k = 0 … N`.
    pub pd: Vec<DMatrix<f64>>,
    /// `Pd_{k,k−1|N}` at index `k = 1 … N`; index 0 is zero.
    pub pd_lag_one: Vec<DMatrix<f64>>,
    /// `Fd_{k−1|N}` for `k = 1 … N`, stored at `k − 1`.
    pub fd: Vec<DMatrix<f64>>,
}

/// Propagate `Xd_0 = [x_{0|N}, Θ̂]` through the noise-free dynamics.
pub fn dynamical_pass(
    model: &dyn Model,
    smoother: &SmootherPass,
    theta_hat: &DVector<f64>,
) -> Result<DynamicalPass> {
    let n_states = model.n_states();
    let n = smoother.x_smooth.len() - 1;
    let dt = model.dt();
    if theta_hat.len() != model.n_params() {
        return Err(Error::Dimension {
            context: "dynamical pass parameters",
            expected: model.n_params(),
            actual: theta_hat.len(),
        });
    }
    let mut x = smoother.x_smooth[0].clone();
    x.rows_mut(n_states, model.n_params()).copy_from(theta_hat);
    let dim = x.len();
    let mut out = DynamicalPass {
        xd: Vec::with_capacity(n + 1),
        pd: Vec::with_capacity(n + 1),
        pd_lag_one: Vec::with_capacity(n + 1),
        fd: Vec::with_capacity(n),
    };
    out.xd.push(x);
    out.pd.push(smoother.p_smooth[0].clone());
    out.pd_lag_one.push(DMatrix::zeros(dim, dim));
    for k in 1..=n {
        let prev = &out.xd[k - 1];
        let t_prev = (k - 1) as f64 * dt;
        let diverged = |_| Error::Diverged {
            k,
            reason: "dynamical trajectory diverged".into(),
        };
        let fd = state_jacobian(model, prev, t_prev, dt).map_err(diverged)?;
        let next = propagate(model, prev, t_prev, dt).map_err(diverged)?;
        let pd_prev = &out.pd[k - 1];
        let lag = &fd * pd_prev;
        let pd = symmetrized(&lag * fd.transpose());
        out.xd.push(next);
        out.pd.push(pd);
        out.pd_lag_one.push(lag);
        out.fd.push(fd);
    }
    Ok(out)
}

/// Per-step trace of a pass as CSV: `k, X_prior…, X_post…, X_smooth…,
/// diag(P_prior)…, diag(P_post)…, diag(P_smooth)…, innovation…, residue…`.
pub fn trace_csv(pass: &FilterPass, smoother: &SmootherPass) -> String {
    let dim = pass.x0.len();
    let m = pass.r.nrows();
    let mut out = String::from("k");
    for prefix in ["x_prior", "x_post", "x_smooth", "p_prior", "p_post", "p_smooth"] {
        for i in 0..dim {
            let _ = write!(out, ",{prefix}_{i}");
        }
    }
    for prefix in ["innovation", "residue"] {
        for j in 0..m {
            let _ = write!(out, ",{prefix}_{j}");
        }
    }
    out.push('\n');
    for (idx, s) in pass.steps.iter().enumerate() {
        let k = idx + 1;
        let _ = write!(out, "{k}");
        let vecs: [&DVector<f64>; 3] = [&s.x_prior, &s.x_post, &smoother.x_smooth[k]];
        for v in vecs {
            for x in v.iter() {
                let _ = write!(out, ",{x:e}");
            }
        }
        let mats: [&DMatrix<f64>; 3] = [&s.p_prior, &s.p_post, &smoother.p_smooth[k]];
        for p in mats {
            for x in p.diagonal().iter() {
                let _ = write!(out, ",{x:e}");
            }
        }
        for x in s.innovation.iter().chain(s.residue.iter()) {
            let _ = write!(out, ",{x:e}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{diag_matrix, min_eigenvalue};
    use crate::model::{AugmentedState, LinearModel, SpringMassDamper};
    use crate::sim::{simulate, simulate_stream, stream_rng, NoiseSpec};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn smd_run(seed: u64) -> (SpringMassDamper, crate::sim::Dataset, FilterPass) {
        let m = SpringMassDamper::default();
        let x0 = AugmentedState::new(vec![1.0, 0.0], vec![4.0, 0.4, 0.6]);
        let ds = simulate(&m, &x0, &NoiseSpec::diagonal(&[0.001, 0.004], &[0.001, 0.002]), 100, seed).unwrap();
        let start = AugmentedState::new(vec![1.0, 0.0], vec![4.4, 0.35, 0.7]).to_vector();
        let q = diag_matrix(&[0.001, 0.002, 0.0, 0.0, 0.0]);
        let pass = ekf_forward(&m, &start, &diag_matrix(&[0.1; 5]), &q, &diag_matrix(&[0.001, 0.004]), &ds.z).unwrap();
        (m, ds, pass)
    }

    #[test]
    fn zero_trust_filter_ignores_measurements() {
        let (m, ds, _) = smd_run(1);
        let start = AugmentedState::new(vec![1.0, 0.0], vec![4.0, 0.4, 0.6]).to_vector();
        let zero = DMatrix::zeros(5, 5);
        let pass = ekf_forward(&m, &start, &zero, &zero, &diag_matrix(&[0.001, 0.004]), &ds.z).unwrap();
        let mut x = start;
        for (idx, s) in pass.steps.iter().enumerate() {
            x = propagate(&m, &x, idx as f64 * 0.1, 0.1).unwrap();
            assert!(s.gain.iter().all(|g| *g == 0.0));
            assert_eq!(s.x_post, x);
        }
    }

    #[test]
    fn scalar_constant_posterior_variance() {
        let model = LinearModel::scalar_constant(1.0);
        let z: Vec<_> = (0..30).map(|k| DVector::from_element(1, (k as f64 * 0.37).sin())).collect();
        let pass = ekf_forward(&model, &DVector::zeros(1), &scalar(1.0), &scalar(0.0), &scalar(1.0), &z).unwrap();
        // P_k = 1 / (k + 1) by the information recursion 1/P_k = 1/P_{k-1} + 1
        for (idx, s) in pass.steps.iter().enumerate() {
            let k = idx + 1;
            assert!((s.p_post[(0, 0)] - 1.0 / (k as f64 + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn joseph_matches_textbook_update() {
        let (_, _, pass) = smd_run(2);
        for s in &pass.steps {
            let dim = s.p_prior.nrows();
            let textbook = (DMatrix::<f64>::identity(dim, dim) - &s.gain * &s.h) * &s.p_prior;
            assert!((&textbook - &s.p_post).amax() < 1e-10);
        }
    }

    #[test]
    fn covariances_symmetric_and_psd() {
        let (m, ds, pass) = smd_run(3);
        let sm = rts_smooth(&m, &pass, &ds.z).unwrap();
        let check = |p: &DMatrix<f64>| {
            assert!((p - p.transpose()).amax() <= 1e-12);
            assert!(min_eigenvalue(p) >= -1e-10);
        };
        for s in &pass.steps {
            check(&s.p_prior);
            check(&s.p_post);
            check(&s.s1);
            assert!(s.p_post.trace() <= s.p_prior.trace());
        }
        sm.p_smooth.iter().for_each(check);
    }

    #[test]
    fn smoother_boundary_identity() {
        let (m, ds, pass) = smd_run(4);
        let sm = rts_smooth(&m, &pass, &ds.z).unwrap();
        assert_eq!(&sm.x_smooth[100], pass.final_state());
        assert_eq!(&sm.p_smooth[100], pass.final_covariance());
        assert_eq!(sm.x_smooth.len(), 101);
    }

    /// Batch information-matrix covariances of a scalar random walk
    /// `x_k = x_{k−1} + w`, `z_k = x_k + v`, with prior `x_0 ~ N(0, p0)`.
    fn batch_smoothed_variances(n: usize, p0: f64, q: f64, r: f64) -> Vec<f64> {
        // unknowns x_0 … x_n
        let dim = n + 1;
        let mut info = DMatrix::<f64>::zeros(dim, dim);
        info[(0, 0)] += 1.0 / p0;
        for k in 1..=n {
            info[(k, k)] += 1.0 / q + 1.0 / r;
            info[(k - 1, k - 1)] += 1.0 / q;
            info[(k, k - 1)] -= 1.0 / q;
            info[(k - 1, k)] -= 1.0 / q;
        }
        let cov = info.try_inverse().unwrap();
        (0..dim).map(|k| cov[(k, k)]).collect()
    }

    #[test]
    fn smoothed_variances_match_batch_least_squares() {
        let (n, p0, q, r) = (25, 2.0, 0.3, 0.5);
        let model = LinearModel::scalar_constant(1.0);
        let z: Vec<_> = (0..n).map(|k| DVector::from_element(1, (k as f64).cos())).collect();
        let pass = ekf_forward(&model, &DVector::zeros(1), &scalar(p0), &scalar(q), &scalar(r), &z).unwrap();
        let sm = rts_smooth(&model, &pass, &z).unwrap();
        let batch = batch_smoothed_variances(n, p0, q, r);
        for k in 0..=n {
            assert!((sm.p_smooth[k][(0, 0)] - batch[k]).abs() < 1e-10, "k={k}");
            assert!(sm.p_smooth[k].trace() <= pass.p_post(k).trace() + 1e-15);
        }
    }

    #[test]
    fn degenerate_lag_one_is_zero() {
        let model = LinearModel::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), 0.1).unwrap();
        let z: Vec<_> = (0..10).map(|k| DVector::from_vec(vec![k as f64, 1.0])).collect();
        let zero = DMatrix::zeros(2, 2);
        let pass = ekf_forward(&model, &DVector::zeros(2), &zero, &zero, &DMatrix::identity(2, 2), &z).unwrap();
        let sm = rts_smooth(&model, &pass, &z).unwrap();
        assert!(sm.lag_one.iter().all(|l| l.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn lag_one_terminal_formula() {
        let (m, ds, pass) = smd_run(5);
        let sm = rts_smooth(&m, &pass, &ds.z).unwrap();
        let last = pass.steps.last().unwrap();
        let expected = (DMatrix::<f64>::identity(5, 5) - &last.gain * &last.h) * &last.f_prev * pass.p_post(99);
        assert_eq!(sm.lag_one[100], expected);
    }

    #[test]
    fn lag_one_matches_monte_carlo() {
        // x_k = a x_{k-1} + w, z_k = x_k + v, small horizon; covariances are data-independent
        let a = 0.9f64;
        let dt = 1.0;
        let (n, p0, q, r) = (6usize, 1.0f64, 0.2f64, 0.3f64);
        let model = LinearModel::new(DMatrix::from_element(1, 1, a.ln()), DMatrix::identity(1, 1), dt).unwrap();
        let a_disc = propagate(&model, &DVector::from_element(1, 1.0), 0.0, dt).unwrap()[0];
        let mut rng = stream_rng(99, 0);
        let draws = 20_000;
        let k_check = [2usize, 4, 6];
        let mut acc = vec![Vec::with_capacity(draws); k_check.len()];
        let mut reference = None;
        for _ in 0..draws {
            let mut x = p0.sqrt() * rng.sample::<f64, _>(StandardNormal);
            let mut xs = vec![x];
            let mut z = Vec::with_capacity(n);
            for _ in 0..n {
                x = a_disc * x + q.sqrt() * rng.sample::<f64, _>(StandardNormal);
                xs.push(x);
                z.push(DVector::from_element(1, x + r.sqrt() * rng.sample::<f64, _>(StandardNormal)));
            }
            let pass = ekf_forward(&model, &DVector::zeros(1), &scalar(p0), &scalar(q), &scalar(r), &z).unwrap();
            let sm = rts_smooth(&model, &pass, &z).unwrap();
            for (slot, &k) in k_check.iter().enumerate() {
                let e_k = xs[k] - sm.x_smooth[k][0];
                let e_prev = xs[k - 1] - sm.x_smooth[k - 1][0];
                acc[slot].push(e_k * e_prev);
            }
            reference.get_or_insert_with(|| sm.lag_one.clone());
        }
        let reference = reference.unwrap();
        for (slot, &k) in k_check.iter().enumerate() {
            let mean = acc[slot].iter().sum::<f64>() / draws as f64;
            let var = acc[slot].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
            let se = (var / draws as f64).sqrt();
            let predicted = reference[k][(0, 0)];
            assert!((mean - predicted).abs() < 3.0 * se, "k={k}: {mean} vs {predicted} (se {se})");
        }
    }

    #[test]
    fn dynamical_pass_initialization_and_decay() {
        let (m, ds, pass) = smd_run(6);
        let sm = rts_smooth(&m, &pass, &ds.z).unwrap();
        let theta = sm.x_smooth[0].rows(2, 3).into_owned();
        let dp = dynamical_pass(&m, &sm, &theta).unwrap();
        assert_eq!(dp.xd[0], sm.x_smooth[0]);
        assert_eq!(dp.pd[0], sm.p_smooth[0]);

        let heavy = DVector::from_vec(vec![4.0, 6.0, 0.6]);
        let mut long = sm.clone();
        long.x_smooth.resize(1001, DVector::zeros(5));
        let dp = dynamical_pass(&m, &long, &heavy).unwrap();
        let last = &dp.xd[1000];
        assert!(last[0].abs() < 1e-3 && last[1].abs() < 1e-3);
    }

    #[test]
    fn dynamical_covariance_closed_form() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.5, -0.2]);
        let model = LinearModel::new(a, DMatrix::identity(2, 2), 0.1).unwrap();
        let p0 = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]);
        let sm = SmootherPass {
            x_smooth: vec![DVector::zeros(2); 21],
            p_smooth: vec![p0.clone(); 21],
            gain_smooth: vec![],
            lag_one: vec![],
            h_smooth: vec![],
            smoothed_residue: vec![],
            ridge_events: 0,
        };
        let dp = dynamical_pass(&model, &sm, &DVector::zeros(0)).unwrap();
        let f = state_jacobian(&model, &DVector::zeros(2), 0.0, 0.1).unwrap();
        let mut fk = DMatrix::<f64>::identity(2, 2);
        for k in 0..=20 {
            let closed = &fk * &p0 * fk.transpose();
            assert!((&dp.pd[k] - &closed).amax() < 1e-12, "k={k}");
            fk = &f * fk;
        }
    }

    #[test]
    fn singular_innovation_names_index() {
        let model = LinearModel::scalar_constant(0.1);
        let z = vec![DVector::from_element(1, 1.0); 3];
        let err = ekf_forward(&model, &DVector::zeros(1), &scalar(0.0), &scalar(0.0), &scalar(-1.0), &z).unwrap_err();
        assert!(matches!(err, Error::SingularInnovation { k: 1 }));
    }

    #[test]
    fn innovation_band_fraction() {
        // filter run with the true statistics on several datasets
        let m = SpringMassDamper::default();
        let x0 = AugmentedState::new(vec![1.0, 0.0], vec![4.0, 0.4, 0.6]);
        let noise = NoiseSpec::diagonal(&[0.001, 0.004], &[0.001, 0.002]);
        let (mut outside, mut total) = (0usize, 0usize);
        for stream in 0..10 {
            let ds = simulate_stream(&m, &x0, &noise, 100, 21, stream).unwrap();
            let q = diag_matrix(&[0.001, 0.002, 0.0, 0.0, 0.0]);
            let p0 = diag_matrix(&[1e-6, 1e-6, 0.04, 0.004, 0.01]);
            let pass = ekf_forward(&m, &x0.to_vector(), &p0, &q, &noise.r, &ds.z).unwrap();
            for s in &pass.steps {
                for j in 0..2 {
                    total += 1;
                    if s.innovation[j].abs() > s.s1[(j, j)].sqrt() {
                        outside += 1;
                    }
                }
            }
        }
        let frac = outside as f64 / total as f64;
        assert!((frac - 0.32).abs() <= 0.10, "fraction outside ±σ: {frac}");
    }

    #[test]
    fn trace_csv_shape() {
        let (m, ds, pass) = smd_run(8);
        let sm = rts_smooth(&m, &pass, &ds.z).unwrap();
        let csv = trace_csv(&pass, &sm);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 101);
        assert_eq!(lines[0].split(',').count(), 1 + 6 * 5 + 2 * 2);
    }
}
