//! Nonlinear state-space models and their discrete-time propagation.
//!
//! A model supplies the continuous-time derivative of its physical states and
//! a measurement map over the augmented state `X = [x, Θ]`. Everything the
//! filter needs (one-step map, Jacobians) is derived here generically: the
//! one-step map integrates the derivative with fixed-step RK4 and the
//! Jacobians are central finite differences of the discrete maps.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// RK4 substeps per measurement interval unless a model overrides it.
pub const DEFAULT_RK4_SUBSTEPS: usize = 5;

/// A nonlinear system whose parameters are estimated as augmented states.
pub trait Model: Send + Sync {
    /// Identifier used in configuration files and dataset headers.
    fn id(&self) -> &str;
    fn n_states(&self) -> usize;
    fn n_params(&self) -> usize;
    fn n_meas(&self) -> usize;
    /// Measurement interval in seconds.
    fn dt(&self) -> f64;

    /// Continuous-time derivative of the physical states.
    fn state_derivative(
        &self,
        x: &DVector<f64>,
        theta: &DVector<f64>,
        u: &DVector<f64>,
        t: f64,
    ) -> DVector<f64>;

    /// Measurement of the augmented state.
    fn measurement(&self, state: &DVector<f64>) -> DVector<f64>;

    /// Exogenous input at time `t`; empty when the model has none.
    fn control(&self, _t: f64) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn rk4_substeps(&self) -> usize {
        DEFAULT_RK4_SUBSTEPS
    }

    fn n_aug(&self) -> usize {
        self.n_states() + self.n_params()
    }
}

/// Augmented filter state: physical states followed by parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedState {
    pub x: Vec<f64>,
    pub theta: Vec<f64>,
}

impl AugmentedState {
    pub fn new(x: Vec<f64>, theta: Vec<f64>) -> Self {
        Self { x, theta }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.x.len() + self.theta.len(),
            self.x.iter().chain(self.theta.iter()).copied(),
        )
    }

    pub fn from_vector(v: &DVector<f64>, n_states: usize) -> Self {
        Self {
            x: v.rows(0, n_states).iter().copied().collect(),
            theta: v.rows(n_states, v.len() - n_states).iter().copied().collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().chain(self.theta.iter()).all(|v| v.is_finite())
    }
}

/// Spring-mass-damper parameters: linear spring, damping, cubic spring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmdParams {
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
}

impl SmdParams {
    pub const TRUE: SmdParams = SmdParams {
        theta1: 4.0,
        theta2: 0.4,
        theta3: 0.6,
    };

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.theta1, self.theta2, self.theta3]
    }
}

/// Spring-mass-damper with a weak cubic spring, both states measured.
///
/// `ẋ1 = x2`, `ẋ2 = −Θ1·x1 − Θ2·x2 − Θ3·x1³`, `Z = (x1, x2)`.
#[derive(Debug, Clone)]
pub struct SpringMassDamper {
    pub dt: f64,
}

impl Default for SpringMassDamper {
    fn default() -> Self {
        Self { dt: 0.1 }
    }
}

impl Model for SpringMassDamper {
    fn id(&self) -> &str {
        "smd"
    }
    fn n_states(&self) -> usize {
        2
    }
    fn n_params(&self) -> usize {
        3
    }
    fn n_meas(&self) -> usize {
        2
    }
    fn dt(&self) -> f64 {
        self.dt
    }

    fn state_derivative(
        &self,
        x: &DVector<f64>,
        theta: &DVector<f64>,
        _u: &DVector<f64>,
        _t: f64,
    ) -> DVector<f64> {
        let (x1, x2) = (x[0], x[1]);
        DVector::from_vec(vec![
            x2,
            -theta[0] * x1 - theta[1] * x2 - theta[2] * x1 * x1 * x1,
        ])
    }

    fn measurement(&self, state: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![state[0], state[1]])
    }
}

/// Linear time-invariant model `ẋ = A x`, `Z = C x` with no parameters.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub dt: f64,
    pub substeps: usize,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, c: DMatrix<f64>, dt: f64) -> Result<Self> {
        if a.nrows() == 0 || a.ncols() != a.nrows() {
            return Err(Error::Config("A must be square and non-empty".into()));
        }
        if c.nrows() == 0 || c.ncols() != a.nrows() {
            return Err(Error::Config("C must be m × n with m ≥ 1".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        Ok(Self {
            a,
            c,
            dt,
            substeps: DEFAULT_RK4_SUBSTEPS,
        })
    }

    /// Scalar random-constant model: `ẋ = 0`, `Z = x`.
    pub fn scalar_constant(dt: f64) -> Self {
        Self::new(DMatrix::zeros(1, 1), DMatrix::identity(1, 1), dt).expect("valid")
    }
}

impl Model for LinearModel {
    fn id(&self) -> &str {
        "linear"
    }
    fn n_states(&self) -> usize {
        self.a.nrows()
    }
    fn n_params(&self) -> usize {
        0
    }
    fn n_meas(&self) -> usize {
        self.c.nrows()
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn state_derivative(
        &self,
        x: &DVector<f64>,
        _theta: &DVector<f64>,
        _u: &DVector<f64>,
        _t: f64,
    ) -> DVector<f64> {
        &self.a * x
    }
    fn measurement(&self, state: &DVector<f64>) -> DVector<f64> {
        &self.c * state
    }
    fn rk4_substeps(&self) -> usize {
        self.substeps
    }
}

type DerivativeFn =
    dyn Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>, f64) -> DVector<f64> + Send + Sync;
type MeasurementFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type ControlFn = dyn Fn(f64) -> DVector<f64> + Send + Sync;

/// Model assembled from closures, for systems registered through the library.
#[derive(Clone)]
pub struct CustomModel {
    id: String,
    n_states: usize,
    n_params: usize,
    n_meas: usize,
    dt: f64,
    derivative: Arc<DerivativeFn>,
    measurement: Arc<MeasurementFn>,
    control: Option<Arc<ControlFn>>,
}

impl fmt::Debug for CustomModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomModel")
            .field("id", &self.id)
            .field("n_states", &self.n_states)
            .field("n_params", &self.n_params)
            .field("n_meas", &self.n_meas)
            .field("dt", &self.dt)
            .finish()
    }
}

impl CustomModel {
    pub fn new<D, H>(
        id: impl Into<String>,
        n_states: usize,
        n_params: usize,
        n_meas: usize,
        dt: f64,
        derivative: D,
        measurement: H,
    ) -> Result<Self>
    where
        D: Fn(&DVector<f64>, &DVector<f64>, &DVector<f64>, f64) -> DVector<f64>
            + Send
            + Sync
            + 'static,
        H: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        if n_states == 0 || n_meas == 0 {
            return Err(Error::Config("models need n_states ≥ 1 and n_meas ≥ 1".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        Ok(Self {
            id: id.into(),
            n_states,
            n_params,
            n_meas,
            dt,
            derivative: Arc::new(derivative),
            measurement: Arc::new(measurement),
            control: None,
        })
    }

    pub fn with_control<U>(mut self, control: U) -> Self
    where
        U: Fn(f64) -> DVector<f64> + Send + Sync + 'static,
    {
        self.control = Some(Arc::new(control));
        self
    }
}

impl Model for CustomModel {
    fn id(&self) -> &str {
        &self.id
    }
    fn n_states(&self) -> usize {
        self.n_states
    }
    fn n_params(&self) -> usize {
        self.n_params
    }
    fn n_meas(&self) -> usize {
        self.n_meas
    }
    fn dt(&self) -> f64 {
        self.dt
    }
    fn state_derivative(
        &self,
        x: &DVector<f64>,
        theta: &DVector<f64>,
        u: &DVector<f64>,
        t: f64,
    ) -> DVector<f64> {
        (self.derivative)(x, theta, u, t)
    }
    fn measurement(&self, state: &DVector<f64>) -> DVector<f64> {
        (self.measurement)(state)
    }
    fn control(&self, t: f64) -> DVector<f64> {
        match &self.control {
            Some(u) => u(t),
            None => DVector::zeros(0),
        }
    }
}

/// Look up a built-in model by its configuration identifier.
pub fn model_from_id(id: &str, dt: f64) -> Result<Arc<dyn Model>> {
    if !(dt > 0.0) {
        return Err(Error::Config("dt must be positive".into()));
    }
    match id {
        "smd" => Ok(Arc::new(SpringMassDamper { dt })),
        other => Err(Error::UnknownModel(other.to_string())),
    }
}

fn check_state(model: &dyn Model, state: &DVector<f64>, context: &'static str) -> Result<()> {
    if state.len() != model.n_aug() {
        return Err(Error::Dimension {
            context,
            expected: model.n_aug(),
            actual: state.len(),
        });
    }
    Ok(())
}

/// Continuous-time derivative of the augmented state; the parameter block is zero.
pub fn derivative(model: &dyn Model, state: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    check_state(model, state, "derivative")?;
    let n = model.n_states();
    let x = state.rows(0, n).into_owned();
    let theta = state.rows(n, model.n_params()).into_owned();
    let dx = model.state_derivative(&x, &theta, &model.control(t), t);
    if dx.len() != n {
        return Err(Error::Dimension {
            context: "state derivative output",
            expected: n,
            actual: dx.len(),
        });
    }
    let mut out = DVector::zeros(model.n_aug());
    out.rows_mut(0, n).copy_from(&dx);
    Ok(out)
}

/// Advance the augmented state by `dt` with fixed-step RK4.
///
/// The parameter block of the output is a copy of the input.
pub fn propagate(model: &dyn Model, state: &DVector<f64>, t: f64, dt: f64) -> Result<DVector<f64>> {
    check_state(model, state, "propagate")?;
    if dt == 0.0 {
        return Ok(state.clone());
    }
    let n = model.n_states();
    let theta = state.rows(n, model.n_params()).into_owned();
    let steps = model.rk4_substeps().max(1);
    let h = dt / steps as f64;
    let f = |x: &DVector<f64>, tt: f64| model.state_derivative(x, &theta, &model.control(tt), tt);

    let mut x = state.rows(0, n).into_owned();
    let mut tt = t;
    for _ in 0..steps {
        let k1 = f(&x, tt);
        let k2 = f(&(&x + &k1 * (0.5 * h)), tt + 0.5 * h);
        let k3 = f(&(&x + &k2 * (0.5 * h)), tt + 0.5 * h);
        let k4 = f(&(&x + &k3 * h), tt + h);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        tt += h;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::PropagationDiverged { step: 0 });
    }
    let mut out = state.clone();
    out.rows_mut(0, n).copy_from(&x);
    Ok(out)
}

/// Finite-difference step for a coordinate of magnitude `value`.
pub fn fd_step(value: f64, rel: f64) -> f64 {
    rel.max(rel * value.abs())
}

/// Jacobian of the one-step map `propagate` with respect to the augmented state.
pub fn state_jacobian(model: &dyn Model, state: &DVector<f64>, t: f64, dt: f64) -> Result<DMatrix<f64>> {
    state_jacobian_with_step(model, state, t, dt, 1e-6)
}

/// `state_jacobian` with an explicit relative finite-difference step.
pub fn state_jacobian_with_step(
    model: &dyn Model,
    state: &DVector<f64>,
    t: f64,
    dt: f64,
    rel_step: f64,
) -> Result<DMatrix<f64>> {
    check_state(model, state, "state_jacobian")?;
    let dim = model.n_aug();
    let n = model.n_states();
    if dt == 0.0 {
        return Ok(DMatrix::identity(dim, dim));
    }
    let mut jac = DMatrix::zeros(dim, dim);
    let mut probe = state.clone();
    for j in 0..dim {
        let h = fd_step(state[j], rel_step);
        let (hi, lo) = (state[j] + h, state[j] - h);
        probe[j] = hi;
        let plus = propagate(model, &probe, t, dt)?;
        probe[j] = lo;
        let minus = propagate(model, &probe, t, dt)?;
        probe[j] = state[j];
        // divide by the representable step, not 2h
        let width = hi - lo;
        for i in 0..n {
            jac[(i, j)] = (plus[i] - minus[i]) / width;
        }
    }
    for i in n..dim {
        jac[(i, i)] = 1.0;
    }
    Ok(jac)
}

/// Measurement of the augmented state, with its length checked against the model.
pub fn measure(model: &dyn Model, state: &DVector<f64>) -> Result<DVector<f64>> {
    check_state(model, state, "measure")?;
    let z = model.measurement(state);
    if z.len() != model.n_meas() {
        return Err(Error::Dimension {
            context: "measurement output",
            expected: model.n_meas(),
            actual: z.len(),
        });
    }
    Ok(z)
}

/// Jacobian of `measure` with respect to the augmented state.
pub fn measurement_jacobian(model: &dyn Model, state: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_state(model, state, "measurement_jacobian")?;
    let dim = model.n_aug();
    let mut jac = DMatrix::zeros(model.n_meas(), dim);
    let mut probe = state.clone();
    for j in 0..dim {
        let h = fd_step(state[j], 1e-6);
        let (hi, lo) = (state[j] + h, state[j] - h);
        probe[j] = hi;
        let plus = measure(model, &probe)?;
        probe[j] = lo;
        let minus = measure(model, &probe)?;
        probe[j] = state[j];
        jac.set_column(j, &((plus - minus) / (hi - lo)));
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn smd() -> SpringMassDamper {
        SpringMassDamper::default()
    }

    fn aug(x: &[f64], theta: &[f64]) -> DVector<f64> {
        AugmentedState::new(x.to_vec(), theta.to_vec()).to_vector()
    }

    const THETA: [f64; 3] = [4.0, 0.4, 0.6];

    /// Dormand-Prince 5(4) with tight error control, used only as a reference.
    fn reference_ode(x0: [f64; 2], theta: [f64; 3], t_end: f64, tol: f64) -> [f64; 2] {
        let f = |x: [f64; 2]| [x[1], -theta[0] * x[0] - theta[1] * x[1] - theta[2] * x[0].powi(3)];
        let a: [[f64; 6]; 6] = [
            [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
            [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
            [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
            [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
            [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
        ];
        let b5 = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
        let b4 = [
            5179.0 / 57600.0,
            0.0,
            7571.0 / 16695.0,
            393.0 / 640.0,
            -92097.0 / 339200.0,
            187.0 / 2100.0,
            1.0 / 40.0,
        ];
        let mut t = 0.0;
        let mut x = x0;
        let mut h = 1e-4;
        while t < t_end {
            if t + h > t_end {
                h = t_end - t;
            }
            let mut k = [[0.0; 2]; 7];
            k[0] = f(x);
            for s in 1..7 {
                let mut xs = x;
                for (j, kj) in k.iter().enumerate().take(s) {
                    xs[0] += h * a[s - 1][j] * kj[0];
                    xs[1] += h * a[s - 1][j] * kj[1];
                }
                k[s] = f(xs);
            }
            let mut y5 = x;
            let mut y4 = x;
            for s in 0..7 {
                for c in 0..2 {
                    y5[c] += h * b5[s] * k[s][c];
                    y4[c] += h * b4[s] * k[s][c];
                }
            }
            let err = ((y5[0] - y4[0]).abs()).max((y5[1] - y4[1]).abs());
            if err <= tol {
                t += h;
                x = y5;
            }
            let scale = if err == 0.0 { 2.0 } else { 0.9 * (tol / err).powf(0.2) };
            h *= scale.clamp(0.2, 2.0);
        }
        x
    }

    #[test]
    fn smd_derivative_examples() {
        let m = smd();
        let d = derivative(&m, &aug(&[1.0, 0.0], &THETA), 0.0).unwrap();
        assert_eq!(d.as_slice(), &[0.0, -4.6, 0.0, 0.0, 0.0]);
        let d = derivative(&m, &aug(&[0.0, 0.0], &[7.0, -1.0, 3.0]), 0.0).unwrap();
        assert!(d.iter().all(|v| *v == 0.0));
        let d = derivative(&m, &aug(&[0.5, -1.0], &THETA), 0.0).unwrap();
        assert_relative_eq!(d[0], -1.0);
        assert_relative_eq!(d[1], -1.675, epsilon = 1e-15);
    }

    #[test]
    fn derivative_rejects_bad_dimension() {
        let err = derivative(&smd(), &DVector::zeros(4), 0.0).unwrap_err();
        assert!(matches!(err, Error::Dimension { expected: 5, actual: 4, .. }));
    }

    #[test]
    fn propagate_identity_and_equilibrium() {
        let m = smd();
        let s = aug(&[0.3, -0.2], &THETA);
        assert_eq!(propagate(&m, &s, 0.0, 0.0).unwrap(), s);
        let eq = aug(&[0.0, 0.0], &[1.0, 2.0, 3.0]);
        assert_eq!(propagate(&m, &eq, 0.0, 0.1).unwrap(), eq);
    }

    #[test]
    fn propagate_matches_adaptive_reference() {
        let m = smd();
        let out = propagate(&m, &aug(&[1.0, 0.0], &THETA), 0.0, 0.1).unwrap();
        let reference = reference_ode([1.0, 0.0], THETA, 0.1, 1e-12);
        assert!((out[0] - reference[0]).abs() < 1e-6, "{} vs {}", out[0], reference[0]);
        assert!((out[1] - reference[1]).abs() < 1e-6, "{} vs {}", out[1], reference[1]);
    }

    #[test]
    fn propagate_reports_divergence() {
        let m = smd();
        let s = aug(&[1e200, 1e200], &[1e200, 0.0, 1e200]);
        assert!(matches!(
            propagate(&m, &s, 0.0, 0.1),
            Err(Error::PropagationDiverged { .. })
        ));
    }

    #[test]
    fn jacobian_identity_at_zero_dt() {
        let j = state_jacobian(&smd(), &aug(&[1.0, 0.0], &THETA), 0.0, 0.0).unwrap();
        assert_eq!(j, DMatrix::identity(5, 5));
    }

    #[test]
    fn linear_jacobian_matches_matrix_exponential() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -2.0, -0.3]);
        let dt = 0.05;
        let model = LinearModel::new(a.clone(), DMatrix::identity(2, 2), dt).unwrap();
        let jac = state_jacobian(&model, &DVector::from_vec(vec![0.4, -0.1]), 0.0, dt).unwrap();
        // Taylor series of exp(A dt) to high order
        let ad = &a * dt;
        let mut term = DMatrix::<f64>::identity(2, 2);
        let mut expm = DMatrix::<f64>::identity(2, 2);
        for k in 1..20 {
            term = &term * &ad / k as f64;
            expm += &term;
        }
        assert!((jac - expm).amax() < 10.0 * dt.powi(5));
    }

    #[test]
    fn smd_jacobian_two_step_cross_check() {
        let m = smd();
        let s = aug(&[1.0, 0.0], &THETA);
        let central = state_jacobian(&m, &s, 0.0, 0.1).unwrap();
        // forward difference at a different step size
        let base = propagate(&m, &s, 0.0, 0.1).unwrap();
        for j in 0..5 {
            let h = 1e-7 * s[j].abs().max(1.0);
            let mut p = s.clone();
            p[j] += h;
            let col = (propagate(&m, &p, 0.0, 0.1).unwrap() - &base) / h;
            for i in 0..5 {
                let c = central[(i, j)];
                let scale = c.abs().max(1e-3);
                assert!((col[i] - c).abs() / scale < 1e-4, "({i},{j}) {} vs {}", col[i], c);
            }
        }
    }

    #[test]
    fn jacobian_step_refinement_converges() {
        let m = smd();
        for x in [[1.0, 0.0], [0.3, -0.8], [-0.6, 1.2]] {
            let s = aug(&x, &THETA);
            let a = state_jacobian_with_step(&m, &s, 0.0, 0.1, 1e-5).unwrap();
            let b = state_jacobian_with_step(&m, &s, 0.0, 0.1, 5e-6).unwrap();
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() <= 1e-6 * u.abs().max(1.0), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn smd_measurement_and_jacobian() {
        let m = smd();
        assert_eq!(measure(&m, &aug(&[1.0, 0.0], &THETA)).unwrap().as_slice(), &[1.0, 0.0]);
        assert_eq!(measure(&m, &aug(&[0.0, 0.0], &THETA)).unwrap().as_slice(), &[0.0, 0.0]);
        assert_eq!(measure(&m, &aug(&[0.3, -0.7], &THETA)).unwrap().as_slice(), &[0.3, -0.7]);
        let h = measurement_jacobian(&m, &aug(&[0.3, -0.7], &THETA)).unwrap();
        let expected = DMatrix::from_row_slice(2, 5, &[1., 0., 0., 0., 0., 0., 1., 0., 0., 0.]);
        assert!((h - expected).amax() < 1e-9);
    }

    #[test]
    fn scalar_and_quadratic_measurement_jacobians() {
        let id = LinearModel::scalar_constant(0.1);
        let h = measurement_jacobian(&id, &DVector::from_vec(vec![2.5])).unwrap();
        assert!((h[(0, 0)] - 1.0).abs() < 1e-9);

        let quad = CustomModel::new(
            "quad",
            1,
            0,
            1,
            0.1,
            |_x, _t, _u, _time| DVector::zeros(1),
            |s| DVector::from_vec(vec![s[0] * s[0]]),
        )
        .unwrap();
        let h = measurement_jacobian(&quad, &DVector::from_vec(vec![3.0])).unwrap();
        assert!((h[(0, 0)] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn registry_lookup() {
        assert_eq!(model_from_id("smd", 0.1).unwrap().n_aug(), 5);
        assert!(matches!(model_from_id("pendulum", 0.1), Err(Error::UnknownModel(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn parameter_block_is_preserved(
                x1 in -2.0f64..2.0, x2 in -2.0f64..2.0,
                t1 in 0.0f64..8.0, t2 in -0.5f64..1.0, t3 in -1.0f64..1.0,
            ) {
                let s = aug(&[x1, x2], &[t1, t2, t3]);
                let out = propagate(&smd(), &s, 0.0, 0.1).unwrap();
                prop_assert_eq!(out[2].to_bits(), t1.to_bits());
                prop_assert_eq!(out[3].to_bits(), t2.to_bits());
                prop_assert_eq!(out[4].to_bits(), t3.to_bits());
            }

            #[test]
            fn energy_does_not_increase(
                x1 in -1.5f64..1.5, x2 in -1.5f64..1.5,
                t2 in 0.05f64..1.0,
            ) {
                let theta = [4.0, t2, 0.6];
                let energy = |s: &DVector<f64>| {
                    0.5 * s[1] * s[1] + 0.5 * theta[0] * s[0] * s[0] + 0.25 * theta[2] * s[0].powi(4)
                };
                let mut s = aug(&[x1, x2], &theta);
                for _ in 0..50 {
                    let next = propagate(&smd(), &s, 0.0, 0.1).unwrap();
                    prop_assert!(energy(&next) <= energy(&s) + 1e-8);
                    s = next;
                }
            }
        }
    }
}
