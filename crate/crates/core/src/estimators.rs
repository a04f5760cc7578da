//! Estimators for the filter statistics P0, Q and R, and the trimming masks
//! that restrict them to block patterns of the augmented state.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::filter::{DynamicalPass, FilterPass, SmootherPass};
use crate::linalg::{is_finite, outer, spd_solve, symmetrized};
use crate::model::{measure, propagate, state_jacobian, Model};

/// Default floor placed on the physical-state diagonal of Q when Q is known to be zero.
pub const DEFAULT_Q_FLOOR: f64 = 1e-10;

/// Sparsity pattern kept when trimming an augmented covariance `[S, SP; PS, P]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimMask {
    /// Only the diagonal of the parameter block.
    ReferenceParamOnly,
    /// Only the diagonal of the physical-state block.
    ReferenceStateOnly,
    /// State and parameter blocks kept in full, cross-covariances zeroed.
    Diagonal,
    /// Nothing removed.
    Full,
    /// Only the main diagonal.
    DiagOnly,
}

impl TrimMask {
    fn keeps(self, i: usize, j: usize, n_states: usize) -> bool {
        match self {
            TrimMask::Full => true,
            TrimMask::DiagOnly => i == j,
            TrimMask::Diagonal => (i < n_states) == (j < n_states),
            TrimMask::ReferenceParamOnly => i == j && i >= n_states,
            TrimMask::ReferenceStateOnly => i == j && i < n_states,
        }
    }

    fn parse(s: &str, reference: TrimMask) -> std::result::Result<Self, String> {
        match s {
            "ref" | "reference" => Ok(reference),
            "reference_param_only" => Ok(TrimMask::ReferenceParamOnly),
            "reference_state_only" => Ok(TrimMask::ReferenceStateOnly),
            "diag" | "diag_only" => Ok(TrimMask::DiagOnly),
            "block" | "diagonal" => Ok(TrimMask::Diagonal),
            "full" => Ok(TrimMask::Full),
            other => Err(format!("unknown mask '{other}' (expected ref|diag|block|full)")),
        }
    }
}

impl fmt::Display for TrimMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TrimMask::ReferenceParamOnly => "reference_param_only",
            TrimMask::ReferenceStateOnly => "reference_state_only",
            TrimMask::Diagonal => "diagonal",
            TrimMask::Full => "full",
            TrimMask::DiagOnly => "diag_only",
        };
        f.write_str(s)
    }
}

/// Zero every entry outside `mask`. `n_states` splits the state and parameter blocks.
pub fn apply_mask(a: &DMatrix<f64>, mask: TrimMask, n_states: usize) -> DMatrix<f64> {
    let out = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| {
        if mask.keeps(i, j, n_states) {
            a[(i, j)]
        } else {
            0.0
        }
    });
    symmetrized(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum P0Method {
    /// `N · P_{N|N}`.
    ScaleUp,
    /// Inverse of the averaged information matrix.
    Iim,
    /// Smoothed initial covariance `P_{0|N}`, unscaled.
    Smoothed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QMethod {
    /// Extended EM on the smoothed statistic `X_{k|N} − f(X_{k−1|N})`.
    Em,
    /// Difference between the stochastic and dynamical trajectories.
    Dsdt,
    /// Innovations mapped through the final gain.
    Ms,
    /// State corrections `X_{k|k} − X_{k|k−1}`.
    Mt,
    /// Constant floor on the physical-state diagonal.
    #[serde(alias = "floor")]
    FixedFloor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RMethod {
    /// Smoothed residue with second-order term.
    Em,
    /// Filtered residue with second-order term.
    Ms,
    /// Innovations less the predicted measurement covariance.
    Mt,
    /// Residue of the noise-free dynamical trajectory.
    #[serde(alias = "dyn")]
    DynResidue,
}

macro_rules! from_str_via_serde {
    ($t:ty) => {
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                serde_json::from_value(serde_json::Value::String(s.to_string()))
                    .map_err(|_| format!("unknown {} '{s}'", stringify!($t)))
            }
        }
    };
}
from_str_via_serde!(P0Method);
from_str_via_serde!(QMethod);
from_str_via_serde!(RMethod);

fn de_p0_mask<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrimMask, D::Error> {
    let s = String::deserialize(d)?;
    TrimMask::parse(&s, TrimMask::ReferenceParamOnly).map_err(serde::de::Error::custom)
}

fn de_q_mask<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrimMask, D::Error> {
    let s = String::deserialize(d)?;
    TrimMask::parse(&s, TrimMask::ReferenceStateOnly).map_err(serde::de::Error::custom)
}

fn de_r_mask<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrimMask, D::Error> {
    let s = String::deserialize(d)?;
    TrimMask::parse(&s, TrimMask::DiagOnly).map_err(serde::de::Error::custom)
}

fn default_q_floor() -> f64 {
    DEFAULT_Q_FLOOR
}

/// Which estimator (and trimming) updates each statistic between passes.
///
/// In configuration files masks accept `ref`, `diag`, `block` and `full`;
/// `ref` means the parameter diagonal for P0 and the state diagonal for Q.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorChoice {
    pub p0: P0Method,
    #[serde(deserialize_with = "de_p0_mask")]
    pub p0_mask: TrimMask,
    pub q: QMethod,
    #[serde(deserialize_with = "de_q_mask")]
    pub q_mask: TrimMask,
    #[serde(default = "default_q_floor")]
    pub q_floor: f64,
    pub r: RMethod,
    #[serde(deserialize_with = "de_r_mask")]
    pub r_mask: TrimMask,
}

impl EstimatorChoice {
    /// Reference recipe for data without process noise.
    pub fn reference_q_zero() -> Self {
        Self {
            p0: P0Method::ScaleUp,
            p0_mask: TrimMask::ReferenceParamOnly,
            q: QMethod::FixedFloor,
            q_mask: TrimMask::ReferenceStateOnly,
            q_floor: DEFAULT_Q_FLOOR,
            r: RMethod::Em,
            r_mask: TrimMask::DiagOnly,
        }
    }

    /// Reference recipe with process noise (EM for Q).
    pub fn reference_q_positive() -> Self {
        Self {
            q: QMethod::Em,
            ..Self::reference_q_zero()
        }
    }

    pub fn with_p0(mut self, method: P0Method, mask: TrimMask) -> Self {
        self.p0 = method;
        self.p0_mask = mask;
        self
    }

    pub fn needs_dynamical_pass(&self) -> bool {
        self.q == QMethod::Dsdt || self.r == RMethod::DynResidue
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == RMethod::DynResidue && self.q != QMethod::FixedFloor {
            return Err(Error::Config(
                "the dynamical-residue R estimate is only valid when Q is fixed at its floor".into(),
            ));
        }
        if !(self.q_floor >= 0.0 && self.q_floor.is_finite()) {
            return Err(Error::Config("q_floor must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Everything one filter/smoother iteration produced, as consumed by the estimators.
#[derive(Clone, Copy)]
pub struct PassProducts<'a> {
    pub model: &'a dyn Model,
    pub measurements: &'a [DVector<f64>],
    pub filter: &'a FilterPass,
    pub smoother: Option<&'a SmootherPass>,
    pub dynamical: Option<&'a DynamicalPass>,
}

impl<'a> PassProducts<'a> {
    fn smoother(&self, what: &str) -> Result<&'a SmootherPass> {
        self.smoother
            .ok_or_else(|| Error::Config(format!("{what} needs the smoother pass")))
    }
    fn dynamical(&self, what: &str) -> Result<&'a DynamicalPass> {
        self.dynamical
            .ok_or_else(|| Error::Config(format!("{what} needs the dynamical pass")))
    }
}

/// A noise covariance estimate plus the number of diagonal entries that
/// came out negative and were replaced by their absolute value.
#[derive(Debug, Clone)]
pub struct NoiseEstimate {
    pub matrix: DMatrix<f64>,
    pub clamped: usize,
}

fn clamp_diagonal(a: &mut DMatrix<f64>) -> usize {
    let mut count = 0;
    for i in 0..a.nrows() {
        if a[(i, i)] < 0.0 {
            a[(i, i)] = -a[(i, i)];
            count += 1;
        }
    }
    count
}

fn finish(sum: DMatrix<f64>, n: usize, mask: TrimMask, n_states: usize, clamp: bool, what: &str) -> Result<NoiseEstimate> {
    let mean = symmetrized(sum / n as f64);
    let mut matrix = apply_mask(&mean, mask, n_states);
    if !is_finite(&matrix) {
        return Err(Error::Diverged {
            k: n,
            reason: format!("{what} estimate is not finite"),
        });
    }
    let clamped = if clamp { clamp_diagonal(&mut matrix) } else { 0 };
    Ok(NoiseEstimate { matrix, clamped })
}

/// `N · P_{N|N}`, trimmed.
pub fn p0_scale_up(p_final: &DMatrix<f64>, n: usize, mask: TrimMask, n_states: usize) -> DMatrix<f64> {
    apply_mask(&(p_final * n as f64), mask, n_states)
}

/// `[ (1/N) Σ F_{k−1}ᵀ H_kᵀ R⁻¹ H_k F_{k−1} ]⁻¹`, trimmed.
pub fn p0_iim(pass: &FilterPass, r: &DMatrix<f64>, mask: TrimMask, n_states: usize) -> Result<DMatrix<f64>> {
    let dim = pass.x0.len();
    let mut info = DMatrix::<f64>::zeros(dim, dim);
    for s in &pass.steps {
        let hf = &s.h * &s.f_prev;
        let solved = spd_solve(r, &hf)
            .ok_or_else(|| Error::SingularInformation("R is not positive definite".into()))?;
        info += hf.transpose() * solved.solution;
    }
    info /= pass.len() as f64;
    let info = symmetrized(info);
    let chol = info.clone().cholesky().ok_or_else(|| {
        let eig = info.symmetric_eigen();
        let weak: Vec<String> = eig
            .eigenvalues
            .iter()
            .enumerate()
            .filter(|(_, l)| **l <= 1e-12 * eig.eigenvalues.amax())
            .map(|(i, _)| format!("{:.3?}", eig.eigenvectors.column(i).as_slice()))
            .collect();
        Error::SingularInformation(format!(
            "information matrix is rank deficient; the data does not excite direction(s) {}",
            weak.join(", ")
        ))
    })?;
    Ok(apply_mask(&chol.inverse(), mask, n_states))
}

/// Smoothed initial covariance `P_{0|N}`, trimmed.
pub fn p0_smoothed(smoother: &SmootherPass, mask: TrimMask, n_states: usize) -> DMatrix<f64> {
    apply_mask(&smoother.p_smooth[0], mask, n_states)
}

/// Measurement-noise covariance estimate.
pub fn estimate_r(method: RMethod, products: &PassProducts<'_>, mask: TrimMask) -> Result<NoiseEstimate> {
    let model = products.model;
    let pass = products.filter;
    let n = pass.len();
    let m = model.n_meas();
    let mut sum = DMatrix::<f64>::zeros(m, m);
    match method {
        RMethod::Em => {
            let sm = products.smoother("EM R estimate")?;
            for k in 1..=n {
                let h = &sm.h_smooth[k - 1];
                sum += outer(&sm.smoothed_residue[k - 1]) + h * &sm.p_smooth[k] * h.transpose();
            }
        }
        RMethod::Ms => {
            for s in &pass.steps {
                sum += outer(&s.residue) + &s.h_post * &s.p_post * s.h_post.transpose();
            }
        }
        RMethod::Mt => {
            for s in &pass.steps {
                sum += outer(&s.innovation) - &s.h * &s.p_prior * s.h.transpose();
            }
        }
        RMethod::DynResidue => {
            let dp = products.dynamical("dynamical-residue R estimate")?;
            for k in 1..=n {
                let e = &products.measurements[k - 1] - measure(model, &dp.xd[k])?;
                sum += outer(&e);
            }
        }
    }
    finish(sum, n, mask, m, method == RMethod::Mt, "R")
}

/// Process-noise covariance estimate over the augmented state.
///
/// `gain_final` is used only by the MS estimator; pass `None` to take `K_N` from the filter.
pub fn estimate_q(
    method: QMethod,
    products: &PassProducts<'_>,
    gain_final: Option<&DMatrix<f64>>,
    mask: TrimMask,
    floor: f64,
) -> Result<NoiseEstimate> {
    let model = products.model;
    let pass = products.filter;
    let n = pass.len();
    let n_states = model.n_states();
    let dim = model.n_aug();
    let dt = model.dt();
    let mut sum = DMatrix::<f64>::zeros(dim, dim);
    match method {
        QMethod::FixedFloor => {
            let mut q = DMatrix::zeros(dim, dim);
            for i in 0..n_states {
                q[(i, i)] = floor;
            }
            return Ok(NoiseEstimate {
                matrix: apply_mask(&q, mask, n_states),
                clamped: 0,
            });
        }
        QMethod::Em => {
            let sm = products.smoother("EM Q estimate")?;
            for k in 1..=n {
                let t_prev = (k - 1) as f64 * dt;
                let prev = &sm.x_smooth[k - 1];
                let f = state_jacobian(model, prev, t_prev, dt)?;
                let w1 = &sm.x_smooth[k] - propagate(model, prev, t_prev, dt)?;
                let lag_ft = &sm.lag_one[k] * f.transpose();
                sum += outer(&w1) + &sm.p_smooth[k] + &f * &sm.p_smooth[k - 1] * f.transpose()
                    - &lag_ft
                    - lag_ft.transpose();
            }
        }
        QMethod::Dsdt => {
            let sm = products.smoother("DSDT Q estimate")?;
            let dp = products.dynamical("DSDT Q estimate")?;
            for k in 1..=n {
                let fd = &dp.fd[k - 1];
                let w2 = &sm.x_smooth[k] - &dp.xd[k] - fd * (&sm.x_smooth[k - 1] - &dp.xd[k - 1]);
                let lag_ft = &sm.lag_one[k] * fd.transpose();
                sum += outer(&w2) + &sm.p_smooth[k] + fd * &sm.p_smooth[k - 1] * fd.transpose()
                    - &lag_ft
                    - lag_ft.transpose();
            }
        }
        QMethod::Ms => {
            let m = model.n_meas();
            let mut innov = DMatrix::<f64>::zeros(m, m);
            for s in &pass.steps {
                innov += outer(&s.innovation);
            }
            innov /= n as f64;
            let gain = gain_final.unwrap_or_else(|| pass.final_gain());
            sum = gain * innov * gain.transpose() * n as f64;
        }
        QMethod::Mt => {
            for (idx, s) in pass.steps.iter().enumerate() {
                let w3 = &s.x_post - &s.x_prior;
                let predicted = &s.f_prev * pass.p_post(idx) * s.f_prev.transpose();
                sum += outer(&w3) - (predicted - &s.p_post);
            }
        }
    }
    finish(sum, n, mask, n_states, method == QMethod::Mt, "Q")
}

/// Embed an `n × n` physical-state covariance into the augmented space.
pub fn augment(q_states: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let mut q = DMatrix::zeros(dim, dim);
    let n = q_states.nrows();
    q.view_mut((0, 0), (n, n)).copy_from(q_states);
    q
}
