//! Generalized cost terms J0–J8 and innovation whiteness diagnostics.
//!
//! Each cost is a per-step mean of a weighted quadratic form. The weights are
//! second-moment predictions from the filter and smoother; several of them are
//! differences of covariances and can lose definiteness. Those are inverted
//! with an eigenvalue floor of `1e-10 · |trace|` and every such step is counted
//! in [`RegEvents`].

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{DynamicalPass, FilterPass, SmootherPass};
use crate::linalg::{floored_inverse, outer, symmetrized, top_left};
use crate::model::{measure, propagate, state_jacobian, Model};

/// Relative eigenvalue floor applied to indefinite weights.
pub const WEIGHT_FLOOR: f64 = 1e-10;

/// Number of steps at which a weight had to be floored.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegEvents {
    pub s1: usize,
    pub s2: usize,
    pub s3: usize,
    pub w1: usize,
    pub w2: usize,
    pub w3: usize,
}

impl RegEvents {
    pub fn total(&self) -> usize {
        self.s1 + self.s2 + self.s3 + self.w1 + self.w2 + self.w3
    }
}

/// Cost terms of one iteration. `j0` is present only when a prior is configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub j0: Option<f64>,
    pub j1: f64,
    pub j2: f64,
    pub j3: f64,
    pub j4: f64,
    pub j5: f64,
    pub j6: f64,
    pub j7: f64,
    pub j8: f64,
    pub reg: RegEvents,
}

impl CostReport {
    /// `[J1, …, J8]`.
    pub fn j1_to_j8(&self) -> [f64; 8] {
        [
            self.j1, self.j2, self.j3, self.j4, self.j5, self.j6, self.j7, self.j8,
        ]
    }

    /// `J_i` for `i` in `0..=8`; `None` for an absent J0 or an out-of-range index.
    pub fn get(&self, i: usize) -> Option<f64> {
        match i {
            0 => self.j0,
            1..=8 => Some(self.j1_to_j8()[i - 1]),
            _ => None,
        }
    }
}

/// `eᵀ W⁻¹ e`, flooring `W` when it is not safely positive definite.
fn weighted(e: &DVector<f64>, w: &DMatrix<f64>, events: &mut usize) -> f64 {
    let w = symmetrized(w.clone());
    if let Some(chol) = w.clone().cholesky() {
        let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b));
        if min_pivot * min_pivot > WEIGHT_FLOOR * w.trace().abs() {
            return e.dot(&chol.solve(e));
        }
    }
    let (inv, floored) = floored_inverse(&w, WEIGHT_FLOOR);
    if floored {
        *events += 1;
    }
    e.dot(&(inv * e))
}

fn head(v: &DVector<f64>, n: usize) -> DVector<f64> {
    v.rows(0, n).into_owned()
}

/// Evaluate J0–J8 for one filter/smoother/dynamical pass triple.
///
/// `prior_mean` enables J0 = ½ (X0 − X_t0)ᵀ P0⁺ (X0 − X_t0) using the pass's
/// `X0` and `P0`; directions with zero prior variance contribute nothing.
/// The noise covariances are the ones the pass was run with.
pub fn compute_costs(
    model: &dyn Model,
    measurements: &[DVector<f64>],
    pass: &FilterPass,
    smoother: &SmootherPass,
    dynamical: &DynamicalPass,
    prior_mean: Option<&DVector<f64>>,
) -> Result<CostReport> {
    let n = pass.len();
    if n == 0 || measurements.len() != n {
        return Err(Error::Dimension {
            context: "cost evaluation",
            expected: n,
            actual: measurements.len(),
        });
    }
    let ns = model.n_states();
    let dt = model.dt();
    let r = &pass.r;
    let q = &pass.q;
    let mut reg = RegEvents::default();

    let j0 = match prior_mean {
        Some(mean) => {
            let d = &pass.x0 - mean;
            let pinv = symmetrized(pass.p0.clone())
                .pseudo_inverse(1e-12 * pass.p0.amax().max(f64::MIN_POSITIVE))
                .map_err(|e| Error::Malformed(e.to_string()))?;
            Some(0.5 * d.dot(&(pinv * &d)))
        }
        None => None,
    };

    let mut sums = [0.0f64; 8];
    for k in 1..=n {
        let s = &pass.steps[k - 1];
        let z = &measurements[k - 1];

        let s1 = symmetrized(s.s1.clone());
        let (quad1, logdet1) = match s1.clone().cholesky() {
            Some(chol) => {
                let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
                (s.innovation.dot(&chol.solve(&s.innovation)), logdet)
            }
            None => {
                reg.s1 += 1;
                let (inv, _) = floored_inverse(&s1, WEIGHT_FLOOR);
                let floor = WEIGHT_FLOOR * s1.trace().abs();
                let logdet = s1
                    .clone()
                    .symmetric_eigenvalues()
                    .iter()
                    .map(|l| l.max(floor).ln())
                    .sum::<f64>();
                (s.innovation.dot(&(inv * &s.innovation)), logdet)
            }
        };
        sums[0] += quad1;
        sums[4] += quad1 + logdet1;

        let s2 = r - &s.h_post * &s.p_post * s.h_post.transpose();
        sums[1] += weighted(&s.residue, &s2, &mut reg.s2);

        let hs = &smoother.h_smooth[k - 1];
        let s3 = r - hs * &smoother.p_smooth[k] * hs.transpose();
        sums[2] += weighted(&smoother.smoothed_residue[k - 1], &s3, &mut reg.s3);

        let ed = z - measure(model, &dynamical.xd[k])?;
        sums[3] += ed.norm_squared();

        let t_prev = (k - 1) as f64 * dt;
        let prev = &smoother.x_smooth[k - 1];
        let f = state_jacobian(model, prev, t_prev, dt)?;
        let w1 = &smoother.x_smooth[k] - propagate(model, prev, t_prev, dt)?;
        let lag = &smoother.lag_one[k];
        let lag_ft = lag * f.transpose();
        let c1 = &smoother.p_smooth[k] + &f * &smoother.p_smooth[k - 1] * f.transpose()
            - &lag_ft
            - lag_ft.transpose();
        sums[5] += weighted(&head(&w1, ns), &top_left(&(q - c1), ns), &mut reg.w1);

        let fd = &dynamical.fd[k - 1];
        let w2 = &smoother.x_smooth[k]
            - &dynamical.xd[k]
            - fd * (&smoother.x_smooth[k - 1] - &dynamical.xd[k - 1]);
        let lag_fdt = lag * fd.transpose();
        let c2 = &smoother.p_smooth[k] + fd * &smoother.p_smooth[k - 1] * fd.transpose()
            - &lag_fdt
            - lag_fdt.transpose();
        sums[6] += weighted(&head(&w2, ns), &top_left(&(q - c2), ns), &mut reg.w2);

        let w3 = &s.x_post - &s.x_prior;
        let big_w3 = &s.p_prior - &s.p_post;
        sums[7] += weighted(&head(&w3, ns), &top_left(&big_w3, ns), &mut reg.w3);
    }
    let mean = |i: usize| sums[i] / n as f64;
    let report = CostReport {
        j0,
        j1: mean(0),
        j2: mean(1),
        j3: mean(2),
        j4: mean(3),
        j5: mean(4),
        j6: mean(5),
        j7: mean(6),
        j8: mean(7),
        reg,
    };
    if report.j1_to_j8().iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            k: n,
            reason: "cost evaluation produced a non-finite value".into(),
        });
    }
    Ok(report)
}

/// Normalized autocorrelation of each channel of a vector sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Whiteness {
    /// `autocorrelation[channel][lag]` for lags `0..=max_lag`.
    pub autocorrelation: Vec<Vec<f64>>,
    /// Half-width of the whiteness band, `2/√N`.
    pub band: f64,
    /// Fraction of lags `1..=max_lag` (all channels) outside the band.
    pub fraction_outside: f64,
    /// Channels with zero sample variance; their autocorrelation is reported as 1.
    pub degenerate: Vec<bool>,
}

impl Whiteness {
    pub fn fraction_inside(&self) -> f64 {
        1.0 - self.fraction_outside
    }
}

pub const WHITENESS_MAX_LAG: usize = 20;
pub const WHITENESS_MIN_LEN: usize = 30;

/// Autocorrelation for lags `0..=20` of every channel.
///
/// Lag `l` uses the mean-removed lagged products averaged over the `N − l`
/// available pairs, divided by the lag-0 variance.
pub fn whiteness(seq: &[DVector<f64>]) -> Result<Whiteness> {
    let n = seq.len();
    if n < WHITENESS_MIN_LEN {
        return Err(Error::Config(format!(
            "whiteness needs at least {WHITENESS_MIN_LEN} samples, got {n}"
        )));
    }
    let channels = seq[0].len();
    if seq.iter().any(|v| v.len() != channels) {
        return Err(Error::Malformed("sequence has inconsistent channel counts".into()));
    }
    let max_lag = WHITENESS_MAX_LAG.min(n - 1);
    let band = 2.0 / (n as f64).sqrt();
    let mut autocorrelation = Vec::with_capacity(channels);
    let mut degenerate = Vec::with_capacity(channels);
    let mut outside = 0usize;
    for c in 0..channels {
        let mean = seq.iter().map(|v| v[c]).sum::<f64>() / n as f64;
        let x: Vec<f64> = seq.iter().map(|v| v[c] - mean).collect();
        let var = x.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let flat = !(var > 0.0) || var <= f64::EPSILON * mean.abs().powi(2);
        let rho: Vec<f64> = (0..=max_lag)
            .map(|l| {
                if flat {
                    return 1.0;
                }
                let cov = (0..n - l).map(|k| x[k] * x[k + l]).sum::<f64>() / (n - l) as f64;
                cov / var
            })
            .collect();
        outside += rho[1..].iter().filter(|r| r.abs() > band).count();
        autocorrelation.push(rho);
        degenerate.push(flat);
    }
    let total = channels * max_lag;
    Ok(Whiteness {
        autocorrelation,
        band,
        fraction_outside: if total == 0 { 0.0 } else { outside as f64 / total as f64 },
        degenerate,
    })
}

/// Sample covariance `(1/N) Σ v vᵀ` of a zero-mean sequence.
pub fn sample_second_moment(seq: &[DVector<f64>]) -> Option<DMatrix<f64>> {
    let first = seq.first()?;
    let mut sum = DMatrix::zeros(first.len(), first.len());
    for v in seq {
        sum += outer(v);
    }
    Some(sum / seq.len() as f64)
}
