//! Monte-Carlo aggregate metrics: estimate ratios, consistency, spread, CRB
//! ratio and the parameter correlation matrix.
//!
//! A ratio whose denominator is zero for any simulation is reported as `None`
//! (serialized as `null`) rather than as an infinity.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::costs::CostReport;
use crate::error::{Error, Result};
use crate::linalg::serde_rows;
use crate::nr::NrResult;

/// The parts of one tuned simulation that enter the aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSummary {
    pub theta_hat: Vec<f64>,
    pub p_theta: DMatrix<f64>,
    pub r_diag: Vec<f64>,
    pub q_diag: Vec<f64>,
    pub costs: CostReport,
}

/// What the estimates are compared against.
#[derive(Debug, Clone, Copy)]
pub struct McReference<'a> {
    pub theta_true: &'a [f64],
    pub r_true: &'a [f64],
    pub q_true: &'a [f64],
    /// Per-simulation output-error results, index-aligned with the summaries.
    pub nr: Option<&'a [NrResult]>,
}

/// Scatter statistics of the output-error estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrMetrics {
    pub consistency_ratio: Vec<Option<f64>>,
    pub spread_factor: Vec<Option<f64>>,
    pub theta_mean: Vec<f64>,
    pub crb_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McMetrics {
    pub n_sims: usize,
    /// Mean of `Θ̂ / Θ_ref`, with `Θ_ref` the per-simulation NR estimate when
    /// available and `Θ_true` otherwise.
    pub theta_ratio: Vec<Option<f64>>,
    pub theta_ratio_true: Vec<Option<f64>>,
    /// Mean of `√P_Θ / CRB`; `None` without NR results.
    pub crb_ratio: Vec<Option<f64>>,
    /// `σ_Θ / SIGMA_avg`.
    pub consistency_ratio: Vec<Option<f64>>,
    /// `mean √((Θ_true − Θ̂)² + P_Θ) · 100 / |Θ_true|`.
    pub spread_factor: Vec<Option<f64>>,
    /// Mean of `R̂ / R_ref` on the diagonal (NR or truth, as for `theta_ratio`).
    pub r_ratio: Vec<Option<f64>>,
    pub r_ratio_true: Vec<Option<f64>>,
    /// Mean of `Q̂ / Q_true` on the diagonal.
    pub q_ratio: Vec<Option<f64>>,
    /// Mean and population standard deviation of `J0 … J8` across simulations.
    pub cost_mean: Vec<Option<f64>>,
    pub cost_std: Vec<Option<f64>>,
    /// Mean over simulations of the correlation matrix of the final `P_Θ`.
    #[serde(with = "serde_rows")]
    pub correlation_matrix: DMatrix<f64>,
    pub nr: Option<NrMetrics>,
}

/// `C_ij = d_ij / √(d_ii d_jj)`, with zero off-diagonal entries where a variance vanishes.
pub fn correlation(p: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            return 1.0;
        }
        let d = (p[(i, i)] * p[(j, j)]).sqrt();
        if d > 0.0 {
            (p[(i, j)] / d).clamp(-1.0, 1.0)
        } else {
            0.0
        }
    })
}

/// Mean of `num_s / den_s` over simulations, undefined if any denominator is zero.
fn mean_ratio(pairs: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (num, den) in pairs {
        if den == 0.0 || !den.is_finite() {
            return None;
        }
        sum += num / den;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn population_std(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn consistency(estimates: &[f64], sigmas: &[f64]) -> Option<f64> {
    let avg = mean(sigmas);
    (avg > 0.0).then(|| population_std(estimates) / avg)
}

fn spread(truth: f64, estimates: &[f64], variances: &[f64]) -> Option<f64> {
    if truth == 0.0 {
        return None;
    }
    let m = estimates
        .iter()
        .zip(variances)
        .map(|(e, v)| ((truth - e).powi(2) + v).sqrt())
        .sum::<f64>()
        / estimates.len() as f64;
    Some(m * 100.0 / truth.abs())
}

/// Aggregate per-simulation results into the campaign metrics.
pub fn aggregate_mc(sims: &[SimSummary], reference: &McReference<'_>) -> Result<McMetrics> {
    let ns = sims.len();
    if ns < 2 {
        return Err(Error::Config(format!(
            "aggregation needs at least two simulations, got {ns}"
        )));
    }
    let p = reference.theta_true.len();
    let m = reference.r_true.len();
    let nq = reference.q_true.len();
    if let Some(bad) = sims
        .iter()
        .find(|s| s.theta_hat.len() != p || s.r_diag.len() != m || s.q_diag.len() != nq || s.p_theta.nrows() != p)
    {
        return Err(Error::Dimension {
            context: "simulation summary",
            expected: p,
            actual: bad.theta_hat.len(),
        });
    }
    if let Some(nr) = reference.nr {
        if nr.len() != ns {
            return Err(Error::Dimension {
                context: "reference results",
                expected: ns,
                actual: nr.len(),
            });
        }
    }

    let theta_col = |j: usize| -> Vec<f64> { sims.iter().map(|s| s.theta_hat[j]).collect() };
    let var_col = |j: usize| -> Vec<f64> { sims.iter().map(|s| s.p_theta[(j, j)].max(0.0)).collect() };

    let theta_ratio_true: Vec<Option<f64>> = (0..p)
        .map(|j| mean_ratio(sims.iter().map(|s| (s.theta_hat[j], reference.theta_true[j]))))
        .collect();
    let r_ratio_true: Vec<Option<f64>> = (0..m)
        .map(|i| mean_ratio(sims.iter().map(|s| (s.r_diag[i], reference.r_true[i]))))
        .collect();
    let q_ratio: Vec<Option<f64>> = (0..nq)
        .map(|i| mean_ratio(sims.iter().map(|s| (s.q_diag[i], reference.q_true[i]))))
        .collect();

    let (theta_ratio, r_ratio, crb_ratio, nr_metrics) = match reference.nr {
        Some(nr) => {
            let theta_ratio = (0..p)
                .map(|j| mean_ratio(sims.iter().zip(nr).map(|(s, n)| (s.theta_hat[j], n.theta_hat[j]))))
                .collect();
            let r_ratio = (0..m)
                .map(|i| mean_ratio(sims.iter().zip(nr).map(|(s, n)| (s.r_diag[i], n.r_hat[(i, i)]))))
                .collect();
            let crb_ratio = (0..p)
                .map(|j| {
                    mean_ratio(
                        sims.iter()
                            .zip(nr)
                            .map(|(s, n)| (s.p_theta[(j, j)].max(0.0).sqrt(), n.crb[j])),
                    )
                })
                .collect();
            let nr_theta = |j: usize| -> Vec<f64> { nr.iter().map(|n| n.theta_hat[j]).collect() };
            let nr_crb = |j: usize| -> Vec<f64> { nr.iter().map(|n| n.crb[j]).collect() };
            let metrics = NrMetrics {
                consistency_ratio: (0..p).map(|j| consistency(&nr_theta(j), &nr_crb(j))).collect(),
                spread_factor: (0..p)
                    .map(|j| {
                        let var: Vec<f64> = nr_crb(j).iter().map(|c| c * c).collect();
                        spread(reference.theta_true[j], &nr_theta(j), &var)
                    })
                    .collect(),
                theta_mean: (0..p).map(|j| mean(&nr_theta(j))).collect(),
                crb_mean: (0..p).map(|j| mean(&nr_crb(j))).collect(),
            };
            (theta_ratio, r_ratio, crb_ratio, Some(metrics))
        }
        None => (theta_ratio_true.clone(), r_ratio_true.clone(), vec![None; p], None),
    };

    let consistency_ratio = (0..p)
        .map(|j| {
            let sig: Vec<f64> = var_col(j).iter().map(|v| v.sqrt()).collect();
            consistency(&theta_col(j), &sig)
        })
        .collect();
    let spread_factor = (0..p)
        .map(|j| spread(reference.theta_true[j], &theta_col(j), &var_col(j)))
        .collect();

    let mut cost_mean = Vec::with_capacity(9);
    let mut cost_std = Vec::with_capacity(9);
    for i in 0..=8 {
        let vals: Option<Vec<f64>> = sims.iter().map(|s| s.costs.get(i)).collect();
        match vals {
            Some(v) => {
                cost_mean.push(Some(mean(&v)));
                cost_std.push(Some(population_std(&v)));
            }
            None => {
                cost_mean.push(None);
                cost_std.push(None);
            }
        }
    }

    let mut corr = DMatrix::zeros(p, p);
    for s in sims {
        corr += correlation(&s.p_theta);
    }
    corr /= ns as f64;
    for i in 0..p {
        corr[(i, i)] = 1.0;
    }

    Ok(McMetrics {
        n_sims: ns,
        theta_ratio,
        theta_ratio_true,
        crb_ratio,
        consistency_ratio,
        spread_factor,
        r_ratio,
        r_ratio_true,
        q_ratio,
        cost_mean,
        cost_std,
        correlation_matrix: corr,
        nr: nr_metrics,
    })
}
