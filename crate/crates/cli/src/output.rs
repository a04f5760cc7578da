//! CSV tables written next to the JSON results.

use kftune_core::campaign::{ComparisonReport, MonteCarloReport, SimRecord};
use kftune_core::linalg::diag_vec;
use kftune_core::model::{measure, Model};
use kftune_core::rrr::{FinalPasses, IterationRecord};
use kftune_core::sim::Dataset;

use crate::error::CliError;

fn num(x: f64) -> String {
    x.to_string()
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (0..n).map(move |i| format!("{prefix}_{i}"))
}

fn to_csv(header: Vec<String>, rows: Vec<Vec<String>>) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Usage(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One row per iteration: `iteration, J0..J8`, regularization counts, events.
pub fn costs_csv(history: &[IterationRecord]) -> Result<String, CliError> {
    let mut header: Vec<String> = vec!["iteration".into()];
    header.extend((0..=8).map(|i| format!("J{i}")));
    header.extend(["reg_s1", "reg_s2", "reg_s3", "reg_w1", "reg_w2", "reg_w3"].map(String::from));
    header.extend(["ridge_events", "clamp_events", "max_rel_change"].map(String::from));
    let rows = history
        .iter()
        .map(|h| {
            let c = &h.costs;
            let mut row = vec![h.iteration.to_string(), opt(c.j0)];
            row.extend(c.j1_to_j8().into_iter().map(num));
            let reg = &c.reg;
            row.extend([reg.s1, reg.s2, reg.s3, reg.w1, reg.w2, reg.w3].map(|v| v.to_string()));
            row.push(h.ridge_events.to_string());
            row.push(h.clamp_events.to_string());
            row.push(opt(h.max_rel_change));
            row
        })
        .collect();
    to_csv(header, rows)
}

/// Statistics entering and leaving every iteration: `Θ0`, diag P0/Q/R, `Θ_{N|N}`, diag `P_Θ`.
pub fn statistics_csv(history: &[IterationRecord]) -> Result<String, CliError> {
    let Some(first) = history.first() else {
        return to_csv(vec!["iteration".into()], Vec::new());
    };
    let mut header: Vec<String> = vec!["iteration".into()];
    header.extend(indexed("theta0", first.theta0.len()));
    header.extend(indexed("p0", first.p0_diag.len()));
    header.extend(indexed("q", first.q_diag.len()));
    header.extend(indexed("r", first.r_diag.len()));
    header.extend(indexed("theta", first.theta_final.len()));
    header.extend(indexed("p_theta", first.p_theta_diag.len()));
    let rows = history
        .iter()
        .map(|h| {
            let mut row = vec![h.iteration.to_string()];
            for v in [&h.theta0, &h.p0_diag, &h.q_diag, &h.r_diag, &h.theta_final, &h.p_theta_diag] {
                row.extend(v.iter().copied().map(num));
            }
            row
        })
        .collect();
    to_csv(header, rows)
}

/// Filtered estimates of every pass laid end to end on a cumulative time axis.
///
/// Pass `i` (1-based) occupies `t ∈ ((i−1)·N·dt, i·N·dt]`.
#[derive(Debug, Default)]
pub struct CumulativeTrace {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl CumulativeTrace {
    pub fn record(&mut self, iteration: usize, passes: &FinalPasses) {
        let f = &passes.filter;
        let n = f.len();
        let dim = f.x0.len();
        if self.header.is_empty() {
            self.header = vec!["iteration".into(), "k".into(), "t".into()];
            self.header.extend(indexed("x", dim));
            self.header.extend(indexed("sigma", dim));
        }
        let offset = (iteration - 1) as f64 * n as f64 * f.dt;
        for (idx, s) in f.steps.iter().enumerate() {
            let k = idx + 1;
            let mut row = vec![iteration.to_string(), k.to_string(), num(offset + k as f64 * f.dt)];
            row.extend(s.x_post.iter().copied().map(num));
            row.extend(s.p_post.diagonal().iter().map(|p| num(p.max(0.0).sqrt())));
            self.rows.push(row);
        }
    }

    pub fn to_csv(self) -> Result<String, CliError> {
        let header = if self.header.is_empty() {
            vec!["iteration".into(), "k".into(), "t".into()]
        } else {
            self.header
        };
        to_csv(header, self.rows)
    }
}

/// Measurements against the model outputs of the final pass: `t`, then per
/// channel `z`, `h(Xd)`, `h(X_{k|k})`, `h(X_{k|N})`. Exactly one row per sample,
/// or only the header when no pass completed.
pub fn overlay_csv(model: &dyn Model, ds: &Dataset, passes: Option<&FinalPasses>) -> Result<String, CliError> {
    let m = model.n_meas();
    let mut header: Vec<String> = vec!["t".into()];
    for j in 0..m {
        header.extend([format!("z_{j}"), format!("hd_{j}"), format!("hpost_{j}"), format!("hsmooth_{j}")]);
    }
    let Some(p) = passes else {
        return to_csv(header, Vec::new());
    };
    let mut rows = Vec::with_capacity(ds.len());
    for (idx, z) in ds.z.iter().enumerate() {
        let k = idx + 1;
        let hd = measure(model, &p.dynamical.xd[k])?;
        let hp = measure(model, &p.filter.steps[idx].x_post)?;
        let hs = measure(model, &p.smoother.x_smooth[k])?;
        let mut row = vec![num(ds.times[idx])];
        for j in 0..m {
            row.extend([num(z[j]), num(hd[j]), num(hp[j]), num(hs[j])]);
        }
        rows.push(row);
    }
    to_csv(header, rows)
}

/// One row per simulation of a campaign.
pub fn per_sim_csv(sims: &[SimRecord]) -> Result<String, CliError> {
    let Some(first) = sims.first() else {
        return to_csv(vec!["sim".into()], Vec::new());
    };
    let np = first.theta_init.len();
    let m = first.tuning.r_hat.nrows();
    let ns = first.tuning.q_hat.nrows();
    let mut header: Vec<String> = ["sim", "noise_stream", "perturb_stream", "converged", "diverged", "iterations"]
        .map(String::from)
        .to_vec();
    header.extend(indexed("theta_init", np));
    header.extend(indexed("theta", np));
    header.extend(indexed("sigma_theta", np));
    header.extend(indexed("r", m));
    header.extend(indexed("q", ns));
    header.extend((1..=8).map(|i| format!("J{i}")));
    header.extend(indexed("nr_theta", np));
    header.extend(indexed("nr_crb", np));
    header.extend(indexed("nr_r", m));
    header.push("whiteness_inside".into());
    let rows = sims
        .iter()
        .map(|s| {
            let t = &s.tuning;
            let mut row = vec![
                s.index.to_string(),
                s.noise_stream.to_string(),
                s.perturb_stream.to_string(),
                t.converged.to_string(),
                t.diverged.clone().unwrap_or_default(),
                t.iterations_used.to_string(),
            ];
            row.extend(s.theta_init.iter().copied().map(num));
            row.extend(t.theta_hat.iter().copied().map(num));
            row.extend(t.p_theta.diagonal().iter().map(|p| num(p.max(0.0).sqrt())));
            row.extend(diag_vec(&t.r_hat).into_iter().map(num));
            row.extend(diag_vec(&t.q_hat).into_iter().map(num));
            match t.final_costs() {
                Some(c) => row.extend(c.j1_to_j8().into_iter().map(num)),
                None => row.extend(std::iter::repeat_n(String::new(), 8)),
            }
            match &s.nr {
                Some(nr) => {
                    row.extend(nr.theta_hat.iter().copied().map(num));
                    row.extend(nr.crb.iter().copied().map(num));
                    row.extend(diag_vec(&nr.r_hat).into_iter().map(num));
                }
                None => row.extend(std::iter::repeat_n(String::new(), 2 * np + m)),
            }
            row.push(opt(s.whiteness_inside));
            row
        })
        .collect();
    to_csv(header, rows)
}

fn metric_cells(v: Option<&Vec<Option<f64>>>, n: usize) -> Vec<String> {
    match v {
        Some(v) => v.iter().copied().map(opt).collect(),
        None => vec![String::new(); n],
    }
}

/// One row per compared method.
pub fn comparison_csv(report: &ComparisonReport) -> Result<String, CliError> {
    let Some(first) = report.methods.first() else {
        return to_csv(vec!["method".into()], Vec::new());
    };
    let rows_of = |r: &MonteCarloReport| -> Vec<String> {
        let a = &r.aggregate;
        let np = r.sims.first().map(|s| s.theta_init.len()).unwrap_or(0);
        let m = r.sims.first().map(|s| s.tuning.r_hat.nrows()).unwrap_or(0);
        let ns = r.sims.first().map(|s| s.tuning.q_hat.nrows()).unwrap_or(0);
        let mm = a.metrics.as_ref();
        let mut row = vec![
            a.method.clone(),
            a.n_sims.to_string(),
            a.n_used.to_string(),
            a.n_converged.to_string(),
            a.n_diverged.to_string(),
            num(a.mean_iterations),
        ];
        row.extend(metric_cells(mm.map(|m| &m.theta_ratio), np));
        row.extend(metric_cells(mm.map(|m| &m.crb_ratio), np));
        row.extend(metric_cells(mm.map(|m| &m.consistency_ratio), np));
        row.extend(metric_cells(mm.map(|m| &m.spread_factor), np));
        row.extend(metric_cells(mm.map(|m| &m.r_ratio), m));
        row.extend(metric_cells(mm.map(|m| &m.q_ratio), ns));
        row.extend(match mm {
            Some(m) => m.cost_mean[1..].iter().copied().map(opt).collect(),
            None => vec![String::new(); 8],
        });
        row.push(a.flags.all_converged.to_string());
        row.push(a.flags.r_drift.to_string());
        row.push(num(a.flags.cost_oscillation));
        row
    };
    let np = first.sims.first().map(|s| s.theta_init.len()).unwrap_or(0);
    let m = first.sims.first().map(|s| s.tuning.r_hat.nrows()).unwrap_or(0);
    let ns = first.sims.first().map(|s| s.tuning.q_hat.nrows()).unwrap_or(0);
    let mut header: Vec<String> = ["method", "n_sims", "n_used", "n_converged", "n_diverged", "mean_iterations"]
        .map(String::from)
        .to_vec();
    header.extend(indexed("theta_ratio", np));
    header.extend(indexed("crb_ratio", np));
    header.extend(indexed("consistency", np));
    header.extend(indexed("spread", np));
    header.extend(indexed("r_ratio", m));
    header.extend(indexed("q_ratio", ns));
    header.extend((1..=8).map(|i| format!("J{i}")));
    header.extend(["all_converged", "r_drift", "cost_oscillation"].map(String::from));
    to_csv(header, report.methods.iter().map(rows_of).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use kftune_core::campaign::CampaignConfig;
    use kftune_core::model::SpringMassDamper;
    use kftune_core::rrr::{run_rrr_observed, StartPoint};

    #[test]
    fn tables_have_expected_shapes() {
        let model = SpringMassDamper::default();
        let mut cfg = CampaignConfig::smd(false);
        cfg.tuning.max_iters = 3;
        let (ds, theta) = cfg.simulation(&model, 0).unwrap();
        let mut trace = CumulativeTrace::default();
        let start = StartPoint {
            x0: cfg.truth.x0.clone(),
            theta,
        };
        let res = run_rrr_observed(&model, &ds, &cfg.tuning, &start, &mut |i, p| trace.record(i, p)).unwrap();
        let iters = res.history.len();

        let costs = costs_csv(&res.history).unwrap();
        assert_eq!(costs.lines().count(), iters + 1);
        assert!(costs.starts_with("iteration,J0,J1,"));

        let trace = trace.to_csv().unwrap();
        let lines: Vec<&str> = trace.lines().collect();
        assert_eq!(lines.len(), iters * 100 + 1);
        let t_last: f64 = lines.last().unwrap().split(',').nth(2).unwrap().parse().unwrap();
        assert!((t_last - iters as f64 * 100.0 * 0.1).abs() < 1e-9);

        let overlay = overlay_csv(&model, &ds, res.final_passes.as_ref()).unwrap();
        assert_eq!(overlay.lines().count(), 101);
        assert_eq!(overlay.lines().next().unwrap().split(',').count(), 1 + 4 * 2);
        let empty = overlay_csv(&model, &ds, None).unwrap();
        assert_eq!(empty.lines().count(), 1);

        let stats = statistics_csv(&res.history).unwrap();
        assert_eq!(stats.lines().count(), iters + 1);
        assert_eq!(statistics_csv(&[]).unwrap().lines().count(), 1);
    }
}
