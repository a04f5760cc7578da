//! Job execution: every job writes its outputs plus a manifest into one directory.

use std::fs;
use std::path::{Path, PathBuf};

use kftune_core::campaign::{run_comparison, run_monte_carlo, CampaignConfig, ComparisonReport, MonteCarloReport};
use kftune_core::model::{model_from_id, Model};
use kftune_core::nr::nr_estimate;
use kftune_core::rrr::{run_rrr_observed, StartPoint};
use kftune_core::sim::{load_dataset_for, save_dataset, Dataset};
use serde::Serialize;

use crate::error::CliError;
use crate::manifest::{sha256_hex, DataRef, Job, Manifest, MANIFEST_FILE};
use crate::output::{comparison_csv, costs_csv, overlay_csv, per_sim_csv, statistics_csv, CumulativeTrace};

/// What a job needs besides the configuration.
#[derive(Debug, Clone, Default)]
pub struct JobInputs {
    /// Simulation index for single-dataset jobs.
    pub sim: usize,
    /// Dataset file to use instead of simulating.
    pub data: Option<PathBuf>,
}

/// Outputs written by a job; `failure` is set when the numerics broke down.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub manifest: Manifest,
    pub failure: Option<String>,
}

struct Writer<'a> {
    dir: &'a Path,
    written: Vec<String>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self { dir, written: Vec::new() })
    }

    fn text(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| CliError::Io {
                path: parent.display().to_string(),
                source,
            })?;
        }
        fs::write(&path, contents).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.written.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json {
            context: name.to_string(),
            source,
        })?;
        text.push('\n');
        self.text(name, &text)
    }

    fn finish(mut self, mut manifest: Manifest) -> Result<Manifest, CliError> {
        self.written.sort();
        manifest.outputs = self.written.clone();
        self.json(MANIFEST_FILE, &manifest)?;
        Ok(manifest)
    }
}

fn dataset_for(
    model: &dyn Model,
    cfg: &CampaignConfig,
    inputs: &JobInputs,
) -> Result<(Dataset, Option<DataRef>), CliError> {
    match &inputs.data {
        Some(path) => {
            let (data_ref, _) = DataRef::read(path)?;
            let ds = load_dataset_for(path, &cfg.model)?;
            if ds.dt != cfg.dt {
                return Err(CliError::Usage(format!(
                    "dataset dt {} differs from configured dt {}",
                    ds.dt, cfg.dt
                )));
            }
            Ok((ds, Some(data_ref)))
        }
        None => Ok((cfg.simulation(model, inputs.sim)?.0, None)),
    }
}

/// Run `job` and write its outputs into `out`.
pub fn execute(job: Job, cfg: &CampaignConfig, inputs: &JobInputs, out: &Path) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let model = model_from_id(&cfg.model, cfg.dt)?;
    let model = model.as_ref();
    let mut w = Writer::new(out)?;
    let mut failure = None;
    let manifest = match job {
        Job::Simulate => {
            let (ds, _) = cfg.simulation(model, inputs.sim)?;
            let path = out.join("dataset.json");
            save_dataset(&ds, &path)?;
            w.written.push("dataset.json".into());
            Manifest::new(job, cfg, Some(inputs.sim), None)
        }
        Job::Tune => {
            let (ds, data) = dataset_for(model, cfg, inputs)?;
            let start = StartPoint {
                x0: cfg.truth.x0.clone(),
                theta: cfg.initial_theta(inputs.sim),
            };
            let mut trace = CumulativeTrace::default();
            let result = run_rrr_observed(model, &ds, &cfg.tuning, &start, &mut |i, p| trace.record(i, p))?;
            w.json("tuning.json", &result)?;
            w.text("costs.csv", &costs_csv(&result.history)?)?;
            w.text("statistics.csv", &statistics_csv(&result.history)?)?;
            w.text("trace.csv", &trace.to_csv()?)?;
            w.text("overlay.csv", &overlay_csv(model, &ds, result.final_passes.as_ref())?)?;
            failure = result.diverged.clone();
            Manifest::new(job, cfg, Some(inputs.sim), data)
        }
        Job::Nr => {
            let (ds, data) = dataset_for(model, cfg, inputs)?;
            let result = nr_estimate(model, &ds, &cfg.initial_theta(inputs.sim), &cfg.nr)?;
            w.json("nr.json", &result)?;
            Manifest::new(job, cfg, Some(inputs.sim), data)
        }
        Job::Montecarlo => {
            let report = run_monte_carlo(model, cfg)?;
            write_campaign(&mut w, &report, "")?;
            w.json("aggregate.json", &report.aggregate)?;
            Manifest::new(job, cfg, None, None)
        }
        Job::Compare => {
            let report = run_comparison(model, cfg)?;
            write_comparison(&mut w, &report)?;
            Manifest::new(job, cfg, None, None)
        }
    };
    let manifest = w.finish(manifest)?;
    Ok(Outcome { manifest, failure })
}

fn write_campaign(w: &mut Writer<'_>, report: &MonteCarloReport, prefix: &str) -> Result<(), CliError> {
    w.text(&format!("{prefix}per_sim.csv"), &per_sim_csv(&report.sims)?)?;
    for s in &report.sims {
        w.text(
            &format!("{prefix}sims/sim_{:03}_costs.csv", s.index),
            &costs_csv(&s.tuning.history)?,
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct ComparisonSummary<'a> {
    reference: kftune_core::campaign::ReferenceKind,
    nr: Option<&'a kftune_core::metrics::NrMetrics>,
    methods: Vec<&'a kftune_core::campaign::CampaignAggregate>,
}

fn write_comparison(w: &mut Writer<'_>, report: &ComparisonReport) -> Result<(), CliError> {
    w.text("comparison.csv", &comparison_csv(report)?)?;
    w.json(
        "comparison.json",
        &ComparisonSummary {
            reference: report.reference,
            nr: report.nr.as_ref(),
            methods: report.methods.iter().map(|m| &m.aggregate).collect(),
        },
    )?;
    for m in &report.methods {
        write_campaign(w, m, &format!("{}/", m.aggregate.method))?;
    }
    Ok(())
}

/// Re-run the job recorded in a manifest into `out`.
pub fn rerun(manifest_path: &Path, out: &Path) -> Result<Outcome, CliError> {
    let m = Manifest::load(manifest_path)?;
    let data = match &m.data {
        Some(d) => {
            let path = PathBuf::from(&d.path);
            let bytes = fs::read(&path).map_err(|source| CliError::Io {
                path: d.path.clone(),
                source,
            })?;
            if sha256_hex(&bytes) != d.sha256 {
                return Err(CliError::Usage(format!("{} changed since the manifest was written", d.path)));
            }
            Some(path)
        }
        None => None,
    };
    let inputs = JobInputs {
        sim: m.sim.unwrap_or(0),
        data,
    };
    execute(m.job, &m.config, &inputs, out)
}

/// Human-readable summary of an output directory.
pub fn report(dir: &Path) -> Result<String, CliError> {
    let m = Manifest::load(&dir.join(MANIFEST_FILE))?;
    let read = |name: &str| -> Result<serde_json::Value, CliError> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            context: path.display().to_string(),
            source,
        })
    };
    let mut out = format!(
        "{} {} job, model {}, N={}, dt={}, seed {}\n",
        m.tool,
        m.job.name(),
        m.config.model,
        m.config.n,
        m.config.dt,
        m.seed
    );
    let line = |label: &str, v: &serde_json::Value| format!("  {label:<18} {}\n", compact(v));
    match m.job {
        Job::Simulate => out.push_str("  dataset.json\n"),
        Job::Tune => {
            let t = read("tuning.json")?;
            for key in ["theta_hat", "iterations_used", "converged", "diverged"] {
                out.push_str(&line(key, &t[key]));
            }
            out.push_str(&line("final costs", &t["history"].as_array().and_then(|h| h.last()).map(|h| h["costs"].clone()).unwrap_or_default()));
        }
        Job::Nr => {
            let t = read("nr.json")?;
            for key in ["theta_hat", "crb", "iterations", "converged"] {
                out.push_str(&line(key, &t[key]));
            }
        }
        Job::Montecarlo => {
            let a = read("aggregate.json")?;
            out.push_str(&aggregate_lines(&a));
        }
        Job::Compare => {
            let c = read("comparison.json")?;
            for a in c["methods"].as_array().into_iter().flatten() {
                out.push_str(&aggregate_lines(a));
            }
        }
    }
    Ok(out)
}

fn compact(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Number(n) if n.is_f64() => format!("{:.6}", n.as_f64().unwrap_or(f64::NAN)),
        serde_json::Value::Array(a) => format!("[{}]", a.iter().map(compact).collect::<Vec<_>>().join(", ")),
        serde_json::Value::Object(o) => o
            .iter()
            .map(|(k, v)| format!("{k}={}", compact(v)))
            .collect::<Vec<_>>()
            .join(" "),
        other => other.to_string(),
    }
}

fn aggregate_lines(a: &serde_json::Value) -> String {
    let mut out = format!(
        "method {}: {} sims, {} used, {} converged, {} diverged\n",
        a["method"].as_str().unwrap_or("?"),
        a["n_sims"],
        a["n_used"],
        a["n_converged"],
        a["n_diverged"]
    );
    let m = &a["metrics"];
    for key in ["theta_ratio", "crb_ratio", "consistency_ratio", "spread_factor", "r_ratio", "q_ratio", "cost_mean"] {
        if !m[key].is_null() {
            out.push_str(&format!("  {key:<18} {}\n", compact(&m[key])));
        }
    }
    out.push_str(&format!("  {:<18} {}\n", "flags", compact(&a["flags"])));
    out
}
