use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kftune_cli::config::load_config;
use kftune_cli::{execute, report, rerun, CliError, Job, JobInputs, Outcome};
use kftune_core::campaign::THREADS_ENV;

#[derive(Parser)]
#[command(name = "kftune", version, about = "Tune extended Kalman filter statistics by iterated filtering and smoothing")]
struct Cli {
    /// Maximum number of worker threads (also read from KFTUNE_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON campaign configuration; omitted fields take defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a configuration entry, e.g. `tuning.max_iters=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (defaults to `output_dir` from the configuration).
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Single {
    #[command(flatten)]
    common: Common,
    /// Simulation index selecting the noise and perturbation streams.
    #[arg(long, default_value_t = 0)]
    sim: usize,
    /// Use this dataset file instead of simulating one.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one dataset.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        sim: usize,
    },
    /// Tune the filter on one dataset.
    Tune(Single),
    /// Output-error Gauss-Newton estimate on one dataset.
    Nr(Single),
    /// Monte-Carlo campaign of the configured recipe.
    Montecarlo {
        #[command(flatten)]
        common: Common,
    },
    /// Run every configured method on the same datasets.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Repeat the job recorded in a manifest.
    Rerun {
        manifest: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Summarize an output directory.
    Report { dir: PathBuf },
}

fn run_job(job: Job, common: Common, inputs: JobInputs) -> Result<Outcome, CliError> {
    let cfg = load_config(common.config.as_deref(), &common.overrides)?;
    let out = common
        .out
        .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set output_dir".into()))?;
    execute(job, &cfg, &inputs, &out)
}

fn dispatch(command: Command) -> Result<Option<Outcome>, CliError> {
    let outcome = match command {
        Command::Simulate { common, sim } => run_job(Job::Simulate, common, JobInputs { sim, data: None })?,
        Command::Tune(s) => run_job(Job::Tune, s.common, JobInputs { sim: s.sim, data: s.data })?,
        Command::Nr(s) => run_job(Job::Nr, s.common, JobInputs { sim: s.sim, data: s.data })?,
        Command::Montecarlo { common } => run_job(Job::Montecarlo, common, JobInputs::default())?,
        Command::Compare { common } => run_job(Job::Compare, common, JobInputs::default())?,
        Command::Rerun { manifest, out } => rerun(&manifest, &out)?,
        Command::Report { dir } => {
            print!("{}", report(&dir)?);
            return Ok(None);
        }
    };
    Ok(Some(outcome))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        // Set before any worker pool exists.
        std::env::set_var(THREADS_ENV, n.to_string());
    }
    match dispatch(cli.command) {
        Ok(Some(outcome)) => {
            for name in &outcome.manifest.outputs {
                println!("{name}");
            }
            match outcome.failure {
                Some(reason) => {
                    eprintln!("kftune: numerical failure: {reason}");
                    ExitCode::from(2)
                }
                None => ExitCode::SUCCESS,
            }
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kftune: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
