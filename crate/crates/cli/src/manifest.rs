//! Run manifests: everything needed to reproduce an output directory.

use std::fs;
use std::path::Path;

use kftune_core::campaign::CampaignConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TOOL: &str = "kftune";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Job {
    Simulate,
    Tune,
    Nr,
    Montecarlo,
    Compare,
}

impl Job {
    pub fn name(self) -> &'static str {
        match self {
            Job::Simulate => "simulate",
            Job::Tune => "tune",
            Job::Nr => "nr",
            Job::Montecarlo => "montecarlo",
            Job::Compare => "compare",
        }
    }
}

/// A dataset file used as input, pinned by content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataRef {
    pub path: String,
    pub sha256: String,
}

impl DataRef {
    pub fn read(path: &Path) -> Result<(Self, Vec<u8>), CliError> {
        let bytes = fs::read(path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let r = DataRef {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        };
        Ok((r, bytes))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimStreams {
    pub sim: usize,
    pub noise: u64,
    pub perturb: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub job: Job,
    /// Simulation index for single-dataset jobs.
    pub sim: Option<usize>,
    pub data: Option<DataRef>,
    pub seed: u64,
    pub streams: Vec<SimStreams>,
    pub config: CampaignConfig,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(job: Job, config: &CampaignConfig, sim: Option<usize>, data: Option<DataRef>) -> Self {
        let sims: Vec<usize> = match job {
            Job::Montecarlo | Job::Compare => (0..config.tuning.n_sims).collect(),
            _ => sim.into_iter().collect(),
        };
        let streams = sims
            .into_iter()
            .map(|i| {
                let (noise, perturb) = config.streams(i);
                SimStreams { sim: i, noise, perturb }
            })
            .collect();
        Self {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            job,
            sim,
            data,
            seed: config.seed,
            streams,
            config: config.clone(),
            outputs: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let m: Manifest = serde_json::from_str(&text).map_err(|source| CliError::Json {
            context: path.display().to_string(),
            source,
        })?;
        if m.tool != TOOL {
            return Err(CliError::Usage(format!("{} is not a {TOOL} manifest", path.display())));
        }
        m.config.validate()?;
        Ok(m)
    }
}
