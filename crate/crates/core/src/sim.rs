//! Ground-truth simulation, parameter perturbation and dataset files.
//!
//! Randomness comes from ChaCha20 ([`rand_chacha::ChaCha20Rng`]): the 64-bit
//! campaign seed keys the generator and each simulation reads its own stream,
//! so any simulation can be regenerated on its own. Gaussian draws use the
//! ziggurat sampler of `rand_distr::StandardNormal`. Both choices live in this
//! module only; changing either changes every dataset.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::psd_factor;
use crate::model::{measure, propagate, AugmentedState, Model};

/// Stream offsets within a simulation slot.
const NOISE_STREAM: u64 = 0;
const PERTURB_STREAM: u64 = 1;
const STREAMS_PER_SIM: u64 = 2;

/// Generator for one named stream of a seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream used for the measurement/process noise of simulation `sim_index`.
pub fn noise_stream(sim_index: u64) -> u64 {
    sim_index * STREAMS_PER_SIM + NOISE_STREAM
}

/// Stream used for the initial-parameter perturbation of simulation `sim_index`.
pub fn perturb_stream(sim_index: u64) -> u64 {
    sim_index * STREAMS_PER_SIM + PERTURB_STREAM
}

/// Measurement and process noise covariances used to generate data.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    /// m × m measurement-noise covariance.
    pub r: DMatrix<f64>,
    /// n × n process-noise covariance on the physical states.
    pub q: DMatrix<f64>,
}

impl NoiseSpec {
    pub fn diagonal(r: &[f64], q: &[f64]) -> Self {
        Self {
            r: crate::linalg::diag_matrix(r),
            q: crate::linalg::diag_matrix(q),
        }
    }
}

/// A simulated (or loaded) measurement record together with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub model_id: String,
    pub seed: u64,
    pub stream: u64,
    pub dt: f64,
    pub noise: NoiseSpec,
    pub theta_true: Vec<f64>,
    pub x0_true: Vec<f64>,
    /// `times[k]` is the time of measurement `k + 1`.
    pub times: Vec<f64>,
    pub z: Vec<DVector<f64>>,
    pub truth: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
    pub v: Vec<DVector<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// True augmented initial state `[x0_true, theta_true]`.
    pub fn truth_initial(&self) -> DVector<f64> {
        AugmentedState::new(self.x0_true.clone(), self.theta_true.clone()).to_vector()
    }

    pub fn validate_for(&self, model: &dyn Model) -> Result<()> {
        if self.model_id != model.id() {
            return Err(Error::ModelMismatch {
                expected: model.id().to_string(),
                found: self.model_id.clone(),
            });
        }
        if self.len() < 2 {
            return Err(Error::Malformed("a dataset needs at least two measurements".into()));
        }
        if let Some(bad) = self.z.iter().find(|z| z.len() != model.n_meas()) {
            return Err(Error::Dimension {
                context: "dataset measurement",
                expected: model.n_meas(),
                actual: bad.len(),
            });
        }
        Ok(())
    }
}

fn sample_gaussian(rng: &mut ChaCha20Rng, factor: &DMatrix<f64>) -> DVector<f64> {
    let n = factor.nrows();
    let z = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    factor * z
}

/// Simulate `n_steps` measurements on stream 0 of `seed`.
pub fn simulate(
    model: &dyn Model,
    x0_true: &AugmentedState,
    noise: &NoiseSpec,
    n_steps: usize,
    seed: u64,
) -> Result<Dataset> {
    simulate_stream(model, x0_true, noise, n_steps, seed, noise_stream(0))
}

/// Simulate `n_steps` measurements reading noise from an explicit stream.
///
/// `X_k = f(X_{k−1}) + [w_k; 0]`, `Z_k = h(X_k) + v_k`, with `w_k ~ N(0, Q)`
/// drawn before `v_k ~ N(0, R)` at every step.
pub fn simulate_stream(
    model: &dyn Model,
    x0_true: &AugmentedState,
    noise: &NoiseSpec,
    n_steps: usize,
    seed: u64,
    stream: u64,
) -> Result<Dataset> {
    let n = model.n_states();
    let m = model.n_meas();
    if n_steps < 2 {
        return Err(Error::Config("simulation needs N ≥ 2".into()));
    }
    if x0_true.x.len() != n || x0_true.theta.len() != model.n_params() {
        return Err(Error::Dimension {
            context: "simulation initial state",
            expected: model.n_aug(),
            actual: x0_true.x.len() + x0_true.theta.len(),
        });
    }
    if noise.q.nrows() != n || noise.q.ncols() != n {
        return Err(Error::Dimension {
            context: "process noise Q",
            expected: n,
            actual: noise.q.nrows(),
        });
    }
    if noise.r.nrows() != m || noise.r.ncols() != m {
        return Err(Error::Dimension {
            context: "measurement noise R",
            expected: m,
            actual: noise.r.nrows(),
        });
    }
    let lq = psd_factor(&noise.q)
        .ok_or_else(|| Error::Config("process noise Q is not symmetric positive semi-definite".into()))?;
    let lr = psd_factor(&noise.r).ok_or_else(|| {
        Error::Config("measurement noise R is not symmetric positive semi-definite".into())
    })?;

    let mut rng = stream_rng(seed, stream);
    let dt = model.dt();
    let mut state = x0_true.to_vector();
    let mut ds = Dataset {
        model_id: model.id().to_string(),
        seed,
        stream,
        dt,
        noise: noise.clone(),
        theta_true: x0_true.theta.clone(),
        x0_true: x0_true.x.clone(),
        times: Vec::with_capacity(n_steps),
        z: Vec::with_capacity(n_steps),
        truth: Vec::with_capacity(n_steps),
        w: Vec::with_capacity(n_steps),
        v: Vec::with_capacity(n_steps),
    };
    for k in 1..=n_steps {
        let t_prev = (k - 1) as f64 * dt;
        state = propagate(model, &state, t_prev, dt).map_err(|_| Error::PropagationDiverged { step: k })?;
        let w = sample_gaussian(&mut rng, &lq);
        let v = sample_gaussian(&mut rng, &lr);
        for i in 0..n {
            state[i] += w[i];
        }
        let z = measure(model, &state)? + &v;
        ds.times.push(k as f64 * dt);
        ds.z.push(z);
        ds.truth.push(state.clone());
        ds.w.push(w);
        ds.v.push(v);
    }
    Ok(ds)
}

/// Scale each component by an independent uniform factor in `[1 − fraction, 1 + fraction]`.
pub fn perturb_parameters(theta_true: &[f64], fraction: f64, seed: u64) -> Vec<f64> {
    perturb_parameters_with(theta_true, fraction, &mut stream_rng(seed, perturb_stream(0)))
}

pub fn perturb_parameters_with<R: Rng>(theta_true: &[f64], fraction: f64, rng: &mut R) -> Vec<f64> {
    theta_true
        .iter()
        .map(|&t| {
            let u: f64 = rng.random();
            t * (1.0 + fraction * (2.0 * u - 1.0))
        })
        .collect()
}

const FORMAT: &str = "kftune-dataset";
const VERSION: u32 = 1;
const LAYOUT: &str = "column-major: Z[j][k], truth[i][k], w[i][k], v[j][k] hold channel j / state i \
at times[k]; R and Q are listed column by column; times[k] = (k + 1) * dt";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    layout: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    header: Header,
    model_id: String,
    seed: u64,
    stream: u64,
    dt: f64,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "R")]
    r: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    q: Vec<Vec<f64>>,
    theta_true: Vec<f64>,
    x0_true: Vec<f64>,
    times: Vec<f64>,
    #[serde(rename = "Z")]
    z: Vec<Vec<f64>>,
    truth: Vec<Vec<f64>>,
    w: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

fn to_columns(seq: &[DVector<f64>]) -> Vec<Vec<f64>> {
    let dim = seq.first().map_or(0, |v| v.len());
    (0..dim).map(|i| seq.iter().map(|v| v[i]).collect()).collect()
}

fn matrix_columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

fn from_columns(field: &str, cols: &[Vec<f64>], n: usize) -> Result<Vec<DVector<f64>>> {
    if let Some((i, c)) = cols.iter().enumerate().find(|(_, c)| c.len() != n) {
        return Err(Error::Malformed(format!(
            "field '{field}' column {i} has {} entries, expected N = {n}",
            c.len()
        )));
    }
    Ok((0..n)
        .map(|k| DVector::from_iterator(cols.len(), cols.iter().map(|c| c[k])))
        .collect())
}

fn matrix_from_columns(field: &str, cols: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let dim = cols.len();
    if cols.iter().any(|c| c.len() != dim) {
        return Err(Error::Malformed(format!("field '{field}' is not a square matrix")));
    }
    Ok(DMatrix::from_fn(dim, dim, |i, j| cols[j][i]))
}

/// Write a dataset as JSON. Floats are written in shortest round-trip form.
pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = DatasetFile {
        header: Header {
            format: FORMAT.into(),
            version: VERSION,
            layout: LAYOUT.into(),
        },
        model_id: ds.model_id.clone(),
        seed: ds.seed,
        stream: ds.stream,
        dt: ds.dt,
        n: ds.len(),
        r: matrix_columns(&ds.noise.r),
        q: matrix_columns(&ds.noise.q),
        theta_true: ds.theta_true.clone(),
        x0_true: ds.x0_true.clone(),
        times: ds.times.clone(),
        z: to_columns(&ds.z),
        truth: to_columns(&ds.truth),
        w: to_columns(&ds.w),
        v: to_columns(&ds.v),
    };
    let text = serde_json::to_string_pretty(&file).expect("dataset serializes");
    fs::write(path, text)?;
    Ok(())
}

/// Read a dataset written by [`save_dataset`].
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let file: DatasetFile = serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.display().to_string(),
        source,
    })?;
    if file.header.format != FORMAT || file.header.version != VERSION {
        return Err(Error::Malformed(format!(
            "unsupported header {} v{}",
            file.header.format, file.header.version
        )));
    }
    let n = file.n;
    if n < 2 {
        return Err(Error::Malformed("field 'N' must be at least 2".into()));
    }
    if file.times.len() != n {
        return Err(Error::Malformed(format!(
            "field 'times' has {} entries, expected N = {n}",
            file.times.len()
        )));
    }
    if file.times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Malformed("field 'times' is not strictly increasing".into()));
    }
    if file.z.is_empty() {
        return Err(Error::Malformed("field 'Z' has no channels".into()));
    }
    let ds = Dataset {
        model_id: file.model_id,
        seed: file.seed,
        stream: file.stream,
        dt: file.dt,
        noise: NoiseSpec {
            r: matrix_from_columns("R", &file.r)?,
            q: matrix_from_columns("Q", &file.q)?,
        },
        theta_true: file.theta_true,
        x0_true: file.x0_true,
        times: file.times,
        z: from_columns("Z", &file.z, n)?,
        truth: from_columns("truth", &file.truth, n)?,
        w: from_columns("w", &file.w, n)?,
        v: from_columns("v", &file.v, n)?,
    };
    if ds.noise.r.nrows() != ds.z[0].len() {
        return Err(Error::Malformed(format!(
            "field 'R' is {}×{} but Z has {} channels",
            ds.noise.r.nrows(),
            ds.noise.r.nrows(),
            ds.z[0].len()
        )));
    }
    Ok(ds)
}

/// Load a dataset and check that it was produced by `expected_model`.
pub fn load_dataset_for(path: &Path, expected_model: &str) -> Result<Dataset> {
    let ds = load_dataset(path)?;
    if ds.model_id != expected_model {
        return Err(Error::ModelMismatch {
            expected: expected_model.to_string(),
            found: ds.model_id,
        });
    }
    Ok(ds)
}
