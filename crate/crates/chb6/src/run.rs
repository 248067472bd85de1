//! Run layer: JSON configuration, synthetic field construction, output
//! writers, and the four pipelines (`simulate`, `optimize`, `verify`,
//! `sweep`) behind the command-line interface.
//!
//! # Configuration
//!
//! A run is a single JSON document; unknown keys anywhere are an error so a
//! typo cannot silently fall back to a default:
//!
//! ```json
//! {
//!   "grid":    { "sizes": [32, 32], "lengths": [6.283185307, 6.283185307] },
//!   "time":    { "t_final": 0.5, "n_steps": 50 },
//!   "physics": {
//!     "eta": 1.0,
//!     "lambda": { "type": "smooth", "min": 1.0, "max": 3.0 },
//!     "nu": 1.0,
//!     "sigma": 0.1,
//!     "h": { "type": "tanh", "amplitude": 0.2 },
//!     "potential": { "type": "quartic" }
//!   },
//!   "control": { "M": 10.0, "beta": [1.0, 1.0, 1.0, 1.0], "kappa": 0.01 },
//!   "targets": {
//!     "v_q":   { "type": "solenoidal_mode", "amplitude": 0.5, "wavevector": [1, 0] },
//!     "phi_q": { "type": "constant", "value": 0.0 },
//!     "phi_t": { "type": "mode", "amplitude": 0.3, "wavevector": [1, 1] }
//!   },
//!   "phi0":   { "type": "random", "amplitude": 0.4, "decay": 2.0 },
//!   "output": { "snapshot_every": 10, "seed": 7 }
//! }
//! ```
//!
//! `time.kappa_s` overrides the default stabilization shift. An optional
//! top-level `"g"` gives the control used by `simulate` (held constant in
//! time; `optimize` uses it as the starting iterate). An optional
//! `"kappa_sweep": [0.0, 0.01, ...]` lists the sparsity weights for the
//! sweep pipeline.
//!
//! Random fields draw from a ChaCha20 stream seeded by `output.seed` mixed
//! with a per-role salt, so every synthetic input is reproducible from the
//! single seed; a `random` spec may also pin its own `seed`.
//!
//! # Outputs
//!
//! All files land in the output directory, chosen by (in order) the CLI
//! `--out` flag, `output.out_dir`, the `CHB6_OUT` environment variable, or
//! `./chb6-out`:
//!
//! * `series.csv` — one row per time step: step, time, energy, spatial
//!   mean, max |φ|, velocity norm (empty on the final row: no interval
//!   starts there), and the mean-balance residual (empty at step 0).
//! * `optimize.csv` — one row per optimizer iterate with the cost split,
//!   stationarity residual, accepted step size, and zero fraction.
//! * `verify.csv`, `verify.json` — the verification battery report.
//! * `sweep.csv` — one row per sparsity weight in a sweep.
//! * `snapshots/` — raw fields. Each snapshot is a small JSON header
//!   (`dim`, `sizes`, `lengths`, `step`, `time`, `dtype: "f64le"`,
//!   `order: "row_major"`) naming its payload file(s); payloads are flat
//!   little-endian f64 nodal values in row-major order, one file per
//!   component for vector fields.
//! * `control/` — the final control as one vector snapshot per time
//!   interval plus `index.json`.
//! * `metadata.json` — package version, command, the full configuration
//!   echoed back, and a summary of the outcome. Contains nothing
//!   wall-clock dependent, so repeated runs are byte-identical.
//! * `plots.gp` — a gnuplot script rendering the CSVs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::model::{ControlParams, PhysParams, Series, Targets};
use crate::optim::{optimize, OptimError, OptimizeOutcome};
use crate::solver::{solve_state, Control, SolverError, StepDiagnostics, TimeGrid};
use crate::spectral::{random_smooth, random_smooth_vector, Field, Grid, VectorField};
use crate::verify::{CheckResult, VerifyReport, CHECK_NAMES};

/// Everything that can abort a pipeline, with the process exit code each
/// case maps to. A verify run whose checks fail is *not* an error (the
/// report is the product); the CLI turns `all_pass == false` into exit 1.
#[derive(Debug, thiserror::Error)]
pub enum RunError {
    /// Unusable configuration or command line: exit code 2.
    #[error("configuration error: {0}")]
    Config(String),
    /// Forward/adjoint solver breakdown: exit code 3.
    #[error("solver error: {0}")]
    Solver(#[from] SolverError),
    /// Optimizer breakdown (line search failure, non-finite cost): exit
    /// code 4. Reaching the iteration cap is *not* an error; it is recorded
    /// as `converged = false`.
    #[error("optimizer error: {0}")]
    Optimizer(OptimError),
    /// Filesystem trouble reading inputs or writing outputs: exit code 2.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    /// CSV serialization trouble: exit code 2.
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl From<OptimError> for RunError {
    fn from(e: OptimError) -> Self {
        match e {
            OptimError::Solver(s) => RunError::Solver(s),
            other => RunError::Optimizer(other),
        }
    }
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Io(_) | RunError::Csv(_) => 2,
            RunError::Solver(_) => 3,
            RunError::Optimizer(_) => 4,
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration schema
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub sizes: Vec<usize>,
    pub lengths: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub t_final: f64,
    pub n_steps: usize,
    /// Stabilization shift; defaults to max(ν, 0) + 2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_s: Option<f64>,
}

/// Synthetic scalar field.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScalarFieldSpec {
    /// Uniform value.
    Constant { value: f64 },
    /// amplitude · cos(2π m·x/L + phase) + offset for integer mode m.
    Mode {
        amplitude: f64,
        wavevector: Vec<i64>,
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        offset: f64,
    },
    /// Band-limited noise with the given amplitude and spectral decay.
    Random { amplitude: f64, decay: f64, #[serde(default)] seed: Option<u64> },
}

/// Synthetic vector field.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum VectorFieldSpec {
    Zero,
    /// Uniform vector, one entry per axis.
    Constant { values: Vec<f64> },
    /// Divergence-free single mode: amplitude · d · cos(2π m·x/L + phase)
    /// with d ⊥ k (in 2-D the rotation of k, in 3-D a normalized k × e).
    SolenoidalMode {
        amplitude: f64,
        wavevector: Vec<i64>,
        #[serde(default)]
        phase: f64,
    },
    /// Band-limited noise per component (not divergence-free).
    Random { amplitude: f64, decay: f64, #[serde(default)] seed: Option<u64> },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetsConfig {
    pub v_q: VectorFieldSpec,
    pub phi_q: ScalarFieldSpec,
    pub phi_t: ScalarFieldSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Snapshot cadence in steps; 0 keeps only the initial and final state.
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
    /// Seed for every synthetic random field in the run.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn default_snapshot_every() -> usize {
    10
}

fn default_seed() -> u64 {
    7
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { snapshot_every: default_snapshot_every(), seed: default_seed(), out_dir: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub time: TimeConfig,
    pub physics: PhysParams,
    pub control: ControlParams,
    pub targets: TargetsConfig,
    pub phi0: ScalarFieldSpec,
    /// Control field: held fixed by `simulate`, starting iterate for
    /// `optimize`. Defaults to zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g: Option<VectorFieldSpec>,
    #[serde(default)]
    pub output: OutputConfig,
    /// Sparsity weights for the sweep pipeline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_sweep: Option<Vec<f64>>,
}

/// Per-role salts mixed into `output.seed` so distinct synthetic fields
/// draw from distinct streams.
mod seed_salt {
    pub const PHI0: u64 = 0x9e37_79b9_0000_0001;
    pub const V_Q: u64 = 0x9e37_79b9_0000_0002;
    pub const PHI_Q: u64 = 0x9e37_79b9_0000_0003;
    pub const PHI_T: u64 = 0x9e37_79b9_0000_0004;
    pub const G: u64 = 0x9e37_79b9_0000_0005;
}

impl std::str::FromStr for RunConfig {
    type Err = RunError;

    fn from_str(text: &str) -> Result<RunConfig, RunError> {
        serde_json::from_str(text).map_err(|e| RunError::Config(e.to_string()))
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<RunConfig, RunError> {
        let text = fs::read_to_string(path).map_err(|e| {
            RunError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        text.parse()
    }

    /// Build the concrete problem the pipelines run on. All synthetic
    /// fields are projected onto the dealiased band here, so downstream
    /// code never sees content the solvers would discard anyway.
    pub fn assemble(&self) -> Result<Assembled, RunError> {
        let dim = self.grid.sizes.len();
        if !(2..=3).contains(&dim) {
            return Err(RunError::Config(format!(
                "grid must be 2- or 3-dimensional, got {dim} axes"
            )));
        }
        if self.grid.lengths.len() != dim {
            return Err(RunError::Config(format!(
                "grid.sizes has {dim} axes but grid.lengths has {}",
                self.grid.lengths.len()
            )));
        }
        let grid = Grid::new(&self.grid.sizes, &self.grid.lengths)
            .map_err(|e| RunError::Config(e.to_string()))?;
        let time = TimeGrid::new(self.time.t_final, self.time.n_steps)
            .map_err(|e| RunError::Config(e.to_string()))?;
        self.physics.validate().map_err(RunError::Config)?;
        self.control.validate().map_err(RunError::Config)?;
        let kappa_s = self.time.kappa_s.unwrap_or_else(|| self.physics.default_stabilization());
        if kappa_s < 0.0 {
            return Err(RunError::Config(format!(
                "time.kappa_s must be nonnegative, got {kappa_s}"
            )));
        }

        let seed = self.output.seed;
        let phi0 = build_scalar(&self.phi0, &grid, seed ^ seed_salt::PHI0)?.dealiased();
        let targets = Targets {
            v_q: Series::Constant(mask_vector(&build_vector(
                &self.targets.v_q,
                &grid,
                seed ^ seed_salt::V_Q,
            )?)),
            phi_q: Series::Constant(
                build_scalar(&self.targets.phi_q, &grid, seed ^ seed_salt::PHI_Q)?.dealiased(),
            ),
            phi_t: build_scalar(&self.targets.phi_t, &grid, seed ^ seed_salt::PHI_T)?
                .dealiased(),
        };
        let g_field = match &self.g {
            None => VectorField::zeros(&grid),
            Some(spec) => mask_vector(&build_vector(spec, &grid, seed ^ seed_salt::G)?),
        };
        let g0 = Control::from_intervals(
            (0..self.time.n_steps).map(|_| g_field.clone()).collect(),
        );

        Ok(Assembled {
            grid,
            time,
            physics: self.physics.clone(),
            control: self.control.clone(),
            targets,
            phi0,
            g0,
            kappa_s,
            snapshot_every: self.output.snapshot_every,
        })
    }
}

/// A fully constructed problem instance.
pub struct Assembled {
    pub grid: Arc<Grid>,
    pub time: TimeGrid,
    pub physics: PhysParams,
    pub control: ControlParams,
    pub targets: Targets,
    pub phi0: Field,
    pub g0: Control,
    pub kappa_s: f64,
    pub snapshot_every: usize,
}

fn mask_vector(v: &VectorField) -> VectorField {
    VectorField { comps: v.comps.iter().map(|c| c.dealiased()).collect() }
}

fn check_mode(grid: &Arc<Grid>, wavevector: &[i64]) -> Result<(), RunError> {
    if wavevector.len() != grid.dim() {
        return Err(RunError::Config(format!(
            "wavevector has {} entries for a {}-dimensional grid",
            wavevector.len(),
            grid.dim()
        )));
    }
    for (axis, (&m, &size)) in wavevector.iter().zip(grid.sizes()).enumerate() {
        let band = (size / 3) as i64;
        if m.abs() > band {
            return Err(RunError::Config(format!(
                "mode {m} on axis {axis} is outside the dealiased band |m| <= {band}"
            )));
        }
    }
    Ok(())
}

fn build_scalar(
    spec: &ScalarFieldSpec,
    grid: &Arc<Grid>,
    default_seed: u64,
) -> Result<Field, RunError> {
    use rand::SeedableRng;
    Ok(match spec {
        ScalarFieldSpec::Constant { value } => Field::constant(grid, *value),
        ScalarFieldSpec::Mode { amplitude, wavevector, phase, offset } => {
            check_mode(grid, wavevector)?;
            let k: Vec<f64> = wavevector
                .iter()
                .zip(grid.lengths())
                .map(|(&m, &l)| 2.0 * std::f64::consts::PI * m as f64 / l)
                .collect();
            let (a, ph, off) = (*amplitude, *phase, *offset);
            Field::from_fn(grid, |x| {
                let arg: f64 = x.iter().zip(&k).map(|(xi, ki)| xi * ki).sum();
                a * (arg + ph).cos() + off
            })
        }
        ScalarFieldSpec::Random { amplitude, decay, seed } => {
            let mut rng =
                rand_chacha::ChaCha20Rng::seed_from_u64(seed.unwrap_or(default_seed));
            random_smooth(grid, &mut rng, *amplitude, *decay)
        }
    })
}

fn build_vector(
    spec: &VectorFieldSpec,
    grid: &Arc<Grid>,
    default_seed: u64,
) -> Result<VectorField, RunError> {
    use rand::SeedableRng;
    Ok(match spec {
        VectorFieldSpec::Zero => VectorField::zeros(grid),
        VectorFieldSpec::Constant { values } => {
            if values.len() != grid.dim() {
                return Err(RunError::Config(format!(
                    "constant vector has {} entries for a {}-dimensional grid",
                    values.len(),
                    grid.dim()
                )));
            }
            VectorField::from_comps(values.iter().map(|&v| Field::constant(grid, v)).collect())
        }
        VectorFieldSpec::SolenoidalMode { amplitude, wavevector, phase } => {
            check_mode(grid, wavevector)?;
            if wavevector.iter().all(|&m| m == 0) {
                return Err(RunError::Config(
                    "solenoidal_mode needs a nonzero wavevector".into(),
                ));
            }
            let k: Vec<f64> = wavevector
                .iter()
                .zip(grid.lengths())
                .map(|(&m, &l)| 2.0 * std::f64::consts::PI * m as f64 / l)
                .collect();
            // A direction orthogonal to k: the rotation in 2-D, k × e in 3-D
            // with e the axis least aligned with k.
            let dir: Vec<f64> = if grid.dim() == 2 {
                let norm = (k[0] * k[0] + k[1] * k[1]).sqrt();
                vec![-k[1] / norm, k[0] / norm]
            } else {
                let axis = (0..3).min_by(|&a, &b| {
                    k[a].abs().partial_cmp(&k[b].abs()).unwrap()
                }).unwrap();
                let mut e = [0.0; 3];
                e[axis] = 1.0;
                let cross = [
                    k[1] * e[2] - k[2] * e[1],
                    k[2] * e[0] - k[0] * e[2],
                    k[0] * e[1] - k[1] * e[0],
                ];
                let norm = cross.iter().map(|c| c * c).sum::<f64>().sqrt();
                cross.iter().map(|c| c / norm).collect()
            };
            let (a, ph) = (*amplitude, *phase);
            VectorField::from_comps(
                (0..grid.dim())
                    .map(|c| {
                        let (k, d) = (k.clone(), dir[c]);
                        Field::from_fn(grid, move |x| {
                            let arg: f64 = x.iter().zip(&k).map(|(xi, ki)| xi * ki).sum();
                            a * d * (arg + ph).cos()
                        })
                    })
                    .collect(),
            )
        }
        VectorFieldSpec::Random { amplitude, decay, seed } => {
            let mut rng =
                rand_chacha::ChaCha20Rng::seed_from_u64(seed.unwrap_or(default_seed));
            random_smooth_vector(grid, &mut rng, *amplitude, *decay)
        }
    })
}

/// Output directory precedence: CLI flag, then `output.out_dir`, then the
/// `CHB6_OUT` environment variable, then `./chb6-out`.
pub fn resolve_out_dir(cli: Option<&Path>, cfg: Option<&Path>) -> PathBuf {
    if let Some(p) = cli {
        return p.to_path_buf();
    }
    if let Some(p) = cfg {
        return p.to_path_buf();
    }
    if let Ok(env) = std::env::var("CHB6_OUT") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("chb6-out")
}

// ---------------------------------------------------------------------------
// Output writers
// ---------------------------------------------------------------------------

fn write_series_csv(path: &Path, steps: &[StepDiagnostics]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "t", "energy", "mean", "max_abs_phi", "v_norm", "mean_ode_residual"])?;
    for s in steps {
        w.write_record([
            s.step.to_string(),
            format!("{:.12e}", s.time),
            format!("{:.12e}", s.energy),
            format!("{:.12e}", s.mean),
            format!("{:.12e}", s.max_abs_phi),
            s.v_norm.map(|v| format!("{v:.12e}")).unwrap_or_default(),
            s.mean_ode_residual.map(|r| format!("{r:.12e}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_optimize_csv(path: &Path, rows: &[crate::optim::OptimizeRow]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "iter",
        "tracking_v",
        "tracking_phi",
        "terminal",
        "tikhonov",
        "sparsity",
        "total",
        "residual",
        "alpha",
        "sparsity_fraction",
    ])?;
    for r in rows {
        w.write_record([
            r.iter.to_string(),
            format!("{:.12e}", r.tracking_v),
            format!("{:.12e}", r.tracking_phi),
            format!("{:.12e}", r.terminal),
            format!("{:.12e}", r.tikhonov),
            format!("{:.12e}", r.sparsity),
            format!("{:.12e}", r.total),
            format!("{:.12e}", r.residual),
            format!("{:.12e}", r.alpha),
            format!("{:.6}", r.sparsity_fraction),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Header of one raw snapshot; payloads are flat little-endian f64 nodal
/// values in row-major order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub kind: String,
    pub dim: usize,
    pub sizes: Vec<usize>,
    pub lengths: Vec<f64>,
    pub step: usize,
    pub time: f64,
    pub dtype: String,
    pub order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payloads: Option<Vec<String>>,
}

fn payload_bytes(field: &Field) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(field.data().len() * 8);
    for v in field.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), RunError> {
    let mut file = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, value).map_err(std::io::Error::other)?;
    file.write_all(b"\n")?;
    Ok(())
}

pub fn write_scalar_snapshot(
    dir: &Path,
    stem: &str,
    step: usize,
    time: f64,
    field: &Field,
) -> Result<(), RunError> {
    let grid = field.grid();
    let payload = format!("{stem}.bin");
    fs::write(dir.join(&payload), payload_bytes(field))?;
    let header = SnapshotHeader {
        kind: "scalar".into(),
        dim: grid.dim(),
        sizes: grid.sizes().to_vec(),
        lengths: grid.lengths().to_vec(),
        step,
        time,
        dtype: "f64le".into(),
        order: "row_major".into(),
        payload: Some(payload),
        payloads: None,
    };
    write_json(&dir.join(format!("{stem}.json")), &header)
}

pub fn write_vector_snapshot(
    dir: &Path,
    stem: &str,
    step: usize,
    time: f64,
    field: &VectorField,
) -> Result<(), RunError> {
    let grid = field.grid();
    let mut payloads = Vec::new();
    for (c, comp) in field.comps.iter().enumerate() {
        let payload = format!("{stem}_c{c}.bin");
        fs::write(dir.join(&payload), payload_bytes(comp))?;
        payloads.push(payload);
    }
    let header = SnapshotHeader {
        kind: "vector".into(),
        dim: grid.dim(),
        sizes: grid.sizes().to_vec(),
        lengths: grid.lengths().to_vec(),
        step,
        time,
        dtype: "f64le".into(),
        order: "row_major".into(),
        payload: None,
        payloads: Some(payloads),
    };
    write_json(&dir.join(format!("{stem}.json")), &header)
}

/// Read back a snapshot header and its payload(s), one flat nodal vector
/// per component.
pub fn read_snapshot(header_path: &Path) -> Result<(SnapshotHeader, Vec<Vec<f64>>), RunError> {
    let text = fs::read_to_string(header_path)?;
    let header: SnapshotHeader =
        serde_json::from_str(&text).map_err(|e| RunError::Config(e.to_string()))?;
    if header.dtype != "f64le" {
        return Err(RunError::Config(format!("unsupported dtype {}", header.dtype)));
    }
    let dir = header_path.parent().unwrap_or(Path::new("."));
    let names: Vec<String> = match (&header.payload, &header.payloads) {
        (Some(p), None) => vec![p.clone()],
        (None, Some(ps)) => ps.clone(),
        _ => return Err(RunError::Config("snapshot header names no payload".into())),
    };
    let mut comps = Vec::new();
    for name in names {
        let bytes = fs::read(dir.join(&name))?;
        if bytes.len() % 8 != 0 {
            return Err(RunError::Config(format!("payload {name} is not a multiple of 8 bytes")));
        }
        comps.push(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
    }
    Ok((header, comps))
}

#[derive(Serialize)]
struct ControlIndex {
    n_steps: usize,
    dt: f64,
    t_final: f64,
    intervals: Vec<String>,
}

fn write_control(dir: &Path, g: &Control, time: &TimeGrid) -> Result<(), RunError> {
    fs::create_dir_all(dir)?;
    let dt = time.dt();
    let mut intervals = Vec::new();
    for (n, field) in g.intervals().iter().enumerate() {
        let stem = format!("g_{n:06}");
        write_vector_snapshot(dir, &stem, n, n as f64 * dt, field)?;
        intervals.push(format!("{stem}.json"));
    }
    let index = ControlIndex {
        n_steps: g.n_steps(),
        dt,
        t_final: time.t_final,
        intervals,
    };
    write_json(&dir.join("index.json"), &index)
}

fn snapshot_steps(n_steps: usize, every: usize) -> Vec<usize> {
    let mut steps = vec![0];
    if every > 0 {
        let mut n = every;
        while n < n_steps {
            steps.push(n);
            n += every;
        }
    }
    if n_steps > 0 {
        steps.push(n_steps);
    }
    steps.dedup();
    steps
}

fn write_snapshots(
    out_dir: &Path,
    traj: &crate::solver::StateTrajectory,
    time: &TimeGrid,
    every: usize,
) -> Result<usize, RunError> {
    let dir = out_dir.join("snapshots");
    fs::create_dir_all(&dir)?;
    let dt = time.dt();
    let steps = snapshot_steps(time.n_steps, every);
    for &n in &steps {
        write_scalar_snapshot(&dir, &format!("phi_{n:06}"), n, n as f64 * dt, &traj.phi[n])?;
        if n < time.n_steps {
            write_vector_snapshot(&dir, &format!("v_{n:06}"), n, n as f64 * dt, &traj.v[n])?;
        }
    }
    Ok(steps.len())
}

const PLOTS_SERIES: &str = r#"set datafile separator comma
set key autotitle columnhead noenhanced
set grid
set terminal pngcairo size 1200,900
set output 'series.png'
set multiplot layout 2,2 title 'state evolution'
plot 'series.csv' using 2:3 with lines lw 2 title 'energy'
plot 'series.csv' using 2:4 with lines lw 2 title 'spatial mean'
plot 'series.csv' using 2:5 with lines lw 2 title 'max |phi|'
plot 'series.csv' using 2:6 with lines lw 2 title 'velocity norm'
unset multiplot
"#;

const PLOTS_OPTIMIZE: &str = r#"set output 'optimize.png'
set multiplot layout 1,2 title 'optimization'
set logscale y
plot 'optimize.csv' using 1:7 with linespoints title 'total cost'
plot 'optimize.csv' using 1:8 with linespoints title 'stationarity residual'
unset logscale y
unset multiplot
"#;

const PLOTS_SWEEP: &str = r#"set datafile separator comma
set key autotitle columnhead noenhanced
set grid
set terminal pngcairo size 1200,500
set output 'sweep.png'
set multiplot layout 1,2 title 'sparsity weight sweep'
plot 'sweep.csv' using 2:11 with linespoints title 'zero fraction'
plot 'sweep.csv' using 2:5 with linespoints title 'total cost'
unset multiplot
"#;

fn write_plots(out_dir: &Path, sections: &[&str]) -> Result<(), RunError> {
    let mut text = String::from("# Render with: gnuplot plots.gp\n");
    for s in sections {
        text.push_str(s);
    }
    fs::write(out_dir.join("plots.gp"), text)?;
    Ok(())
}

fn write_metadata(
    out_dir: &Path,
    command: &str,
    config: Option<&RunConfig>,
    outcome: serde_json::Value,
) -> Result<(), RunError> {
    let metadata = serde_json::json!({
        "package": "chb6",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": config,
        "outcome": outcome,
    });
    write_json(&out_dir.join("metadata.json"), &metadata)
}

// ---------------------------------------------------------------------------
// Pipelines
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct SimulateSummary {
    pub n_steps: usize,
    pub final_energy: f64,
    pub final_mean: f64,
    pub max_abs_phi: f64,
    pub snapshots: usize,
}

pub fn run_simulate(cfg: &RunConfig, out_dir: &Path) -> Result<SimulateSummary, RunError> {
    let a = cfg.assemble()?;
    fs::create_dir_all(out_dir)?;
    let traj = solve_state(&a.phi0, &a.g0, &a.time, &a.physics, a.kappa_s)?;
    write_series_csv(&out_dir.join("series.csv"), &traj.steps)?;
    let snapshots = write_snapshots(out_dir, &traj, &a.time, a.snapshot_every)?;
    write_plots(out_dir, &[PLOTS_SERIES])?;
    let last = traj.steps.last().expect("at least the initial step");
    let summary = SimulateSummary {
        n_steps: a.time.n_steps,
        final_energy: last.energy,
        final_mean: last.mean,
        max_abs_phi: traj.steps.iter().map(|s| s.max_abs_phi).fold(0.0, f64::max),
        snapshots,
    };
    write_metadata(
        out_dir,
        "simulate",
        Some(cfg),
        serde_json::to_value(&summary).map_err(std::io::Error::other)?,
    )?;
    Ok(summary)
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimizeSummary {
    pub converged: bool,
    pub iterations: usize,
    pub cost_total: f64,
    pub tracking_v: f64,
    pub tracking_phi: f64,
    pub terminal: f64,
    pub tikhonov: f64,
    pub sparsity_cost: f64,
    pub residual: f64,
    pub sparsity_fraction: f64,
    pub control_norm: f64,
}

impl OptimizeSummary {
    fn from_outcome(out: &OptimizeOutcome, dt: f64) -> OptimizeSummary {
        let last = out.rows.last().expect("optimizer reports at least one row");
        OptimizeSummary {
            converged: out.converged,
            iterations: out.iterations,
            cost_total: out.cost.total(),
            tracking_v: out.cost.tracking_v,
            tracking_phi: out.cost.tracking_phi,
            terminal: out.cost.terminal,
            tikhonov: out.cost.tikhonov,
            sparsity_cost: out.cost.sparsity,
            residual: last.residual,
            sparsity_fraction: last.sparsity_fraction,
            control_norm: out.control.norm_q(dt),
        }
    }
}

/// Run the optimizer, reporting each visited iterate through `on_iter`
/// (the CLI prints progress there; pass `|_| {}` otherwise).
pub fn run_optimize(
    cfg: &RunConfig,
    out_dir: &Path,
    mut on_iter: impl FnMut(&crate::optim::OptimizeRow),
) -> Result<OptimizeSummary, RunError> {
    let a = cfg.assemble()?;
    fs::create_dir_all(out_dir)?;
    let out = optimize(
        &a.phi0,
        &a.g0,
        &a.targets,
        &a.control,
        &a.time,
        &a.physics,
        a.kappa_s,
        &mut on_iter,
    )?;
    write_optimize_csv(&out_dir.join("optimize.csv"), &out.rows)?;
    write_series_csv(&out_dir.join("series.csv"), &out.trajectory.steps)?;
    write_snapshots(out_dir, &out.trajectory, &a.time, a.snapshot_every)?;
    write_control(&out_dir.join("control"), &out.control, &a.time)?;
    write_plots(out_dir, &[PLOTS_SERIES, PLOTS_OPTIMIZE])?;
    let summary = OptimizeSummary::from_outcome(&out, a.time.dt());
    write_metadata(
        out_dir,
        "optimize",
        Some(cfg),
        serde_json::to_value(&summary).map_err(std::io::Error::other)?,
    )?;
    Ok(summary)
}

fn write_verify_outputs(out_dir: &Path, report: &VerifyReport) -> Result<(), RunError> {
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("verify.csv"))?;
    w.write_record(["name", "value", "threshold", "pass", "seconds", "detail"])?;
    for c in &report.checks {
        w.write_record([
            c.name.to_string(),
            format!("{:.6e}", c.value),
            format!("{:.6e}", c.threshold),
            c.pass.to_string(),
            format!("{:.3}", c.seconds),
            c.detail.clone(),
        ])?;
    }
    w.flush()?;
    write_json(&out_dir.join("verify.json"), &serde_json::json!({
        "all_pass": report.all_pass(),
        "checks": report.checks,
    }))?;
    write_metadata(
        out_dir,
        "verify",
        None,
        serde_json::json!({
            "all_pass": report.all_pass(),
            "passed": report.checks.iter().filter(|c| c.pass).count(),
            "failed": report.checks.iter().filter(|c| !c.pass).count(),
        }),
    )
}

/// Run the verification battery (optionally a named subset; `determinism`
/// is valid here in addition to the library checks) and write the report.
/// A failing check is reported, not raised: inspect
/// [`VerifyReport::all_pass`].
pub fn run_verify(
    out_dir: &Path,
    only: Option<&[String]>,
    mutate: bool,
) -> Result<VerifyReport, RunError> {
    let want_determinism = match only {
        None => true,
        Some(list) => {
            for n in list {
                if n != "determinism" && !CHECK_NAMES.contains(&n.as_str()) {
                    return Err(RunError::Config(format!(
                        "unknown check '{n}'; available: {}, determinism",
                        CHECK_NAMES.join(", ")
                    )));
                }
            }
            list.iter().any(|n| n == "determinism")
        }
    };
    let lib_selection: Option<Vec<String>> = only.map(|list| {
        list.iter().filter(|n| n.as_str() != "determinism").cloned().collect()
    });
    let mut report = match &lib_selection {
        None => crate::verify::run_selected(None, mutate).map_err(RunError::Config)?,
        Some(names) => {
            crate::verify::run_selected(Some(names), mutate).map_err(RunError::Config)?
        }
    };
    if want_determinism {
        report.checks.push(determinism_check());
    }
    write_verify_outputs(out_dir, &report)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub index: usize,
    pub kappa: f64,
    pub dir: String,
    #[serde(flatten)]
    pub summary: OptimizeSummary,
}

/// Optimize once per sparsity weight in `kappa_sweep`, each into its own
/// subdirectory, fanning out over `threads` worker threads. Outputs are
/// independent of the thread count: every weight gets a self-contained run
/// and `sweep.csv` is assembled in weight order after all runs finish.
pub fn run_sweep(
    cfg: &RunConfig,
    out_dir: &Path,
    threads: usize,
) -> Result<SweepSummary, RunError> {
    let kappas = cfg
        .kappa_sweep
        .clone()
        .ok_or_else(|| RunError::Config("sweep requires a kappa_sweep list".into()))?;
    if kappas.is_empty() {
        return Err(RunError::Config("kappa_sweep must not be empty".into()));
    }
    if kappas.iter().any(|k| !k.is_finite() || *k < 0.0) {
        return Err(RunError::Config("kappa_sweep entries must be finite and >= 0".into()));
    }
    cfg.assemble()?; // fail fast on a bad base configuration
    fs::create_dir_all(out_dir)?;

    let workers = threads.max(1).min(kappas.len());
    let next = AtomicUsize::new(0);
    let mut results: Vec<Option<Result<SweepRow, RunError>>> =
        (0..kappas.len()).map(|_| None).collect();
    let slots: Vec<std::sync::Mutex<&mut Option<Result<SweepRow, RunError>>>> =
        results.iter_mut().map(std::sync::Mutex::new).collect();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= kappas.len() {
                    break;
                }
                let mut sub_cfg = cfg.clone();
                sub_cfg.control.kappa = kappas[i];
                sub_cfg.kappa_sweep = None;
                let dir_name = format!("kappa_{i:02}");
                let sub_dir = out_dir.join(&dir_name);
                let result = run_optimize(&sub_cfg, &sub_dir, |_| {}).map(|summary| SweepRow {
                    index: i,
                    kappa: kappas[i],
                    dir: dir_name,
                    summary,
                });
                **slots[i].lock().unwrap() = Some(result);
            });
        }
    });

    let mut rows = Vec::with_capacity(kappas.len());
    for slot in results {
        rows.push(slot.expect("every sweep index was claimed by a worker")?);
    }

    let mut w = csv::Writer::from_path(out_dir.join("sweep.csv"))?;
    w.write_record([
        "index",
        "kappa",
        "converged",
        "iterations",
        "cost_total",
        "tracking_v",
        "tracking_phi",
        "terminal",
        "tikhonov",
        "sparsity_cost",
        "sparsity_fraction",
        "control_norm",
        "residual",
        "dir",
    ])?;
    for r in &rows {
        w.write_record([
            r.index.to_string(),
            format!("{:.12e}", r.kappa),
            r.summary.converged.to_string(),
            r.summary.iterations.to_string(),
            format!("{:.12e}", r.summary.cost_total),
            format!("{:.12e}", r.summary.tracking_v),
            format!("{:.12e}", r.summary.tracking_phi),
            format!("{:.12e}", r.summary.terminal),
            format!("{:.12e}", r.summary.tikhonov),
            format!("{:.12e}", r.summary.sparsity_cost),
            format!("{:.6}", r.summary.sparsity_fraction),
            format!("{:.12e}", r.summary.control_norm),
            format!("{:.12e}", r.summary.residual),
            r.dir.clone(),
        ])?;
    }
    w.flush()?;
    write_plots(out_dir, &[PLOTS_SWEEP])?;
    write_metadata(
        out_dir,
        "sweep",
        Some(cfg),
        serde_json::json!({
            "runs": rows.len(),
            "all_converged": rows.iter().all(|r| r.summary.converged),
        }),
    )?;
    Ok(SweepSummary { rows })
}

// ---------------------------------------------------------------------------
// Determinism check (the battery's eleventh entry)
// ---------------------------------------------------------------------------

/// A pinned config exercising every synthetic-field builder and the full
/// simulate pipeline.
fn determinism_config() -> RunConfig {
    serde_json::from_value(serde_json::json!({
        "grid": { "sizes": [12, 12], "lengths": [1.0, 1.0] },
        "time": { "t_final": 0.016, "n_steps": 16 },
        "physics": {
            "eta": 0.8,
            "lambda": { "type": "smooth", "min": 1.0, "max": 2.0 },
            "nu": 0.7,
            "sigma": 0.3,
            "h": { "type": "tanh", "amplitude": 0.2 },
            "potential": { "type": "quartic" }
        },
        "control": { "M": 10.0, "beta": [1.0, 1.0, 1.0, 1.0], "kappa": 0.0 },
        "targets": {
            "v_q": { "type": "solenoidal_mode", "amplitude": 0.4, "wavevector": [1, 0] },
            "phi_q": { "type": "constant", "value": 0.0 },
            "phi_t": { "type": "mode", "amplitude": 0.3, "wavevector": [1, 1] }
        },
        "phi0": { "type": "random", "amplitude": 0.4, "decay": 2.0 },
        "g": { "type": "random", "amplitude": 0.5, "decay": 2.0 },
        "output": { "snapshot_every": 4, "seed": 42 }
    }))
    .expect("pinned determinism config is valid")
}

fn walk_files(root: &Path) -> Result<Vec<PathBuf>, RunError> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    files.sort();
    Ok(files)
}

/// Run the pinned simulate config twice into scratch directories and demand
/// byte-identical output trees.
pub fn determinism_check() -> CheckResult {
    let started = std::time::Instant::now();
    let run = || -> Result<(usize, usize), RunError> {
        let unique = format!(
            "chb6-determinism-{}-{}",
            std::process::id(),
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_nanos())
                .unwrap_or(0)
        );
        let base = std::env::temp_dir().join(unique);
        let cfg = determinism_config();
        let dir_a = base.join("a");
        let dir_b = base.join("b");
        let outcome = (|| {
            run_simulate(&cfg, &dir_a)?;
            run_simulate(&cfg, &dir_b)?;
            let files_a = walk_files(&dir_a)?;
            let files_b = walk_files(&dir_b)?;
            let mut differing = 0;
            if files_a != files_b {
                differing += files_a.iter().filter(|f| !files_b.contains(f)).count()
                    + files_b.iter().filter(|f| !files_a.contains(f)).count();
            }
            for f in &files_a {
                if files_b.contains(f) && fs::read(dir_a.join(f))? != fs::read(dir_b.join(f))? {
                    differing += 1;
                }
            }
            Ok((differing, files_a.len()))
        })();
        let _ = fs::remove_dir_all(&base);
        outcome
    };
    match run() {
        Ok((differing, compared)) => CheckResult {
            name: "determinism",
            value: differing as f64,
            threshold: 0.0,
            pass: differing == 0 && compared >= 5,
            seconds: started.elapsed().as_secs_f64(),
            detail: format!(
                "{compared} files byte-compared across two runs, {differing} differ"
            ),
        },
        Err(e) => CheckResult {
            name: "determinism",
            value: f64::INFINITY,
            threshold: 0.0,
            pass: false,
            seconds: started.elapsed().as_secs_f64(),
            detail: format!("aborted: {e}"),
        },
    }
}
