//! Run configuration: TOML ingestion, defaults, overrides and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use nsf_core::extended::StoppingConfig;
use nsf_core::fields::{Grid, ScalarField, State, VectorField};
use nsf_core::metric::{make_observable, Functional, MetricConfig, Observable, ObservableKind};
use nsf_core::solver::{Forcing, Parameters, SolverConfig};
use nsf_core::statistics::{DataDistribution, SllnConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse configuration: {0}")]
    Parse(String),
    #[error("configuration rejected:\n  {}", .0.join("\n  "))]
    Rejected(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Solve,
    Stability,
    MetricProbe,
    Ensemble,
    SllnStudy,
    MarkovCheck,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Solve => "solve",
            Self::Stability => "stability",
            Self::MetricProbe => "metric-probe",
            Self::Ensemble => "ensemble",
            Self::SllnStudy => "slln-study",
            Self::MarkovCheck => "markov-check",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub dim: usize,
    pub n: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { dim: 1, n: 32 }
    }
}

/// Spatially constant body force and heat source.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ForcingSpec {
    /// Body force; empty means zero, otherwise one entry per axis.
    pub g: Vec<f64>,
    pub heat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialSpec {
    /// Constant state with the given velocity (empty means zero).
    Constant { rho: f64, theta: f64, u: Vec<f64> },
    /// Member `member` of the configured data distribution.
    Sample { member: u64 },
}

impl Default for InitialSpec {
    fn default() -> Self {
        Self::Sample { member: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleSpec {
    pub members: usize,
    /// Empty selects the default pair (cutoff mass, windowed density moment).
    pub observables: Vec<ObservableKind>,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self { members: 64, observables: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilitySpec {
    pub deltas: Vec<f64>,
    pub time: f64,
}

impl Default for StabilitySpec {
    fn default() -> Self {
        Self { deltas: vec![1e-2, 1e-3, 1e-4], time: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSpec {
    /// Amplitudes of the velocity mode added along the probe ray.
    pub amplitudes: Vec<f64>,
    pub s: f64,
    pub t: f64,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self { amplitudes: (0..12).map(|j| 2f64.powi(j)).collect(), s: 0.05, t: 0.05 }
    }
}

/// One member of the finite parameter set of a product-form check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSpec {
    pub weight: f64,
    /// Overrides `forcing.heat`.
    pub heat: Option<f64>,
    /// Overrides `params`.
    pub params: Option<Parameters>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { weight: 1.0, heat: None, params: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarkovSpec {
    pub lambda: f64,
    pub s: f64,
    pub t: f64,
    pub members: usize,
    /// Amplitude of the second law in the mixture (seed + 1).
    pub second_sigma: f64,
    /// Empty means the single configured model with weight 1.
    pub models: Vec<ModelSpec>,
}

impl Default for MarkovSpec {
    fn default() -> Self {
        Self { lambda: 0.5, s: 0.05, t: 0.05, members: 16, second_sigma: 0.2, models: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub mode: Mode,
    pub seed: u64,
    /// Worker threads; 0 uses the available parallelism. Never affects results.
    pub workers: usize,
    pub out_dir: PathBuf,
    pub grid: GridSpec,
    pub params: Parameters,
    pub forcing: ForcingSpec,
    pub solver: SolverConfig,
    pub stopping: StoppingConfig,
    pub metric: MetricConfig,
    pub distribution: DataDistribution,
    pub initial: InitialSpec,
    /// Query times (sorted); the last one is the horizon of single runs.
    pub times: Vec<f64>,
    pub ensemble: EnsembleSpec,
    pub stability: StabilitySpec,
    pub probe: ProbeSpec,
    pub slln: SllnConfig,
    pub markov: MarkovSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode: Mode::default(),
            seed: 0,
            workers: 0,
            out_dir: PathBuf::from("nsf-out"),
            grid: GridSpec::default(),
            params: Parameters::default(),
            forcing: ForcingSpec::default(),
            solver: SolverConfig::default(),
            stopping: StoppingConfig::default(),
            metric: MetricConfig::default(),
            distribution: DataDistribution::default(),
            initial: InitialSpec::default(),
            times: vec![0.1],
            ensemble: EnsembleSpec::default(),
            stability: StabilitySpec::default(),
            probe: ProbeSpec::default(),
            slln: SllnConfig::default(),
            markov: MarkovSpec::default(),
        }
    }
}

/// Parsed configuration with the warnings raised while reading it.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub config: RunConfig,
    pub warnings: Vec<String>,
}

/// Reads and validates a TOML file. Unknown keys only produce warnings.
pub fn ingest_config(path: &Path) -> Result<Ingested, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let ingested = parse_config(&text)?;
    ingested.config.validate()?;
    Ok(ingested)
}

/// Parses TOML text without validating it.
pub fn parse_config(text: &str) -> Result<Ingested, ConfigError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    let mut warnings = Vec::new();
    let missing_version = !table.contains_key("schema_version");
    if table.get("distribution").and_then(|d| d.get("seed")).is_some() {
        warnings.push("distribution.seed is ignored; the top-level seed drives sampling".into());
    }
    if table.get("solver").and_then(|d| d.get("dt_min")).is_some() {
        warnings.push("solver.dt_min is superseded by stopping.dt_min".into());
    }
    let mut config: RunConfig = serde_ignored::deserialize(toml::Value::Table(table), |path| {
        warnings.push(format!("unknown key `{path}` ignored"));
    })
    .map_err(|e| ConfigError::Parse(e.to_string()))?;
    if missing_version {
        config.schema_version = 0;
    }
    config.distribution.seed = config.seed;
    Ok(Ingested { config, warnings })
}

fn prefixed(section: &str, items: Vec<String>) -> impl Iterator<Item = String> + '_ {
    items.into_iter().map(move |m| format!("{section}: {m}"))
}

fn sorted_times(v: &[f64]) -> bool {
    v.iter().all(|t| t.is_finite() && *t >= 0.0) && v.windows(2).all(|w| w[0] <= w[1])
}

impl RunConfig {
    /// Applies command-line overrides; the seed also reseeds the distribution.
    pub fn apply_overrides(&mut self, mode: Option<Mode>, seed: Option<u64>, workers: Option<usize>) {
        if let Some(m) = mode {
            self.mode = m;
        }
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(w) = workers {
            self.workers = w;
        }
        self.distribution.seed = self.seed;
    }

    /// Every admissibility violation, each prefixed with its section.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.schema_version != SCHEMA_VERSION {
            v.push(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                if self.schema_version == 0 { "none".to_string() } else { self.schema_version.to_string() }
            ));
        }
        if let Err(e) = Grid::new(self.grid.dim, self.grid.n) {
            v.push(format!("grid: {e}"));
        }
        v.extend(prefixed("params", self.params.violations()));
        v.extend(prefixed("solver", self.solver.violations()));
        v.extend(prefixed("stopping", self.stopping.violations()));
        v.extend(prefixed("metric", self.metric.violations()));
        v.extend(prefixed("distribution", self.distribution.violations()));
        if 2 * self.distribution.m_max as usize >= self.grid.n {
            v.push(format!("distribution: m_max = {} must be below grid n/2", self.distribution.m_max));
        }
        if !self.forcing.g.is_empty() && self.forcing.g.len() != self.grid.dim {
            v.push(format!("forcing: g has {} entries for dim {}", self.forcing.g.len(), self.grid.dim));
        }
        if !(self.forcing.heat >= 0.0 && self.forcing.heat.is_finite()) {
            v.push(format!("forcing: heat = {} must be finite and >= 0", self.forcing.heat));
        }
        if let InitialSpec::Constant { rho, theta, u } = &self.initial {
            if !(*rho > 0.0 && *theta > 0.0) {
                v.push(format!("initial: constant state needs rho, theta > 0 (got {rho}, {theta})"));
            }
            if !u.is_empty() && u.len() != self.grid.dim {
                v.push(format!("initial: u has {} entries for dim {}", u.len(), self.grid.dim));
            }
        }
        if !sorted_times(&self.times) {
            v.push("times: must be finite, non-negative and sorted".into());
        }
        match self.mode {
            Mode::Solve | Mode::Ensemble if self.times.is_empty() => {
                v.push(format!("times: mode {} needs at least one query time", self.mode));
            }
            Mode::Ensemble if self.ensemble.members == 0 => v.push("ensemble: members must be >= 1".into()),
            Mode::Stability => {
                if self.stability.deltas.is_empty() || self.stability.deltas.iter().any(|d| !(*d >= 0.0)) {
                    v.push("stability: deltas must be a non-empty list of values >= 0".into());
                }
                if !(self.stability.time >= 0.0) {
                    v.push("stability: time must be >= 0".into());
                }
            }
            Mode::MetricProbe => {
                if self.probe.amplitudes.is_empty() {
                    v.push("probe: amplitudes must be non-empty".into());
                }
                if !(self.probe.s >= 0.0 && self.probe.t >= 0.0) {
                    v.push("probe: s and t must be >= 0".into());
                }
            }
            Mode::SllnStudy => v.extend(prefixed("slln", self.slln.violations())),
            Mode::MarkovCheck => {
                let m = &self.markov;
                if !(0.0..=1.0).contains(&m.lambda) {
                    v.push(format!("markov: lambda = {} must lie in [0, 1]", m.lambda));
                }
                if !(m.s >= 0.0 && m.t >= 0.0) {
                    v.push("markov: s and t must be >= 0".into());
                }
                let dt = self.solver.dt_init;
                let aligned = |x: f64| ((x / dt).round() * dt - x).abs() <= 1e-9 * x.max(dt);
                if !self.solver.fixed_step || !aligned(m.s) || !aligned(m.t) {
                    v.push("markov: exact identities need solver.fixed_step = true with s and t multiples of dt_init".into());
                }
                if m.members == 0 {
                    v.push("markov: members must be >= 1".into());
                }
                if !(m.second_sigma >= 0.0) {
                    v.push("markov: second_sigma must be >= 0".into());
                }
                if !m.models.is_empty() {
                    let total: f64 = m.models.iter().map(|s| s.weight).sum();
                    if m.models.iter().any(|s| !(s.weight > 0.0)) || (total - 1.0).abs() > 1e-12 {
                        v.push("markov: model weights must be positive and sum to 1".into());
                    }
                    for (i, s) in m.models.iter().enumerate() {
                        if let Some(p) = &s.params {
                            v.extend(prefixed(&format!("markov.models[{i}].params"), p.violations()));
                        }
                        if let Some(h) = s.heat {
                            if !(h >= 0.0) {
                                v.push(format!("markov.models[{i}]: heat = {h} must be >= 0"));
                            }
                        }
                    }
                }
            }
            _ => {}
        }
        for (i, k) in self.ensemble.observables.iter().enumerate() {
            if let Err(e) = make_observable(k.clone(), self.metric.q) {
                v.push(format!("ensemble.observables[{i}]: {e}"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Rejected(v))
        }
    }

    pub fn grid(&self) -> Grid {
        Grid::new(self.grid.dim, self.grid.n).expect("validated grid")
    }

    pub fn forcing_with_heat(&self, grid: &Grid, heat: f64) -> Forcing {
        let g = if self.forcing.g.is_empty() {
            VectorField::zeros(grid)
        } else {
            VectorField::constant(grid, &self.forcing.g).expect("validated body force")
        };
        Forcing::new(g, ScalarField::constant(grid, heat)).expect("validated heat source")
    }

    pub fn forcing(&self, grid: &Grid) -> Forcing {
        self.forcing_with_heat(grid, self.forcing.heat)
    }

    /// Initial state of single-run modes.
    pub fn initial_state(&self, grid: &Grid) -> Result<State, nsf_core::statistics::StatsError> {
        match &self.initial {
            InitialSpec::Constant { rho, theta, u } => {
                let mut s = State::constant(grid, *rho, *theta);
                if !u.is_empty() {
                    s.u = VectorField::constant(grid, u)?;
                }
                Ok(s)
            }
            InitialSpec::Sample { member } => {
                nsf_core::statistics::sample_member(&self.distribution, grid, *member)
            }
        }
    }

    /// Observables of ensemble runs; validated kinds always construct.
    pub fn observables(&self) -> Vec<Observable> {
        let kinds = if self.ensemble.observables.is_empty() {
            default_observables(self.grid.dim)
        } else {
            self.ensemble.observables.clone()
        };
        kinds
            .into_iter()
            .map(|k| make_observable(k, self.metric.q).expect("validated observable"))
            .collect()
    }

    /// Canonical JSON used for hashing; the worker count is excluded.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.workers = 0;
        serde_json::to_string(&c).expect("config serializes")
    }
}

pub fn default_observables(dim: usize) -> Vec<ObservableKind> {
    let mut unit = vec![0i64; dim];
    unit[0] = 1;
    vec![
        ObservableKind::Cutoff { n: 1e3, functional: Functional::Mass, window: 1e3 },
        ObservableKind::WindowedMoment { component: 1, wavevector: unit, sine: false, window: 1.0 },
    ]
}
