//! Dispatch of a validated configuration to the solver, probes and ensembles,
//! and persistence of every output with a hashed inventory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nsf_core::extended::{ExtendedEvolution, ExtendedState, StoppingRecord};
use nsf_core::fields::{sobolev_norm_x, Grid, ScalarField, VectorField};
use nsf_core::metric::{
    g_weight, make_observable, metric_d, tail_bound, ObservableKind,
};
use nsf_core::solver::{lower_bound_monitor, Parameters, Recording, TrajectoryEnd};
use nsf_core::statistics::{
    data_measure, estimate, markov_property_check, push_forward, slln_convergence_study,
    MarkovSetup,
};
use rayon::{ThreadPool, ThreadPoolBuilder};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, Mode, RunConfig, SCHEMA_VERSION};
use crate::snapshot;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("{0}")]
    Failed(String),
}

impl RunError {
    fn failed(context: &str, e: impl std::fmt::Display) -> Self {
        Self::Failed(format!("{context}: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileEntry {
    /// Path relative to the output directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool: String,
    pub tool_version: String,
    pub core_version: String,
    pub mode: Mode,
    pub seed: u64,
    pub workers: usize,
    pub config_hash: String,
    pub config: RunConfig,
    pub wall_time_seconds: f64,
    /// `ok`, or the numerical failure that ended a single run.
    pub outcome: String,
    pub stopping_records: Vec<StoppingRecord>,
    pub files: Vec<FileEntry>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
    /// Set when a non-ensemble run hit a numerical failure.
    pub failure: Option<String>,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self, RunError> {
        let io = |source| RunError::Io { context: format!("output directory {}", dir.display()), source };
        std::fs::create_dir_all(dir).map_err(io)?;
        if std::fs::read_dir(dir).map_err(io)?.next().is_some() {
            return Err(RunError::Failed(format!("output directory {} is not empty", dir.display())));
        }
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), RunError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|source| RunError::Io {
            context: format!("writing {}", path.display()),
            source,
        })?;
        self.files.push(FileEntry {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), RunError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| RunError::failed(name, e))?;
        self.write(name, text.as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Resolved worker count: 0 means the available parallelism.
pub fn resolve_workers(workers: usize) -> usize {
    if workers > 0 {
        workers
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

/// Runs a validated configuration, writing all outputs into `out_dir`.
pub fn run(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome, RunError> {
    config.validate()?;
    let start = Instant::now();
    let workers = resolve_workers(config.workers);
    let pool = ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| RunError::failed("worker pool", e))?;
    let mut out = Outputs::create(out_dir)?;
    let resolved = toml::to_string(&RunConfig { workers: 0, ..config.clone() }).map_err(|e| RunError::failed("resolved config", e))?;
    out.write("config.resolved.toml", resolved.as_bytes())?;

    let (records, failure) = match config.mode {
        Mode::Solve => run_solve(config, &mut out)?,
        Mode::Stability => run_stability(config, &mut out)?,
        Mode::MetricProbe => run_metric_probe(config, &mut out)?,
        Mode::Ensemble => run_ensemble(config, &pool, &mut out)?,
        Mode::SllnStudy => run_slln(config, &pool, &mut out)?,
        Mode::MarkovCheck => run_markov(config, &pool, &mut out)?,
    };

    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        tool: env!("CARGO_PKG_NAME").to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        core_version: nsf_core::VERSION.to_string(),
        mode: config.mode,
        seed: config.seed,
        workers,
        config_hash: sha256_hex(config.canonical_json().as_bytes()),
        config: config.clone(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        outcome: failure.clone().unwrap_or_else(|| "ok".to_string()),
        stopping_records: records,
        files: out.files.clone(),
    };
    let manifest_path = out.dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| RunError::failed("manifest", e))?;
    std::fs::write(&manifest_path, text).map_err(|source| RunError::Io {
        context: format!("writing {}", manifest_path.display()),
        source,
    })?;
    Ok(RunOutcome { manifest, manifest_path, failure })
}

type ModeResult = Result<(Vec<StoppingRecord>, Option<String>), RunError>;

fn evolution(config: &RunConfig, grid: &Grid, heat: f64, params: Parameters) -> Result<ExtendedEvolution, RunError> {
    ExtendedEvolution::new(params, config.forcing_with_heat(grid, heat), config.solver, config.stopping)
        .map_err(|e| RunError::failed("model", e))
}

fn base_evolution(config: &RunConfig, grid: &Grid) -> Result<ExtendedEvolution, RunError> {
    evolution(config, grid, config.forcing.heat, config.params)
}

fn run_solve(config: &RunConfig, out: &mut Outputs) -> ModeResult {
    let grid = config.grid();
    let state = config.initial_state(&grid).map_err(|e| RunError::failed("initial state", e))?;
    let ev = base_evolution(config, &grid)?;
    let (traj, record) = ev
        .trajectory(&state, &config.times, Recording::Targets)
        .map_err(|e| RunError::failed("solve", e))?;
    out.write("diagnostics.csv", traj.csv().as_bytes())?;

    let mut floors = String::from("time,min_rho,rho_floor,min_theta,theta_floor,violated\n");
    for f in lower_bound_monitor(&traj, &config.params) {
        let _ = writeln!(
            floors,
            "{},{},{},{},{},{}",
            f.time, f.min_rho, f.rho_floor, f.min_theta, f.theta_floor, f.violated
        );
    }
    out.write("floors.csv", floors.as_bytes())?;

    for (i, &t) in config.times.iter().enumerate() {
        if let (Some(s), true) = (traj.state_at(t), record.alive_at(t)) {
            let fields: Vec<&ScalarField> = s.components().collect();
            let bytes = snapshot::encode(&fields).map_err(|e| RunError::failed("snapshot", e))?;
            out.write(&format!("state_{i:03}.bin"), &bytes)?;
        }
    }
    let failure = match traj.end {
        TrajectoryEnd::Stiffness { time, dt } => {
            Some(format!("stiffness breakdown at t = {time} (attempted dt = {dt})"))
        }
        TrajectoryEnd::NonFinite { time, dt } => {
            Some(format!("non-finite fields at t = {time} (attempted dt = {dt})"))
        }
        TrajectoryEnd::Completed | TrajectoryEnd::Halted => None,
    };
    Ok((vec![record], failure))
}

fn run_stability(config: &RunConfig, out: &mut Outputs) -> ModeResult {
    let grid = config.grid();
    let state = config.initial_state(&grid).map_err(|e| RunError::failed("initial state", e))?;
    let ev = base_evolution(config, &grid)?;
    let spec = &config.stability;
    let report = match ev.stability_probe(&state, &spec.deltas, spec.time) {
        Ok(r) => r,
        Err(e) => {
            let (_, record) = ev.evolve(&ExtendedState::Regular(state), spec.time);
            return Ok((vec![record], Some(format!("stability probe: {e}"))));
        }
    };
    let mut csv = String::from("delta,sup_difference\n");
    for r in &report.rows {
        let d = r.sup_difference.map_or("inf".to_string(), |d| d.to_string());
        let _ = writeln!(csv, "{},{}", r.delta, d);
    }
    out.write("stability.csv", csv.as_bytes())?;
    out.write_json(
        "stability.json",
        &json!({
            "time": report.time,
            "fitted_order": finite_or_null(report.fitted_order),
            "strictly_decreasing": report.strictly_decreasing(),
            "rows": report.rows,
        }),
    )?;
    Ok((Vec::new(), None))
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        serde_json::Value::Null
    }
}

fn run_metric_probe(config: &RunConfig, out: &mut Outputs) -> ModeResult {
    let grid = config.grid();
    let base = config.initial_state(&grid).map_err(|e| RunError::failed("initial state", e))?;
    let metric = &config.metric;
    let q = metric.q;
    let fail = |e| RunError::failed("metric probe", e);
    let base_ext = ExtendedState::Regular(base.clone());
    let mut csv = String::from("amplitude,total_norm,g_weight,d_to_infinity,d_to_initial\n");
    for &a in &config.probe.amplitudes {
        let mut s = base.clone();
        let mode = ScalarField::from_fn(&grid, |x| a * (std::f64::consts::PI * x[0]).sin())
            .map_err(|e| RunError::failed("probe ray", e))?;
        let mut comps = s.u.components().to_vec();
        comps[0] = comps[0].add(&mode).map_err(|e| RunError::failed("probe ray", e))?;
        s.u = VectorField::new(comps).map_err(|e| RunError::failed("probe ray", e))?;
        let total = sobolev_norm_x(&s, q).map_err(|e| RunError::failed("probe ray", e))?.total();
        let ext = ExtendedState::Regular(s);
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            a,
            total,
            g_weight(&ext, q).map_err(fail)?,
            metric_d(&ext, &ExtendedState::Infinity, metric).map_err(fail)?,
            metric_d(&ext, &base_ext, metric).map_err(fail)?,
        );
    }
    out.write("metric_probe.csv", csv.as_bytes())?;
    let ev = base_evolution(config, &grid)?;
    let sg = ev
        .semigroup_check(&base_ext, config.probe.s, config.probe.t, metric)
        .map_err(|e| RunError::failed("semigroup check", e))?;
    out.write_json(
        "metric_probe.json",
        &json!({
            "k": metric.k,
            "q": q,
            "tail_bound": tail_bound(grid.dim(), metric.k),
            "semigroup": {
                "s": config.probe.s,
                "t": config.probe.t,
                "discrepancy": sg.discrepancy,
                "bit_identical": sg.bit_identical,
                "absorbed": sg.absorbed,
            },
        }),
    )?;
    Ok((Vec::new(), None))
}

fn run_ensemble(config: &RunConfig, pool: &ThreadPool, out: &mut Outputs) -> ModeResult {
    let grid = config.grid();
    let ev = base_evolution(config, &grid)?;
    let models = std::slice::from_ref(&ev);
    let observables = config.observables();
    let measure = data_measure(&config.distribution, &grid, config.ensemble.members)
        .map_err(|e| RunError::failed("sampling", e))?;
    let push = push_forward(&measure, models, &config.times, pool).map_err(|e| RunError::failed("ensemble", e))?;
    let est = estimate(&push, &grid, models, &observables).map_err(|e| RunError::failed("estimate", e))?;

    let mut blowup = String::from("time,blowup_fraction\n");
    let mut obs_csv = String::from("time,observable,mean,half_width,censored_sum,at_infinity\n");
    let mut moment_files = Vec::new();
    for (i, slice) in est.slices.iter().enumerate() {
        let _ = writeln!(blowup, "{},{}", slice.time, slice.blowup_fraction);
        for (j, o) in slice.observables.iter().enumerate() {
            let _ = writeln!(
                obs_csv,
                "{},{},{},{},{},{}",
                slice.time, j, o.mean, o.half_width, o.censored_sum, o.at_infinity
            );
        }
        let mut fields: Vec<&ScalarField> = vec![&slice.rho_moment];
        fields.extend(slice.momentum_moment.iter());
        fields.push(&slice.entropy_moment);
        let bytes = snapshot::encode(&fields).map_err(|e| RunError::failed("moments", e))?;
        let name = format!("moments_{i:03}.bin");
        out.write(&name, &bytes)?;
        moment_files.push(name);
    }
    out.write("blowup.csv", blowup.as_bytes())?;
    out.write("observables.csv", obs_csv.as_bytes())?;

    let kinds: Vec<&ObservableKind> = observables.iter().map(|o| o.kind()).collect();
    let obs_json: Vec<_> = kinds
        .iter()
        .enumerate()
        .map(|(j, k)| {
            json!({
                "kind": k,
                "at_infinity": observables[j].at_infinity(),
                "bound": observables[j].bound(),
                "mean": est.slices.iter().map(|s| s.observables[j].mean).collect::<Vec<_>>(),
                "half_width": est.slices.iter().map(|s| s.observables[j].half_width).collect::<Vec<_>>(),
                "censored_sum": est.slices.iter().map(|s| s.observables[j].censored_sum).collect::<Vec<_>>(),
            })
        })
        .collect();
    out.write_json(
        "ensemble.json",
        &json!({
            "members": est.n,
            "seed": config.seed,
            "member_streams": "ChaCha8 seeded by `seed`, stream = member index",
            "times": config.times,
            "blowup_fraction": est.slices.iter().map(|s| s.blowup_fraction).collect::<Vec<_>>(),
            "observables": obs_json,
            "moment_files": moment_files,
            "moment_components": moment_component_names(grid.dim()),
            "stopping_records": est.records,
        }),
    )?;
    Ok((est.records, None))
}

fn moment_component_names(dim: usize) -> Vec<String> {
    let mut v = vec!["rho".to_string()];
    v.extend((0..dim).map(|a| format!("rho_u{a}")));
    v.push("entropy".to_string());
    v
}

fn run_slln(config: &RunConfig, pool: &ThreadPool, out: &mut Outputs) -> ModeResult {
    let grid = config.grid();
    let ev = base_evolution(config, &grid)?;
    let mut unit = vec![0i64; grid.dim()];
    unit[0] = 1;
    let tracked = make_observable(
        ObservableKind::WindowedMoment { component: 1, wavevector: unit, sine: false, window: 1.0 },
        config.metric.q,
    )
    .map_err(|e| RunError::failed("observable", e))?;
    let report = slln_convergence_study(&config.distribution, &grid, &ev, &config.slln, &tracked, pool)
        .map_err(|e| RunError::failed("slln study", e))?;
    let mut csv = String::from("n,mean_l1_error,mean_half_width\n");
    for r in &report.rows {
        let _ = writeln!(csv, "{},{},{}", r.n, r.mean_error, r.mean_half_width);
    }
    out.write("slln.csv", csv.as_bytes())?;
    out.write_json(
        "slln.json",
        &json!({
            "n_ref": report.n_ref,
            "slope": finite_or_null(report.slope),
            "rows": report.rows,
        }),
    )?;
    Ok((Vec::new(), None))
}

fn run_markov(config: &RunConfig, pool: &ThreadPool, out: &mut Outputs) -> ModeResult {
    let grid = config.grid();
    let spec = &config.markov;
    let models = if spec.models.is_empty() {
        vec![(1.0, base_evolution(config, &grid)?)]
    } else {
        spec.models
            .iter()
            .map(|m| {
                let heat = m.heat.unwrap_or(config.forcing.heat);
                let params = m.params.unwrap_or(config.params);
                Ok((m.weight, evolution(config, &grid, heat, params)?))
            })
            .collect::<Result<Vec<_>, RunError>>()?
    };
    let second = nsf_core::statistics::DataDistribution {
        sigma: spec.second_sigma,
        seed: config.seed.wrapping_add(1),
        ..config.distribution
    };
    let observables = config.observables();
    let setup = MarkovSetup {
        grid: &grid,
        laws: [config.distribution, second],
        lambda: spec.lambda,
        count: spec.members,
        models: &models,
        s: spec.s,
        t: spec.t,
        observables: &observables,
        metric: config.metric,
    };
    let report = markov_property_check(&setup, pool).map_err(|e| RunError::failed("markov check", e))?;
    out.write_json("markov.json", &json!({ "passed": report.passed(), "report": report }))?;
    let failure = (!report.passed()).then(|| "Markov identities violated".to_string());
    Ok((Vec::new(), failure))
}
