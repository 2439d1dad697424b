//! Pseudo-spectral right-hand side and explicit time stepping for the
//! Navier-Stokes-Fourier system in primitive variables `(rho, theta, u)`.
//!
//! The internal-energy balance with `e = c_v theta` is evolved as a
//! temperature equation. Expanding
//! `d_t(rho c_v theta) + div(rho c_v theta u) - kappa lap theta = S:Du - rho theta div u + rho Q`
//! with the continuity equation gives, for smooth fields,
//!
//! ```text
//! d_t theta = -u.grad theta + (kappa lap theta + S:grad u) / (c_v rho) - theta div u / c_v + Q / c_v
//! ```
//!
//! which is what [`rhs`] implements. All products go through the 2/3-rule mask.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::fields::{FieldError, Grid, ScalarField, State, VectorField};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolverError {
    #[error("parameters are not admissible: {}", .0.join("; "))]
    Inadmissible(Vec<String>),
    #[error("state is outside X+ (non-positive density or temperature)")]
    NotInXPlus,
    #[error("non-finite field encountered")]
    NonFiniteField,
    #[error("step rejected: a Runge-Kutta stage left X+")]
    StepRejected,
    #[error("time step {dt:e} fell below dt_min at t = {time}")]
    StiffnessBreakdown { time: f64, dt: f64 },
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Field(FieldError),
}

impl From<FieldError> for SolverError {
    fn from(e: FieldError) -> Self {
        match e {
            FieldError::NonFiniteField => SolverError::NonFiniteField,
            other => SolverError::Field(other),
        }
    }
}

/// Constitutive parameters `(c_v, mu, eta, kappa)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Parameters {
    pub c_v: f64,
    pub mu: f64,
    pub eta: f64,
    pub kappa: f64,
}

impl Default for Parameters {
    fn default() -> Self {
        Self { c_v: 2.5, mu: 0.05, eta: 0.01, kappa: 0.05 }
    }
}

impl Parameters {
    pub fn new(c_v: f64, mu: f64, eta: f64, kappa: f64) -> Result<Self, SolverError> {
        let p = Self { c_v, mu, eta, kappa };
        let violations = p.violations();
        if violations.is_empty() {
            Ok(p)
        } else {
            Err(SolverError::Inadmissible(violations))
        }
    }

    /// Every violated admissibility constraint, as human-readable messages.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        // NaN fails every comparison, so each check is phrased positively.
        if !(self.c_v > 1.0) {
            out.push(format!("c_v = {} violates c_v > 1", self.c_v));
        }
        if !(self.mu > 0.0) {
            out.push(format!("mu = {} violates mu > 0", self.mu));
        }
        if !(self.eta >= 0.0) {
            out.push(format!("eta = {} violates eta >= 0", self.eta));
        }
        if !(self.kappa > 0.0) {
            out.push(format!("kappa = {} violates kappa > 0", self.kappa));
        }
        for (name, v) in [("c_v", self.c_v), ("mu", self.mu), ("eta", self.eta), ("kappa", self.kappa)] {
            if !v.is_finite() {
                out.push(format!("{name} must be finite"));
            }
        }
        out
    }
}

/// Time-independent body force `g` and heat source `Q >= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Forcing {
    pub g: VectorField,
    pub heat: ScalarField,
}

impl Forcing {
    pub fn new(g: VectorField, heat: ScalarField) -> Result<Self, SolverError> {
        if g.grid() != heat.grid() {
            return Err(FieldError::GridMismatch.into());
        }
        if heat.min() < 0.0 {
            return Err(SolverError::Inadmissible(vec![format!(
                "heat source min Q = {} violates Q >= 0",
                heat.min()
            )]));
        }
        Ok(Self { g, heat })
    }

    pub fn none(grid: &Grid) -> Self {
        Self {
            g: VectorField::zeros(grid),
            heat: ScalarField::zeros(grid),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.heat.values().iter().all(|&v| v == 0.0)
            && self.g.components().iter().all(|c| c.values().iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// First step size; the constant step when `fixed_step` is set.
    pub dt_init: f64,
    pub cfl: f64,
    pub dt_min: f64,
    pub dealias: bool,
    pub integrator: Integrator,
    /// Use `dt_init` for every step instead of the CFL estimate.
    pub fixed_step: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            dt_init: 1e-3,
            cfl: 0.5,
            dt_min: 1e-9,
            dealias: true,
            integrator: Integrator::Rk4,
            fixed_step: false,
        }
    }
}

impl SolverConfig {
    pub fn fixed(dt: f64) -> Self {
        Self {
            dt_init: dt,
            dt_min: (dt * 1e-6).min(1e-9),
            fixed_step: true,
            ..Self::default()
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.dt_init > 0.0) {
            out.push(format!("dt_init = {} must be > 0", self.dt_init));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            out.push(format!("cfl = {} must lie in (0, 1]", self.cfl));
        }
        if !(self.dt_min > 0.0) {
            out.push(format!("dt_min = {} must be > 0", self.dt_min));
        }
        if !(self.dt_min < self.dt_init) {
            out.push(format!(
                "dt_min = {} must be smaller than dt_init = {}",
                self.dt_min, self.dt_init
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(SolverError::InvalidConfig(v.join("; ")))
        }
    }
}

/// Conservation and entropy diagnostics at one recorded time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub time: f64,
    /// Size of the step that produced this record (0 for the initial record).
    pub dt: f64,
    pub total_mass: f64,
    pub total_energy: f64,
    pub entropy: f64,
    pub entropy_production_rate: f64,
    /// Time integral of the production rate, accumulated with the RK4 weights.
    pub entropy_production_integral: f64,
    pub min_rho: f64,
    pub min_theta: f64,
    pub max_rho_plus_theta: f64,
    pub max_abs_div_u: f64,
}

impl DiagnosticsRecord {
    pub const CSV_HEADER: &'static str = "time,dt,mass,energy,entropy,production_rate,production_integral,\
min_rho,min_theta,max_rho_plus_theta,max_abs_div_u";

    /// One CSV row; `f64` display is the shortest round-trip representation.
    pub fn csv_row(&self) -> String {
        let v = [
            self.time,
            self.dt,
            self.total_mass,
            self.total_energy,
            self.entropy,
            self.entropy_production_rate,
            self.entropy_production_integral,
            self.min_rho,
            self.min_theta,
            self.max_rho_plus_theta,
            self.max_abs_div_u,
        ];
        v.map(|x| x.to_string()).join(",")
    }
}

/// Time-dependent additive source, used for manufactured-solution checks.
pub trait Source {
    fn tendency(&self, time: f64, grid: &Grid) -> Result<State, SolverError>;
}

/// Why an integration stopped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TrajectoryEnd {
    Completed,
    /// The caller's monitor requested a halt at the last record.
    Halted,
    /// Step size fell below `dt_min` while leaving the last record; `dt` is the
    /// first step size attempted.
    Stiffness { time: f64, dt: f64 },
    NonFinite { time: f64, dt: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recording {
    /// Keep the state at every accepted step.
    EveryStep,
    /// Keep states only at the requested target times (and time zero).
    Targets,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Recorded states with their times.
    pub states: Vec<(f64, State)>,
    /// One record per accepted step, including the initial state.
    pub diagnostics: Vec<DiagnosticsRecord>,
    pub end: TrajectoryEnd,
}

impl Trajectory {
    pub fn final_state(&self) -> &State {
        &self.states.last().expect("trajectory holds the initial state").1
    }

    pub fn final_time(&self) -> f64 {
        self.diagnostics.last().map_or(0.0, |d| d.time)
    }

    /// Recorded state at exactly `time`, if any.
    pub fn state_at(&self, time: f64) -> Option<&State> {
        self.states.iter().find(|(t, _)| *t == time).map(|(_, s)| s)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(DiagnosticsRecord::CSV_HEADER);
        out.push('\n');
        for d in &self.diagnostics {
            out.push_str(&d.csv_row());
            out.push('\n');
        }
        out
    }
}

/// NSF model: parameters, forcing and product dealiasing switch.
#[derive(Debug, Clone)]
pub struct NsfModel {
    pub params: Parameters,
    pub forcing: Forcing,
    pub dealias: bool,
}

struct Kinematics {
    grad_u: Vec<Vec<ScalarField>>,
    div_u: ScalarField,
    grad_theta: Vec<ScalarField>,
    lap_theta: ScalarField,
}

fn kinematics(state: &State) -> Result<Kinematics, FieldError> {
    let dim = state.grid().dim();
    let grad_u = state
        .u
        .components()
        .iter()
        .map(|ui| (0..dim).map(|a| ui.derivative(a, 1)).collect::<Result<Vec<_>, _>>())
        .collect::<Result<Vec<_>, _>>()?;
    let mut div_u = grad_u[0][0].clone();
    for (a, row) in grad_u.iter().enumerate().skip(1) {
        div_u = div_u.add(&row[a])?;
    }
    let grad_theta = (0..dim)
        .map(|a| state.theta.derivative(a, 1))
        .collect::<Result<Vec<_>, _>>()?;
    let mut lap_theta = state.theta.derivative(0, 2)?;
    for a in 1..dim {
        lap_theta = lap_theta.add(&state.theta.derivative(a, 2)?)?;
    }
    Ok(Kinematics {
        grad_u,
        div_u,
        grad_theta,
        lap_theta,
    })
}

/// Pointwise `S(Du) : grad u` for Newton's rheological law.
fn dissipation(k: &Kinematics, params: &Parameters) -> Result<ScalarField, FieldError> {
    let dim = k.grad_u.len();
    let bulk = params.eta - 2.0 * params.mu / 3.0;
    let grid = k.div_u.grid().clone();
    let len = grid.len();
    let mut out = vec![0.0; len];
    for (p, slot) in out.iter_mut().enumerate() {
        let div = k.div_u.values()[p];
        let mut acc = bulk * div * div;
        for i in 0..dim {
            for j in 0..dim {
                // grad_u[i][j] = d_j u_i
                let dij = k.grad_u[i][j].values()[p];
                let dji = k.grad_u[j][i].values()[p];
                acc += params.mu * (dij + dji) * dij;
            }
        }
        *slot = acc;
    }
    ScalarField::new(&grid, out)
}

impl NsfModel {
    pub fn new(params: Parameters, forcing: Forcing) -> Self {
        Self {
            params,
            forcing,
            dealias: true,
        }
    }

    fn mask(&self, f: ScalarField) -> Result<ScalarField, FieldError> {
        if self.dealias {
            f.dealiased()
        } else {
            Ok(f)
        }
    }

    fn check_admissible(&self, state: &State) -> Result<(), SolverError> {
        if state.grid() != self.forcing.heat.grid() {
            return Err(FieldError::GridMismatch.into());
        }
        if !state.in_x_plus() {
            return Err(SolverError::NotInXPlus);
        }
        Ok(())
    }

    /// Tendency `(d_t rho, d_t theta, d_t u)`.
    pub fn rhs(&self, state: &State) -> Result<State, SolverError> {
        self.check_admissible(state)?;
        let p = &self.params;
        let dim = state.grid().dim();
        let k = kinematics(state)?;
        let u = state.u.components();
        let inv_rho = state.rho.map(|r| 1.0 / r)?;

        // continuity: -div(rho u)
        let mut drho: Option<ScalarField> = None;
        for (a, ua) in u.iter().enumerate() {
            let flux = self.mask(state.rho.mul(ua)?)?.derivative(a, 1)?;
            drho = Some(match drho {
                None => flux.scale(-1.0)?,
                Some(acc) => acc.sub(&flux)?,
            });
        }
        let drho = drho.expect("dim >= 1");

        // momentum, velocity form
        let pressure = self.mask(state.rho.mul(&state.theta)?)?;
        let grad_div: Vec<ScalarField> = (0..dim)
            .map(|i| k.div_u.derivative(i, 1))
            .collect::<Result<_, _>>()?;
        let mut du = Vec::with_capacity(dim);
        for i in 0..dim {
            let mut advection = u[0].mul(&k.grad_u[i][0])?;
            for a in 1..dim {
                advection = advection.add(&u[a].mul(&k.grad_u[i][a])?)?;
            }
            let advection = self.mask(advection)?;
            let mut lap = u[i].derivative(0, 2)?;
            for a in 1..dim {
                lap = lap.add(&u[i].derivative(a, 2)?)?;
            }
            let viscous = lap.scale(p.mu)?.axpy(p.mu / 3.0 + p.eta, &grad_div[i])?;
            let force = viscous.sub(&pressure.derivative(i, 1)?)?;
            let accel = self.mask(inv_rho.mul(&force)?)?;
            du.push(accel.sub(&advection)?.add(self.forcing.g.component(i))?);
        }

        // internal energy as a temperature equation
        let mut transport = u[0].mul(&k.grad_theta[0])?;
        for a in 1..dim {
            transport = transport.add(&u[a].mul(&k.grad_theta[a])?)?;
        }
        let transport = self.mask(transport)?;
        let heating = self.mask(dissipation(&k, p)?)?;
        let conduction = k.lap_theta.scale(p.kappa)?.add(&heating)?;
        let conduction = self.mask(inv_rho.mul(&conduction)?)?;
        let compression = self.mask(state.theta.mul(&k.div_u)?)?;
        let dtheta = conduction
            .sub(&compression)?
            .add(&self.forcing.heat)?
            .scale(1.0 / p.c_v)?
            .sub(&transport)?;

        Ok(State::new(drho, dtheta, VectorField::new(du)?)?)
    }

    fn rhs_with_source(
        &self,
        state: &State,
        time: f64,
        source: Option<&dyn Source>,
    ) -> Result<State, SolverError> {
        let tendency = self.rhs(state)?;
        match source {
            None => Ok(tendency),
            Some(src) => Ok(tendency.axpy(1.0, &src.tendency(time, state.grid())?)?),
        }
    }

    /// One classical RK4 step. Returns the new state and the RK4-weighted
    /// increment of the entropy production integral.
    pub fn step_with(
        &self,
        state: &State,
        time: f64,
        dt: f64,
        source: Option<&dyn Source>,
    ) -> Result<(State, f64), SolverError> {
        self.check_admissible(state)?;
        if dt == 0.0 {
            return Ok((state.clone(), 0.0));
        }
        let stage = |base: &State, factor: f64, k: &State| -> Result<State, SolverError> {
            match base.axpy(factor, k) {
                Ok(s) if s.in_x_plus() => Ok(s),
                Ok(_) | Err(FieldError::NonFiniteField) => Err(SolverError::StepRejected),
                Err(e) => Err(e.into()),
            }
        };
        let eval = |s: &State, t: f64| -> Result<State, SolverError> {
            match self.rhs_with_source(s, t, source) {
                Err(SolverError::NonFiniteField) | Err(SolverError::NotInXPlus) => {
                    Err(SolverError::StepRejected)
                }
                other => other,
            }
        };
        let p1 = entropy_production_rate(state, &self.params)?;
        let k1 = eval(state, time)?;
        let s2 = stage(state, 0.5 * dt, &k1)?;
        let p2 = entropy_production_rate(&s2, &self.params)?;
        let k2 = eval(&s2, time + 0.5 * dt)?;
        let s3 = stage(state, 0.5 * dt, &k2)?;
        let p3 = entropy_production_rate(&s3, &self.params)?;
        let k3 = eval(&s3, time + 0.5 * dt)?;
        let s4 = stage(state, dt, &k3)?;
        let p4 = entropy_production_rate(&s4, &self.params)?;
        let k4 = eval(&s4, time + dt)?;
        let combo = k1
            .axpy(2.0, &k2)
            .and_then(|c| c.axpy(2.0, &k3))
            .and_then(|c| c.axpy(1.0, &k4))
            .map_err(|_| SolverError::StepRejected)?;
        let next = stage(state, dt / 6.0, &combo)?;
        Ok((next, dt / 6.0 * (p1 + 2.0 * p2 + 2.0 * p3 + p4)))
    }

    pub fn step(&self, state: &State, dt: f64) -> Result<State, SolverError> {
        self.step_with(state, 0.0, dt, None).map(|(s, _)| s)
    }

    /// CFL-limited step from the advective/acoustic and viscous/conductive bounds.
    pub fn stable_dt(&self, state: &State, cfl: f64) -> f64 {
        let grid = state.grid();
        let dim = grid.dim() as f64;
        let p = &self.params;
        let k_max = PI * (grid.n() / 2) as f64;
        let umax: f64 = state.u.components().iter().map(|c| c.max_abs()).sum();
        let sound = (state.theta.max().max(0.0) * (1.0 + 1.0 / p.c_v)).sqrt();
        let advective = 2.8 / (k_max * dim.sqrt() * (umax + sound)).max(1e-300);
        let rho_min = state.rho.min();
        let diffusivity = ((4.0 * p.mu / 3.0 + p.eta) / rho_min).max(p.kappa / (p.c_v * rho_min));
        let viscous = 2.7 / (diffusivity * dim * k_max * k_max).max(1e-300);
        cfl * advective.min(viscous)
    }

    fn record(
        &self,
        state: &State,
        time: f64,
        dt: f64,
        production_integral: f64,
    ) -> Result<DiagnosticsRecord, SolverError> {
        let (mass, energy, entropy) = diagnostics(state, &self.params)?;
        let rate = entropy_production_rate(state, &self.params)?;
        let sum = state.rho.add(&state.theta)?;
        Ok(DiagnosticsRecord {
            time,
            dt,
            total_mass: mass,
            total_energy: energy,
            entropy,
            entropy_production_rate: rate,
            entropy_production_integral: production_integral,
            min_rho: state.rho.min(),
            min_theta: state.theta.min(),
            max_rho_plus_theta: sum.max(),
            max_abs_div_u: state.u.divergence()?.max_abs(),
        })
    }

    /// Integrates from `state0` at time 0 through every time in `targets`
    /// (sorted, non-negative). Each target is hit exactly. `monitor` sees every
    /// record and may halt the run by returning `true`.
    pub fn integrate<M>(
        &self,
        state0: &State,
        targets: &[f64],
        config: &SolverConfig,
        recording: Recording,
        source: Option<&dyn Source>,
        mut monitor: M,
    ) -> Result<Trajectory, SolverError>
    where
        M: FnMut(&State, &DiagnosticsRecord) -> bool,
    {
        config.validate()?;
        if targets.iter().any(|t| !(t.is_finite() && *t >= 0.0))
            || targets.windows(2).any(|w| w[1] < w[0])
        {
            return Err(SolverError::InvalidConfig(
                "target times must be finite, non-negative and sorted".into(),
            ));
        }
        self.check_admissible(state0)?;

        let mut state = state0.clone();
        let mut time = 0.0;
        let mut production = 0.0;
        let first = self.record(&state, time, 0.0, production)?;
        let mut traj = Trajectory {
            states: vec![(0.0, state.clone())],
            diagnostics: vec![first],
            end: TrajectoryEnd::Completed,
        };
        if monitor(&state, &first) {
            traj.end = TrajectoryEnd::Halted;
            return Ok(traj);
        }

        for &target in targets {
            // fixed steps are counted from the last target so labels never drift
            let segment_start = time;
            let mut steps_in_segment = 0u64;
            while time < target {
                let remaining = target - time;
                let base = if config.fixed_step {
                    config.dt_init
                } else if traj.diagnostics.len() == 1 {
                    self.stable_dt(&state, config.cfl).min(config.dt_init)
                } else {
                    self.stable_dt(&state, config.cfl)
                };
                let (h, lands) = if base >= remaining * (1.0 - 1e-9) {
                    if config.fixed_step && (base - remaining).abs() <= 1e-9 * base {
                        (base, true)
                    } else {
                        (remaining, true)
                    }
                } else {
                    (base, false)
                };
                let outcome = if config.fixed_step {
                    self.advance_fixed(&state, time, h, config.dt_min, source)
                } else {
                    self.advance_adaptive(&state, time, h, config.dt_min, source)
                };
                let (next, inc, taken) = match outcome {
                    Ok(v) => v,
                    Err(SolverError::StiffnessBreakdown { .. }) => {
                        traj.end = TrajectoryEnd::Stiffness { time, dt: h };
                        return Ok(traj);
                    }
                    Err(SolverError::NonFiniteField) => {
                        traj.end = TrajectoryEnd::NonFinite { time, dt: h };
                        return Ok(traj);
                    }
                    Err(e) => return Err(e),
                };
                state = next;
                production += inc;
                steps_in_segment += 1;
                time = if lands && taken == h {
                    target
                } else if config.fixed_step {
                    segment_start + steps_in_segment as f64 * config.dt_init
                } else {
                    time + taken
                };
                let rec = self.record(&state, time, taken, production)?;
                traj.diagnostics.push(rec);
                if recording == Recording::EveryStep || time == target {
                    traj.states.push((time, state.clone()));
                }
                if monitor(&state, &rec) {
                    traj.end = TrajectoryEnd::Halted;
                    return Ok(traj);
                }
            }
        }
        Ok(traj)
    }

    /// Advances exactly `h`, splitting the interval in halves on rejection.
    fn advance_fixed(
        &self,
        state: &State,
        time: f64,
        h: f64,
        dt_min: f64,
        source: Option<&dyn Source>,
    ) -> Result<(State, f64, f64), SolverError> {
        match self.step_with(state, time, h, source) {
            Ok((s, inc)) => Ok((s, inc, h)),
            Err(SolverError::StepRejected) => {
                let half = 0.5 * h;
                if half < dt_min {
                    return Err(SolverError::StiffnessBreakdown { time, dt: half });
                }
                let (mid, a, _) = self.advance_fixed(state, time, half, dt_min, source)?;
                let (end, b, _) = self.advance_fixed(&mid, time + half, half, dt_min, source)?;
                Ok((end, a + b, h))
            }
            Err(e) => Err(e),
        }
    }

    /// Takes one step of size `h` or smaller, halving on rejection.
    fn advance_adaptive(
        &self,
        state: &State,
        time: f64,
        mut h: f64,
        dt_min: f64,
        source: Option<&dyn Source>,
    ) -> Result<(State, f64, f64), SolverError> {
        loop {
            match self.step_with(state, time, h, source) {
                Ok((s, inc)) => return Ok((s, inc, h)),
                Err(SolverError::StepRejected) => {
                    h *= 0.5;
                    if h < dt_min {
                        return Err(SolverError::StiffnessBreakdown { time, dt: h });
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Tendency of the NSF system with dealiased products.
pub fn rhs(state: &State, params: &Parameters, forcing: &Forcing) -> Result<State, SolverError> {
    NsfModel::new(*params, forcing.clone()).rhs(state)
}

/// One RK4 step of size `dt`.
pub fn step(
    state: &State,
    dt: f64,
    params: &Parameters,
    forcing: &Forcing,
) -> Result<State, SolverError> {
    NsfModel::new(*params, forcing.clone()).step(state, dt)
}

/// Integrates to `t_end`, recording every accepted step. Running out of
/// step size ends the trajectory early with [`TrajectoryEnd::Stiffness`];
/// [`stiffness_error`] converts that into an error for callers that need one.
pub fn solve(
    state0: &State,
    t_end: f64,
    params: &Parameters,
    forcing: &Forcing,
    config: &SolverConfig,
) -> Result<Trajectory, SolverError> {
    let mut model = NsfModel::new(*params, forcing.clone());
    model.dealias = config.dealias;
    model.integrate(state0, &[t_end], config, Recording::EveryStep, None, |_, _| false)
}

/// `Err(StiffnessBreakdown)` when the trajectory ran out of step size.
pub fn stiffness_error(traj: &Trajectory) -> Result<(), SolverError> {
    match traj.end {
        TrajectoryEnd::Stiffness { time, dt } => Err(SolverError::StiffnessBreakdown { time, dt }),
        TrajectoryEnd::NonFinite { .. } => Err(SolverError::NonFiniteField),
        _ => Ok(()),
    }
}

/// `(mass, energy, entropy)` = `(int rho, int rho|u|^2/2 + c_v rho theta, int rho log(theta^c_v / rho))`.
pub fn diagnostics(state: &State, params: &Parameters) -> Result<(f64, f64, f64), SolverError> {
    if !state.in_x_plus() {
        return Err(SolverError::NotInXPlus);
    }
    let grid = state.grid();
    let rho = state.rho.values();
    let theta = state.theta.values();
    let mut mass = 0.0;
    let mut energy = 0.0;
    let mut entropy = 0.0;
    for p in 0..grid.len() {
        let speed2: f64 = state.u.components().iter().map(|c| c.values()[p].powi(2)).sum();
        mass += rho[p];
        energy += 0.5 * rho[p] * speed2 + params.c_v * rho[p] * theta[p];
        entropy += rho[p] * (params.c_v * theta[p].ln() - rho[p].ln());
    }
    let dv = grid.cell_volume();
    Ok((mass * dv, energy * dv, entropy * dv))
}

/// `int (1/theta) (S(Du):Du + kappa |grad theta|^2 / theta) dx`.
pub fn entropy_production_rate(state: &State, params: &Parameters) -> Result<f64, SolverError> {
    if !state.in_x_plus() {
        return Err(SolverError::NotInXPlus);
    }
    let k = kinematics(state)?;
    let diss = dissipation(&k, params)?;
    let theta = state.theta.values();
    let mut total = 0.0;
    for p in 0..theta.len() {
        let g2: f64 = k.grad_theta.iter().map(|g| g.values()[p].powi(2)).sum();
        total += (diss.values()[p] + params.kappa * g2 / theta[p]) / theta[p];
    }
    Ok(total * state.grid().cell_volume())
}

/// Predicted positivity floors and the observed minima at one record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorRecord {
    pub time: f64,
    pub rho_floor: f64,
    pub theta_floor: f64,
    pub min_rho: f64,
    pub min_theta: f64,
    /// Observed minimum fell more than 5% below its floor.
    pub violated: bool,
}

/// Relative slack before a floor crossing is flagged.
pub const FLOOR_SLACK: f64 = 0.05;

/// Floors `inf rho_0 exp(-int ||div u||_inf)` and `inf theta_0 exp(-(1/c_v) int ||div u||_inf)`
/// along a recorded trajectory, with the time integral by the trapezoid rule.
pub fn lower_bound_monitor(traj: &Trajectory, params: &Parameters) -> Vec<FloorRecord> {
    let Some(first) = traj.diagnostics.first() else {
        return Vec::new();
    };
    let mut integral = 0.0;
    let mut prev = *first;
    traj.diagnostics
        .iter()
        .map(|d| {
            integral += 0.5 * (d.time - prev.time) * (d.max_abs_div_u + prev.max_abs_div_u);
            prev = *d;
            let rho_floor = first.min_rho * (-integral).exp();
            let theta_floor = first.min_theta * (-integral / params.c_v).exp();
            FloorRecord {
                time: d.time,
                rho_floor,
                theta_floor,
                min_rho: d.min_rho,
                min_theta: d.min_theta,
                violated: d.min_rho < (1.0 - FLOOR_SLACK) * rho_floor
                    || d.min_theta < (1.0 - FLOOR_SLACK) * theta_floor,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Parameters {
        Parameters::new(2.5, 0.05, 0.01, 0.04).unwrap()
    }

    fn wavy(grid: &Grid) -> State {
        let rho = ScalarField::from_fn(grid, |x| 1.0 + 0.1 * (PI * x[0]).sin()).unwrap();
        let theta = ScalarField::from_fn(grid, |x| 1.2 + 0.1 * (PI * x[0]).cos()).unwrap();
        let u = ScalarField::from_fn(grid, |x| 0.05 * (2.0 * PI * x[0]).sin()).unwrap();
        State::new(rho, theta, VectorField::new(vec![u]).unwrap()).unwrap()
    }

    #[test]
    fn admissibility_messages() {
        let err = Parameters::new(0.9, 0.0, -1.0, 1.0).unwrap_err();
        let SolverError::Inadmissible(v) = err else { panic!() };
        assert_eq!(v.len(), 3);
        assert!(v[0].contains("c_v > 1"));
        let g = Grid::new(1, 8).unwrap();
        let q = ScalarField::constant(&g, -0.1);
        assert!(Forcing::new(VectorField::zeros(&g), q).is_err());
    }

    #[test]
    fn constant_state_has_zero_tendency() {
        for dim in 1..=3 {
            let g = Grid::new(dim, 8).unwrap();
            let s = State::constant(&g, 1.3, 0.7);
            let t = rhs(&s, &params(), &Forcing::none(&g)).unwrap();
            for c in t.components() {
                assert!(c.max_abs() < 1e-14, "dim {dim}: {}", c.max_abs());
            }
        }
    }

    #[test]
    fn pure_conduction_reduction() {
        let g = Grid::new(1, 32).unwrap();
        let p = params();
        let rho = ScalarField::from_fn(&g, |x| 1.0 + 0.2 * (PI * x[0]).cos()).unwrap();
        let theta = ScalarField::from_fn(&g, |x| 1.0 + 0.3 * (2.0 * PI * x[0]).sin()).unwrap();
        let s = State::new(rho.clone(), theta, VectorField::zeros(&g)).unwrap();
        let t = rhs(&s, &p, &Forcing::none(&g)).unwrap();
        for (i, x) in (0..g.len()).map(|i| (i, g.coordinate(i))) {
            let lap = -0.3 * 4.0 * PI * PI * (2.0 * PI * x).sin();
            let expected = p.kappa * lap / (p.c_v * rho.values()[i]);
            assert!((t.theta.values()[i] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn outside_x_plus_rejected() {
        let g = Grid::new(1, 8).unwrap();
        let s = State::constant(&g, 0.0, 1.0);
        assert_eq!(rhs(&s, &params(), &Forcing::none(&g)).unwrap_err(), SolverError::NotInXPlus);
        assert_eq!(
            diagnostics(&State::constant(&g, 1.0, -1.0), &params()).unwrap_err(),
            SolverError::NotInXPlus
        );
    }

    #[test]
    fn step_fixed_point_and_zero_dt() {
        let g = Grid::new(2, 8).unwrap();
        let s = State::constant(&g, 1.0, 1.0);
        let f = Forcing::none(&g);
        let next = step(&s, 0.01, &params(), &f).unwrap();
        assert!(next.sup_distance(&s).unwrap() < 1e-14);
        let w = wavy(&Grid::new(1, 16).unwrap());
        let same = step(&w, 0.0, &params(), &Forcing::none(w.grid())).unwrap();
        assert_eq!(same, w);
    }

    #[test]
    fn halved_steps_agree_to_fifth_order() {
        // local error of RK4 scales like dt^5; compare two step sizes
        let g = Grid::new(1, 16).unwrap();
        let s = wavy(&g);
        let f = Forcing::none(&g);
        let p = params();
        let local_err = |dt: f64| {
            let full = step(&s, dt, &p, &f).unwrap();
            let half = step(&step(&s, dt / 2.0, &p, &f).unwrap(), dt / 2.0, &p, &f).unwrap();
            full.sup_distance(&half).unwrap()
        };
        let e1 = local_err(0.004);
        let e2 = local_err(0.002);
        let ratio = e1 / e2;
        assert!(ratio > 24.0 && ratio < 40.0, "ratio {ratio} (e1 {e1:e}, e2 {e2:e})");
    }

    #[test]
    fn diagnostics_of_unit_state() {
        for dim in 1..=3 {
            let g = Grid::new(dim, 8).unwrap();
            let s = State::constant(&g, 1.0, 1.0);
            let p = params();
            let (m, e, s_) = diagnostics(&s, &p).unwrap();
            let vol = 2f64.powi(dim as i32);
            assert!((m - vol).abs() < 1e-13);
            assert!((e - p.c_v * vol).abs() < 1e-13);
            assert_eq!(s_, 0.0);
            assert_eq!(entropy_production_rate(&s, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn production_rate_nonnegative() {
        let g = Grid::new(2, 16).unwrap();
        let rho = ScalarField::from_fn(&g, |x| 1.0 + 0.2 * (PI * x[0]).sin() * (PI * x[1]).cos()).unwrap();
        let theta = ScalarField::from_fn(&g, |x| 1.0 + 0.3 * (PI * (x[0] + x[1])).cos()).unwrap();
        let u = VectorField::new(vec![
            ScalarField::from_fn(&g, |x| 0.4 * (PI * x[1]).sin()).unwrap(),
            ScalarField::from_fn(&g, |x| -0.2 * (2.0 * PI * x[0]).cos()).unwrap(),
        ])
        .unwrap();
        let s = State::new(rho, theta, u).unwrap();
        assert!(entropy_production_rate(&s, &params()).unwrap() > -1e-10);
    }

    #[test]
    fn constant_run_conserves_and_keeps_floors() {
        let g = Grid::new(1, 16).unwrap();
        let s = State::constant(&g, 1.0, 2.0);
        let p = params();
        let traj = solve(&s, 1.0, &p, &Forcing::none(&g), &SolverConfig::default()).unwrap();
        assert_eq!(traj.end, TrajectoryEnd::Completed);
        assert_eq!(traj.final_time(), 1.0);
        let m0 = traj.diagnostics[0].total_mass;
        for d in &traj.diagnostics {
            assert!((d.total_mass - m0).abs() <= 1e-12 * m0);
        }
        for (_, st) in &traj.states {
            assert!(st.sup_distance(&s).unwrap() < 1e-12);
        }
        let floors = lower_bound_monitor(&traj, &p);
        assert_eq!(floors.len(), traj.diagnostics.len());
        for f in floors {
            assert!(!f.violated);
            assert!((f.rho_floor - 1.0).abs() < 1e-12 && (f.theta_floor - 2.0).abs() < 1e-12);
            assert!((f.min_rho - f.rho_floor).abs() < 1e-12);
        }
    }

    #[test]
    fn still_gas_floors_are_initial_minima() {
        // u = 0 initially with uniform pressure: velocity stays zero
        let g = Grid::new(1, 16).unwrap();
        let rho = ScalarField::from_fn(&g, |x| 1.0 + 0.2 * (PI * x[0]).cos()).unwrap();
        let theta = rho.map(|r| 1.0 / r).unwrap();
        let s = State::new(rho, theta, VectorField::zeros(&g)).unwrap();
        let p = Parameters::new(2.5, 0.05, 0.0, 1e-12).unwrap();
        let traj = solve(&s, 0.2, &p, &Forcing::none(&g), &SolverConfig::default()).unwrap();
        let first = traj.diagnostics[0];
        for f in lower_bound_monitor(&traj, &p) {
            assert!(!f.violated);
            assert!((f.rho_floor - first.min_rho).abs() < 1e-6);
        }
    }

    #[test]
    fn fixed_step_labels_hit_targets() {
        let g = Grid::new(1, 16).unwrap();
        let s = wavy(&g);
        let model = NsfModel::new(params(), Forcing::none(&g));
        let traj = model
            .integrate(&s, &[0.05, 0.1, 0.125], &SolverConfig::fixed(0.01), Recording::Targets, None, |_, _| false)
            .unwrap();
        let times: Vec<f64> = traj.states.iter().map(|(t, _)| *t).collect();
        assert_eq!(times, vec![0.0, 0.05, 0.1, 0.125]);
        // 5 + 5 + 2 full steps + one partial step of 0.005
        assert_eq!(traj.diagnostics.len(), 1 + 5 + 5 + 3);
        assert!((traj.diagnostics.last().unwrap().dt - 0.005).abs() < 1e-12);
    }

    #[test]
    fn monitor_halts_run() {
        let g = Grid::new(1, 16).unwrap();
        let model = NsfModel::new(params(), Forcing::none(&g));
        let traj = model
            .integrate(&wavy(&g), &[1.0], &SolverConfig::fixed(0.01), Recording::Targets, None, |_, d| d.time >= 0.03)
            .unwrap();
        assert_eq!(traj.end, TrajectoryEnd::Halted);
        assert!((traj.final_time() - 0.03).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_targets_and_config() {
        let g = Grid::new(1, 8).unwrap();
        let model = NsfModel::new(params(), Forcing::none(&g));
        let s = State::constant(&g, 1.0, 1.0);
        let cfg = SolverConfig::default();
        assert!(model.integrate(&s, &[0.2, 0.1], &cfg, Recording::Targets, None, |_, _| false).is_err());
        let bad = SolverConfig { dt_min: 1.0, ..cfg };
        assert!(matches!(
            model.integrate(&s, &[0.1], &bad, Recording::Targets, None, |_, _| false),
            Err(SolverError::InvalidConfig(_))
        ));
    }

    #[test]
    fn stiffness_breakdown_reported() {
        // a huge fixed step on a large-amplitude state drives theta negative
        // in every stage; halving down to dt_min cannot rescue it
        let g = Grid::new(1, 16).unwrap();
        let rho = ScalarField::from_fn(&g, |x| 1.0 + 0.9 * (PI * x[0]).cos()).unwrap();
        let theta = ScalarField::from_fn(&g, |x| 0.05 + 0.04 * (PI * x[0]).sin()).unwrap();
        let u = ScalarField::from_fn(&g, |x| 3.0 * (PI * x[0]).sin()).unwrap();
        let s = State::new(rho, theta, VectorField::new(vec![u]).unwrap()).unwrap();
        let cfg = SolverConfig {
            dt_init: 0.5,
            dt_min: 0.1,
            fixed_step: true,
            ..SolverConfig::default()
        };
        let traj = solve(&s, 1.0, &params(), &Forcing::none(&g), &cfg).unwrap();
        assert!(matches!(traj.end, TrajectoryEnd::Stiffness { time, .. } if time == 0.0));
        assert!(matches!(stiffness_error(&traj), Err(SolverError::StiffnessBreakdown { .. })));
    }

    #[test]
    fn determinism_bit_identical() {
        let g = Grid::new(1, 32).unwrap();
        let s = wavy(&g);
        let run = || solve(&s, 0.1, &params(), &Forcing::none(&g), &SolverConfig::default()).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.states.len(), b.states.len());
        for ((ta, sa), (tb, sb)) in a.states.iter().zip(&b.states) {
            assert_eq!(ta.to_bits(), tb.to_bits());
            assert_eq!(sa, sb);
        }
    }
}
