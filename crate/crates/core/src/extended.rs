//! Extended solution operator on `X+ ∪ {U_inf}`: regular evolution up to the
//! numerical stopping time, absorption into the point at infinity afterwards.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{FieldError, Grid, ScalarField, State};
use crate::metric::{metric_d, MetricConfig, MetricError};
use crate::solver::{
    DiagnosticsRecord, Forcing, NsfModel, Parameters, Recording, SolverConfig, SolverError,
    Trajectory, TrajectoryEnd,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExtendedError {
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("reference run stopped at t = {t_stop} before the probe time {time}")]
    ReferenceStopped { time: f64, t_stop: f64 },
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// A point of `X+_inf`.
#[derive(Debug, Clone, PartialEq)]
pub enum ExtendedState {
    Regular(State),
    Infinity,
}

impl ExtendedState {
    /// Wraps a state, mapping anything outside `X+` to `Infinity`.
    pub fn from_state(state: State) -> Self {
        if state.in_x_plus() {
            Self::Regular(state)
        } else {
            Self::Infinity
        }
    }

    pub fn is_infinity(&self) -> bool {
        matches!(self, Self::Infinity)
    }

    pub fn as_regular(&self) -> Option<&State> {
        match self {
            Self::Regular(s) => Some(s),
            Self::Infinity => None,
        }
    }

    pub fn grid(&self) -> Option<&Grid> {
        self.as_regular().map(State::grid)
    }
}

/// Thresholds defining the numerical stopping time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoppingConfig {
    /// Level `M` of `max(rho + theta)`.
    pub threshold_m: f64,
    pub rho_floor: f64,
    pub theta_floor: f64,
    /// Smallest step before the run counts as stiff.
    pub dt_min: f64,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        Self {
            threshold_m: 100.0,
            rho_floor: 1e-6,
            theta_floor: 1e-6,
            dt_min: 1e-9,
        }
    }
}

impl StoppingConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                v.push(msg);
            }
        };
        check(self.threshold_m > 0.0, format!("threshold_m = {} must be > 0", self.threshold_m));
        check(self.rho_floor > 0.0, format!("rho_floor = {} must be > 0", self.rho_floor));
        check(self.theta_floor > 0.0, format!("theta_floor = {} must be > 0", self.theta_floor));
        check(self.dt_min > 0.0, format!("dt_min = {} must be > 0", self.dt_min));
        v
    }

    fn triggered(&self, rec: &DiagnosticsRecord) -> Option<StopReason> {
        if !(rec.max_rho_plus_theta < self.threshold_m) {
            Some(StopReason::ThresholdM)
        } else if rec.min_rho < self.rho_floor || rec.min_theta < self.theta_floor {
            Some(StopReason::PositivityLoss)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    ThresholdM,
    PositivityLoss,
    Stiffness,
    NonFinite,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoppingRecord {
    /// First stopping time; `+inf` (serialized as `null`) when the run
    /// survived its horizon.
    #[serde(with = "infinite_as_null")]
    pub t_stop: f64,
    pub reason: StopReason,
    /// Largest `max(rho + theta)` seen up to the stop.
    pub peak_value: f64,
}

impl StoppingRecord {
    fn survived(peak_value: f64) -> Self {
        Self { t_stop: f64::INFINITY, reason: StopReason::None, peak_value }
    }

    fn absorbed() -> Self {
        Self { t_stop: 0.0, reason: StopReason::PositivityLoss, peak_value: 0.0 }
    }

    /// Membership is alive at `time` iff `time < t_stop`.
    pub fn alive_at(&self, time: f64) -> bool {
        time < self.t_stop
    }
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// First recorded trigger along a trajectory.
pub fn stopping_time(traj: &Trajectory, config: &StoppingConfig) -> StoppingRecord {
    let mut peak = f64::NEG_INFINITY;
    for rec in &traj.diagnostics {
        peak = peak.max(rec.max_rho_plus_theta);
        if let Some(reason) = config.triggered(rec) {
            return StoppingRecord { t_stop: rec.time, reason, peak_value: peak };
        }
    }
    match traj.end {
        TrajectoryEnd::Stiffness { time, dt } => StoppingRecord {
            t_stop: time + dt,
            reason: StopReason::Stiffness,
            peak_value: peak,
        },
        TrajectoryEnd::NonFinite { time, dt } => StoppingRecord {
            t_stop: time + dt,
            reason: StopReason::NonFinite,
            peak_value: peak,
        },
        TrajectoryEnd::Completed | TrajectoryEnd::Halted => StoppingRecord::survived(peak),
    }
}

/// Extended evolution `U[U0; f; p](t)` for fixed forcing and parameters.
#[derive(Debug, Clone)]
pub struct ExtendedEvolution {
    model: NsfModel,
    solver: SolverConfig,
    stopping: StoppingConfig,
}

impl ExtendedEvolution {
    pub fn new(
        params: Parameters,
        forcing: Forcing,
        solver: SolverConfig,
        stopping: StoppingConfig,
    ) -> Result<Self, ExtendedError> {
        let mut v = params.violations();
        v.extend(solver.violations());
        v.extend(stopping.violations());
        if !v.is_empty() {
            return Err(ExtendedError::InvalidConfig(v));
        }
        let solver = SolverConfig { dt_min: stopping.dt_min, ..solver };
        let mut model = NsfModel::new(params, forcing);
        model.dealias = solver.dealias;
        Ok(Self { model, solver, stopping })
    }

    pub fn params(&self) -> &Parameters {
        &self.model.params
    }

    pub fn forcing(&self) -> &Forcing {
        &self.model.forcing
    }

    pub fn solver_config(&self) -> &SolverConfig {
        &self.solver
    }

    pub fn stopping_config(&self) -> &StoppingConfig {
        &self.stopping
    }

    /// Runs the regular solver through `targets`, halting at the first trigger.
    pub fn trajectory(
        &self,
        state: &State,
        targets: &[f64],
        recording: Recording,
    ) -> Result<(Trajectory, StoppingRecord), ExtendedError> {
        let stopping = self.stopping;
        let traj = self.model.integrate(state, targets, &self.solver, recording, None, |_, rec| {
            stopping.triggered(rec).is_some()
        })?;
        let record = stopping_time(&traj, &stopping);
        Ok((traj, record))
    }

    /// States at each of the sorted `times` plus the stopping record.
    pub fn evolve_at(
        &self,
        data: &ExtendedState,
        times: &[f64],
    ) -> (Vec<ExtendedState>, StoppingRecord) {
        let ExtendedState::Regular(state) = data else {
            return (vec![ExtendedState::Infinity; times.len()], StoppingRecord::absorbed());
        };
        let (traj, record) = match self.trajectory(state, times, Recording::Targets) {
            Ok(v) => v,
            // any failure of the regular evolution is an exit from X+
            Err(_) => {
                let record = StoppingRecord {
                    t_stop: 0.0,
                    reason: StopReason::NonFinite,
                    peak_value: state.rho.add(&state.theta).map(|f| f.max()).unwrap_or(f64::NAN),
                };
                return (vec![ExtendedState::Infinity; times.len()], record);
            }
        };
        let states = times
            .iter()
            .map(|&t| match traj.state_at(t) {
                Some(s) if record.alive_at(t) => ExtendedState::Regular(s.clone()),
                _ => ExtendedState::Infinity,
            })
            .collect();
        (states, record)
    }

    pub fn evolve(&self, data: &ExtendedState, time: f64) -> (ExtendedState, StoppingRecord) {
        let (mut states, record) = self.evolve_at(data, &[time]);
        (states.pop().expect("one target"), record)
    }

    /// Compares `U(s + t)` with `U(U(s))(t)`.
    pub fn semigroup_check(
        &self,
        data: &ExtendedState,
        s: f64,
        t: f64,
        metric: &MetricConfig,
    ) -> Result<SemigroupReport, ExtendedError> {
        let (direct, _) = self.evolve(data, s + t);
        let (mid, _) = self.evolve(data, s);
        let (composed, _) = self.evolve(&mid, t);
        let discrepancy = metric_d(&direct, &composed, metric)?;
        Ok(SemigroupReport {
            discrepancy,
            bit_identical: direct == composed,
            absorbed: direct.is_infinity(),
        })
    }

    /// Sup-norm differences at `time` between the run from `state` and runs
    /// from `state + delta * profile`.
    pub fn stability_probe(
        &self,
        state: &State,
        deltas: &[f64],
        time: f64,
    ) -> Result<StabilityReport, ExtendedError> {
        let (reference, record) = self.evolve(&ExtendedState::Regular(state.clone()), time);
        let ExtendedState::Regular(reference) = reference else {
            return Err(ExtendedError::ReferenceStopped { time, t_stop: record.t_stop });
        };
        let profile = perturbation_profile(state.grid())?;
        let mut rows = Vec::with_capacity(deltas.len());
        for &delta in deltas {
            let perturbed = state.axpy(delta, &profile)?;
            let (end, _) = self.evolve(&ExtendedState::from_state(perturbed), time);
            let sup_difference = match end {
                ExtendedState::Regular(s) => Some(s.sup_distance(&reference)?),
                ExtendedState::Infinity => None,
            };
            rows.push(StabilityRow { delta, sup_difference });
        }
        let fitted_order = fit_order(&rows);
        Ok(StabilityReport { time, rows, fitted_order })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemigroupReport {
    /// `d(U(s + t), U(U(s))(t))`.
    pub discrepancy: f64,
    pub bit_identical: bool,
    pub absorbed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StabilityRow {
    pub delta: f64,
    /// `None` when the perturbed run stopped before the probe time.
    pub sup_difference: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub time: f64,
    pub rows: Vec<StabilityRow>,
    /// Least-squares slope of `log diff` against `log delta`; NaN with fewer
    /// than two usable rows.
    pub fitted_order: f64,
}

impl StabilityReport {
    /// Every perturbed run alive and differences strictly decreasing as delta decreases.
    pub fn strictly_decreasing(&self) -> bool {
        let mut rows: Vec<&StabilityRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.delta.total_cmp(&a.delta));
        rows.iter().all(|r| r.sup_difference.is_some())
            && rows.windows(2).all(|w| w[1].sup_difference < w[0].sup_difference)
    }
}

/// Smooth unit-amplitude perturbation applied to every component.
pub fn perturbation_profile(grid: &Grid) -> Result<State, FieldError> {
    let comps = (0..grid.dim() + 2)
        .map(|c| {
            ScalarField::from_fn(grid, |x| {
                let phase: f64 = x.iter().enumerate().map(|(a, xa)| (a + 1) as f64 * xa).sum();
                (PI * phase + c as f64).sin()
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    State::from_components(comps)
}

fn fit_order(rows: &[StabilityRow]) -> f64 {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|r| match r.sup_difference {
            Some(d) if d > 0.0 && r.delta > 0.0 => Some((r.delta.ln(), d.ln())),
            _ => None,
        })
        .collect();
    least_squares_slope(&pts)
}

/// Slope of the least-squares line through `pts`; NaN with fewer than two points.
pub fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::VectorField;

    fn params() -> Parameters {
        Parameters::new(2.5, 0.05, 0.01, 0.05).unwrap()
    }

    fn evolution(grid: &Grid, heat: f64, m: f64) -> ExtendedEvolution {
        let forcing = Forcing::new(VectorField::zeros(grid), ScalarField::constant(grid, heat)).unwrap();
        let stopping = StoppingConfig { threshold_m: m, ..StoppingConfig::default() };
        ExtendedEvolution::new(params(), forcing, SolverConfig::fixed(0.01), stopping).unwrap()
    }

    fn bump(grid: &Grid) -> State {
        let rho = ScalarField::from_fn(grid, |x| 1.0 + 0.2 * (PI * x[0]).cos()).unwrap();
        let theta = ScalarField::from_fn(grid, |x| 1.0 + 0.1 * (PI * x[0]).sin()).unwrap();
        State::new(rho, theta, VectorField::zeros(grid)).unwrap()
    }

    #[test]
    fn config_violations_collected() {
        let bad = StoppingConfig { threshold_m: 0.0, rho_floor: -1.0, ..StoppingConfig::default() };
        assert_eq!(bad.violations().len(), 2);
        let g = Grid::new(1, 8).unwrap();
        let err = ExtendedEvolution::new(params(), Forcing::none(&g), SolverConfig::default(), bad);
        assert!(matches!(err, Err(ExtendedError::InvalidConfig(v)) if v.len() == 2));
    }

    #[test]
    fn threshold_below_initial_peak_stops_at_zero() {
        let g = Grid::new(1, 16).unwrap();
        let s = bump(&g);
        let peak = s.rho.add(&s.theta).unwrap().max();
        for m in [0.5 * peak, peak] {
            let (end, rec) = evolution(&g, 0.0, m).evolve(&ExtendedState::Regular(s.clone()), 0.0);
            assert_eq!(rec.t_stop, 0.0);
            assert_eq!(rec.reason, StopReason::ThresholdM);
            assert!(end.is_infinity());
        }
    }

    #[test]
    fn constant_state_never_stops() {
        let g = Grid::new(1, 8).unwrap();
        let s = ExtendedState::Regular(State::constant(&g, 1.0, 1.0));
        let (end, rec) = evolution(&g, 0.0, 10.0).evolve(&s, 1.0);
        assert_eq!(rec.reason, StopReason::None);
        assert_eq!(rec.t_stop, f64::INFINITY);
        assert_eq!(rec.peak_value, 2.0);
        assert_eq!(end, s);
    }

    #[test]
    fn time_zero_is_identity_and_infinity_absorbs() {
        let g = Grid::new(1, 16).unwrap();
        let ev = evolution(&g, 0.0, 10.0);
        let s = ExtendedState::Regular(bump(&g));
        assert_eq!(ev.evolve(&s, 0.0).0, s);
        for t in [0.0, 0.5, 3.0] {
            assert!(ev.evolve(&ExtendedState::Infinity, t).0.is_infinity());
        }
    }

    #[test]
    fn heating_sweep_shortens_survival() {
        // constant heating raises theta at rate Q / c_v
        let g = Grid::new(1, 16).unwrap();
        let s = ExtendedState::Regular(bump(&g));
        let stops: Vec<f64> = [5.0, 10.0, 20.0]
            .iter()
            .map(|&q| evolution(&g, q, 6.0).evolve(&s, 5.0).1.t_stop)
            .collect();
        assert!(stops.iter().all(|t| t.is_finite()));
        assert!(stops[0] > stops[1] && stops[1] > stops[2], "{stops:?}");
        let ev = evolution(&g, 20.0, 6.0);
        assert!(ev.evolve(&s, 5.0).0.is_infinity());
        assert!(!ev.evolve(&s, 0.5 * stops[2]).0.is_infinity());
    }

    #[test]
    fn stopping_monotone_in_threshold() {
        let g = Grid::new(1, 16).unwrap();
        let s = ExtendedState::Regular(bump(&g));
        let stops: Vec<f64> = [4.0, 6.0, 9.0]
            .iter()
            .map(|&m| evolution(&g, 10.0, m).evolve(&s, 5.0).1.t_stop)
            .collect();
        assert!(stops.windows(2).all(|w| w[0] <= w[1]), "{stops:?}");
    }

    #[test]
    fn stiffness_record_uses_attempted_step() {
        let traj = Trajectory {
            states: vec![],
            diagnostics: vec![],
            end: TrajectoryEnd::Stiffness { time: 0.3, dt: 0.01 },
        };
        let rec = stopping_time(&traj, &StoppingConfig::default());
        assert_eq!(rec.reason, StopReason::Stiffness);
        assert!((rec.t_stop - 0.31).abs() < 1e-15);
    }

    #[test]
    fn record_serializes_infinite_stop_as_null() {
        let rec = StoppingRecord::survived(2.0);
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"t_stop\":null"));
        let back: StoppingRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn zero_perturbation_gives_zero_difference() {
        let g = Grid::new(1, 16).unwrap();
        let report = evolution(&g, 0.0, 10.0).stability_probe(&bump(&g), &[0.0], 0.1).unwrap();
        assert_eq!(report.rows[0].sup_difference, Some(0.0));
        assert!(report.fitted_order.is_nan());
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [1.0f64, 2.0, 4.0].iter().map(|x| (x.ln(), 3.0 * x.ln() + 1.0)).collect();
        assert!((least_squares_slope(&pts) - 3.0).abs() < 1e-12);
    }
}
