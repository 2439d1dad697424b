//! The metric `d` on `X+_inf`, its weight `G`, the coordinates `Q_k` and the
//! bounded observables built from them.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extended::ExtendedState;
use crate::fields::{sobolev_norm_x, FieldError, Grid, ScalarField, State};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricError {
    #[error("invalid metric configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Truncation radius on `|k| = |m|_1 + c - 1`.
    pub k: u32,
    /// Exponent of the `W^{1,q}` density norm.
    pub q: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self { k: 8, q: 6.0 }
    }
}

impl MetricConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.k < 1 {
            v.push("metric k must be >= 1".to_string());
        }
        if !(self.q > 3.0 && self.q <= 6.0) {
            v.push(format!("metric q = {} must lie in (3, 6]", self.q));
        }
        v
    }

    fn validate(&self) -> Result<(), MetricError> {
        match self.violations().first() {
            Some(msg) => Err(MetricError::InvalidConfig(msg.clone())),
            None => Ok(()),
        }
    }
}

/// `G(U) = (1 + ||U||_X + ||rho^{-1}||_C + ||theta^{-1}||_C)^{-2}`, zero off `X+`.
pub fn g_weight(state: &ExtendedState, q: f64) -> Result<f64, MetricError> {
    match state {
        ExtendedState::Infinity => Ok(0.0),
        ExtendedState::Regular(s) => g_of_state(s, q),
    }
}

fn g_of_state(state: &State, q: f64) -> Result<f64, MetricError> {
    if !state.in_x_plus() {
        return Ok(0.0);
    }
    let total = sobolev_norm_x(state, q)?.total();
    Ok((1.0 + total).powi(-2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    Cos,
    Sin,
}

/// One coordinate `Q_k`: a component, a half-space wavevector and a parity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeIndex {
    /// One-based component (1 = rho, 2 = theta, 3.. = velocity).
    pub component: usize,
    pub wavevector: Vec<i64>,
    pub parity: Parity,
    /// `|k| = |m|_1 + component - 1`.
    pub order: u32,
}

/// Half-space wavevectors `m` with `|m|_1 <= radius`: zero, or first nonzero entry positive.
pub fn half_space_wavevectors(dim: usize, radius: u32) -> Vec<Vec<i64>> {
    let r = i64::from(radius);
    let mut out = Vec::new();
    let mut m = vec![-r; dim];
    loop {
        let l1: i64 = m.iter().map(|v| v.abs()).sum();
        let leading = m.iter().find(|&&v| v != 0).copied().unwrap_or(0);
        if l1 <= r && leading >= 0 {
            out.push(m.clone());
        }
        let mut axis = dim;
        loop {
            if axis == 0 {
                out.sort_by_key(|w| (w.iter().map(|v| v.abs()).sum::<i64>(), w.clone()));
                return out;
            }
            axis -= 1;
            if m[axis] < r {
                m[axis] += 1;
                break;
            }
            m[axis] = -r;
        }
    }
}

/// Coordinates retained by the truncation on `grid`; modes outside the
/// resolved band `|m|_inf < n/2` are skipped.
pub fn mode_indices(grid: &Grid, k: u32) -> Vec<ModeIndex> {
    let dim = grid.dim();
    let band = (grid.n() / 2) as i64;
    let mut out = Vec::new();
    for c in 1..=dim + 2 {
        let shift = (c - 1) as u32;
        if shift > k {
            break;
        }
        for m in half_space_wavevectors(dim, k - shift) {
            if m.iter().any(|v| v.abs() >= band) {
                continue;
            }
            let l1 = m.iter().map(|v| v.unsigned_abs()).sum::<u64>() as u32;
            let order = l1 + shift;
            out.push(ModeIndex { component: c, wavevector: m.clone(), parity: Parity::Cos, order });
            if m.iter().any(|&v| v != 0) {
                out.push(ModeIndex { component: c, wavevector: m, parity: Parity::Sin, order });
            }
        }
    }
    out
}

/// `G` followed by `Q_k = G F_k` over [`mode_indices`]; all zero at infinity.
pub fn coordinates(state: &State, config: &MetricConfig) -> Result<Vec<f64>, MetricError> {
    config.validate()?;
    let g = g_of_state(state, config.q)?;
    let idx = mode_indices(state.grid(), config.k);
    let mut out = Vec::with_capacity(idx.len() + 1);
    out.push(g);
    for i in &idx {
        let (c, s) = state.fourier_coefficient(i.component, &i.wavevector)?;
        let f = match i.parity {
            Parity::Cos => c,
            Parity::Sin => s,
        };
        out.push(g * f);
    }
    Ok(out)
}

fn bounded(x: f64) -> f64 {
    x / (1.0 + x)
}

/// `d(a, b)` with the `|k| <= K` truncation.
pub fn metric_d(a: &ExtendedState, b: &ExtendedState, config: &MetricConfig) -> Result<f64, MetricError> {
    config.validate()?;
    let grid = match (a.grid(), b.grid()) {
        (None, None) => return Ok(0.0),
        (Some(ga), Some(gb)) if ga != gb => return Err(FieldError::GridMismatch.into()),
        (Some(g), _) | (_, Some(g)) => g.clone(),
    };
    let idx = mode_indices(&grid, config.k);
    let coords = |s: &ExtendedState| match s {
        ExtendedState::Regular(s) => coordinates(s, config),
        ExtendedState::Infinity => Ok(vec![0.0; idx.len() + 1]),
    };
    let (ca, cb) = (coords(a)?, coords(b)?);
    Ok(distance_from_coordinates(&ca, &cb, &idx))
}

/// Distance between two coordinate vectors produced for the same index list.
pub fn distance_from_coordinates(a: &[f64], b: &[f64], idx: &[ModeIndex]) -> f64 {
    let mut d = bounded((a[0] - b[0]).abs());
    for (i, mode) in idx.iter().enumerate() {
        let diff = (a[i + 1] - b[i + 1]).abs();
        d += (-f64::from(mode.order)).exp() * bounded(diff);
    }
    d
}

/// Number of half-space (wavevector, parity) pairs with `|m|_1 = j`.
fn shell_count(dim: usize, j: u64) -> f64 {
    let j = j as f64;
    match (dim, j == 0.0) {
        (_, true) => 1.0,
        (1, false) => 2.0,
        (2, false) => 4.0 * j,
        _ => 4.0 * j * j + 2.0,
    }
}

/// Bound on everything dropped by the `|k| <= K` truncation.
pub fn tail_bound(dim: usize, k: u32) -> f64 {
    let mut total = 0.0;
    for c in 0..(dim + 2) as u64 {
        let start = (u64::from(k) + 1).saturating_sub(c);
        let mut j = start;
        loop {
            let term = shell_count(dim, j) * (-((j + c) as f64)).exp();
            total += term;
            if term < 1e-18 * total {
                break;
            }
            j += 1;
        }
    }
    total
}

/// Experimental: spectral injection of a state onto another resolution
/// (zero padding when refining, truncation when coarsening).
pub fn inject(state: &State, target: &Grid) -> Result<State, MetricError> {
    if target.dim() != state.grid().dim() {
        return Err(FieldError::GridMismatch.into());
    }
    let src = state.grid();
    let band = (src.n().min(target.n()) / 2) as i64;
    let comps = state
        .components()
        .map(|f| {
            let mut coeffs = vec![num_complex::Complex64::new(0.0, 0.0); target.len()];
            for (flat, c) in f.spectrum().iter().enumerate() {
                let m = &src.mode(flat)[..src.dim()];
                if m.iter().all(|v| v.abs() < band) {
                    coeffs[target.spectral_index(m)?] = *c;
                }
            }
            ScalarField::from_spectrum(target, &coeffs)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(State::from_components(comps)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvergenceMode {
    InXPlus,
    ToInfinity,
    NotConvergent,
}

/// Classifies a sequence against a candidate limit from the tail behaviour of
/// `d(U_n, limit)` and of the phase norms.
pub fn convergence_mode(
    sequence: &[ExtendedState],
    limit: &ExtendedState,
    config: &MetricConfig,
) -> Result<ConvergenceMode, MetricError> {
    if sequence.len() < 2 {
        return Ok(ConvergenceMode::NotConvergent);
    }
    let dist = sequence
        .iter()
        .map(|s| metric_d(s, limit, config))
        .collect::<Result<Vec<_>, _>>()?;
    let tail = &dist[dist.len() / 2..];
    let last = *tail.last().expect("non-empty");
    let converging = tail.iter().all(|&d| d <= 1e-12)
        || (tail.windows(2).all(|w| w[1] < w[0]) && last < 0.1 * dist[0].max(tail[0]));
    if !converging {
        return Ok(ConvergenceMode::NotConvergent);
    }
    let totals = sequence
        .iter()
        .map(|s| match s {
            ExtendedState::Regular(st) => Ok(sobolev_norm_x(st, config.q)?.total()),
            ExtendedState::Infinity => Ok(f64::INFINITY),
        })
        .collect::<Result<Vec<f64>, MetricError>>()?;
    let tail_totals = &totals[totals.len() / 2..];
    match limit {
        ExtendedState::Infinity => {
            let escaping = tail_totals.iter().all(|t| t.is_infinite())
                || tail_totals.windows(2).all(|w| w[1] > w[0]);
            Ok(if escaping { ConvergenceMode::ToInfinity } else { ConvergenceMode::NotConvergent })
        }
        ExtendedState::Regular(l) => {
            let target = sobolev_norm_x(l, config.q)?.total();
            let gaps: Vec<f64> = tail_totals.iter().map(|t| (t - target).abs()).collect();
            let settling = gaps.iter().all(|&g| g <= 1e-9 * target)
                || gaps.windows(2).all(|w| w[1] <= w[0]);
            Ok(if settling { ConvergenceMode::InXPlus } else { ConvergenceMode::NotConvergent })
        }
    }
}

/// Field functional composed with the norm cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Functional {
    /// `int rho`.
    Mass,
    /// `int rho u_axis`.
    Momentum { axis: usize },
    /// `int rho (c_v ln theta - ln rho)`.
    Entropy { c_v: f64 },
}

impl Functional {
    fn evaluate(&self, state: &State) -> Result<f64, FieldError> {
        match *self {
            Self::Mass => Ok(state.rho.integral()),
            Self::Momentum { axis } => {
                if axis >= state.grid().dim() {
                    return Err(FieldError::InvalidAxis { axis, dim: state.grid().dim() });
                }
                Ok(state.rho.mul(state.u.component(axis))?.integral())
            }
            Self::Entropy { c_v } => Ok(state
                .rho
                .zip_with(&state.theta, |r, t| r * (c_v * t.ln() - r.ln()))?
                .integral()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObservableKind {
    /// `chi_n(Y) clamp(Phi, +-window)` with `Y` the total phase norm and `chi_n`
    /// a smooth cap equal to one on `[0, n]` and zero beyond `2n`.
    Cutoff { n: f64, functional: Functional, window: f64 },
    /// `clamp(G F_k, +-window)` for one real Fourier moment of a one-based component.
    WindowedMoment {
        component: usize,
        wavevector: Vec<i64>,
        sine: bool,
        window: f64,
    },
    /// Inner observable plus a constant, so that `F(0) = offset`.
    Shifted { inner: Box<ObservableKind>, offset: f64 },
}

/// Bounded observable on `X+_inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observable {
    kind: ObservableKind,
    q: f64,
    bound: f64,
    at_infinity: f64,
}

pub fn make_observable(kind: ObservableKind, q: f64) -> Result<Observable, MetricError> {
    if !(q > 3.0 && q <= 6.0) {
        return Err(MetricError::InvalidConfig(format!("q = {q} must lie in (3, 6]")));
    }
    let (bound, at_infinity) = describe(&kind)?;
    Ok(Observable { kind, q, bound, at_infinity })
}

fn describe(kind: &ObservableKind) -> Result<(f64, f64), MetricError> {
    let bad = |msg: String| Err(MetricError::InvalidConfig(msg));
    match kind {
        ObservableKind::Cutoff { n, window, functional } => {
            if !(*n >= 1.0 && n.is_finite()) {
                return bad(format!("cutoff n = {n} must be >= 1"));
            }
            if !(*window > 0.0 && window.is_finite()) {
                return bad(format!("window = {window} must be > 0"));
            }
            if let Functional::Entropy { c_v } = functional {
                if !(*c_v > 1.0) {
                    return bad(format!("entropy c_v = {c_v} must be > 1"));
                }
            }
            Ok((*window, 0.0))
        }
        ObservableKind::WindowedMoment { component, wavevector, window, .. } => {
            if *component < 1 {
                return bad("component is one-based".into());
            }
            if wavevector.is_empty() {
                return bad("wavevector must be non-empty".into());
            }
            if !(*window > 0.0 && window.is_finite()) {
                return bad(format!("window = {window} must be > 0"));
            }
            Ok((*window, 0.0))
        }
        ObservableKind::Shifted { inner, offset } => {
            if !offset.is_finite() {
                return bad("offset must be finite".into());
            }
            let (b, f0) = describe(inner)?;
            Ok((b + offset.abs(), f0 + offset))
        }
    }
}

/// Smooth cap: one on `[0, n]`, raised cosine on `(n, 2n)`, zero beyond.
pub fn cutoff_weight(y: f64, n: f64) -> f64 {
    if y <= n {
        1.0
    } else if y < 2.0 * n {
        0.5 * (1.0 + (PI * (y - n) / n).cos())
    } else {
        0.0
    }
}

impl Observable {
    pub fn kind(&self) -> &ObservableKind {
        &self.kind
    }

    /// Declared bound `B` with `|F| <= B`.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// `F(0)`, the value at `U_inf`.
    pub fn at_infinity(&self) -> f64 {
        self.at_infinity
    }

    pub fn evaluate(&self, state: &ExtendedState) -> Result<f64, MetricError> {
        match state {
            ExtendedState::Regular(s) if s.in_x_plus() => evaluate_kind(&self.kind, s, self.q),
            _ => Ok(self.at_infinity),
        }
    }
}

fn evaluate_kind(kind: &ObservableKind, state: &State, q: f64) -> Result<f64, MetricError> {
    match kind {
        ObservableKind::Cutoff { n, functional, window } => {
            let chi = cutoff_weight(sobolev_norm_x(state, q)?.total(), *n);
            if chi == 0.0 {
                return Ok(0.0);
            }
            Ok(chi * functional.evaluate(state)?.clamp(-window, *window))
        }
        ObservableKind::WindowedMoment { component, wavevector, sine, window } => {
            let (c, s) = state.fourier_coefficient(*component, wavevector)?;
            let f = if *sine { s } else { c };
            Ok((g_of_state(state, q)? * f).clamp(-window, *window))
        }
        ObservableKind::Shifted { inner, offset } => Ok(evaluate_kind(inner, state, q)? + offset),
    }
}
