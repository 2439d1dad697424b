//! Random initial data, push-forward of data measures through the extended
//! evolution, censored Monte Carlo estimates and the Markov-property checks.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extended::{
    least_squares_slope, ExtendedError, ExtendedEvolution, ExtendedState, StopReason,
    StoppingRecord,
};
use crate::fields::{FieldError, Grid, ScalarField, State};
use crate::metric::{half_space_wavevectors, MetricConfig, MetricError, Observable};

/// Seed spacing between replicates of a study.
pub const REPLICATE_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// Consecutive rejected draws after which a law counts as infeasible.
pub const MAX_REJECTIONS: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("member {member}: {attempts} consecutive draws violated the positivity margin")]
    DistributionInfeasible { member: u64, attempts: usize },
    #[error("atom {atom} refers to model {model}, but only {count} models were given")]
    UnknownModel { atom: usize, model: usize, count: usize },
    #[error("member {member}: {source}")]
    Member { member: usize, source: MetricError },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Extended(#[from] ExtendedError),
}

/// Law of the initial data: base constants plus an independent random
/// trigonometric perturbation of every component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataDistribution {
    pub rho_bar: f64,
    pub theta_bar: f64,
    /// Amplitude scale; the coefficient of mode `m` has standard deviation `sigma |m|^{-r}`.
    pub sigma: f64,
    /// Spectral decay exponent `r`.
    pub decay: f64,
    /// Active band `|m|_inf <= m_max`.
    pub m_max: u32,
    /// Required lower bound for `rho_0` and `theta_0`.
    pub margin: f64,
    pub seed: u64,
}

impl Default for DataDistribution {
    fn default() -> Self {
        Self {
            rho_bar: 1.0,
            theta_bar: 1.0,
            sigma: 0.1,
            decay: 2.0,
            m_max: 4,
            margin: 0.2,
            seed: 0,
        }
    }
}

impl DataDistribution {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                v.push(msg);
            }
        };
        check(self.rho_bar > 0.0, format!("rho_bar = {} must be > 0", self.rho_bar));
        check(self.theta_bar > 0.0, format!("theta_bar = {} must be > 0", self.theta_bar));
        check(self.sigma >= 0.0, format!("sigma = {} must be >= 0", self.sigma));
        check(self.decay > 1.0, format!("decay = {} must be > 1", self.decay));
        check(self.margin > 0.0, format!("margin = {} must be > 0", self.margin));
        v
    }

    /// Same law, different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }

    /// Closed-form variance of the real cosine (or sine) moment of mode `m`
    /// of any component.
    pub fn moment_variance(&self, wavevector: &[i64]) -> f64 {
        let m2: f64 = wavevector.iter().map(|&v| (v * v) as f64).sum();
        if m2 == 0.0 || wavevector.iter().any(|v| v.unsigned_abs() > u64::from(self.m_max)) {
            return 0.0;
        }
        self.sigma.powi(2) * m2.powf(-self.decay) * 2f64.powi(wavevector.len() as i32) / 2.0
    }

    fn band(&self, dim: usize) -> Vec<Vec<i64>> {
        let r = self.m_max * dim as u32;
        half_space_wavevectors(dim, r)
            .into_iter()
            .filter(|m| m.iter().any(|&v| v != 0))
            .filter(|m| m.iter().all(|v| v.unsigned_abs() <= u64::from(self.m_max)))
            .collect()
    }
}

/// Draws member `member` from its own counter-based stream.
pub fn sample_member(dist: &DataDistribution, grid: &Grid, member: u64) -> Result<State, StatsError> {
    let v = dist.violations();
    if !v.is_empty() {
        return Err(StatsError::InvalidConfig(v));
    }
    if 2 * dist.m_max as usize >= grid.n() {
        return Err(StatsError::InvalidConfig(vec![format!(
            "m_max = {} must be below n/2 = {}",
            dist.m_max,
            grid.n() / 2
        )]));
    }
    let dim = grid.dim();
    let band = dist.band(dim);
    let amplitude: Vec<f64> = band
        .iter()
        .map(|m| {
            let norm = m.iter().map(|&v| (v * v) as f64).sum::<f64>().sqrt();
            dist.sigma * norm.powf(-dist.decay)
        })
        .collect();
    // phase[p][j] = pi m_j . x_p
    let phases: Vec<Vec<f64>> = (0..grid.len())
        .map(|p| {
            let x = grid.point(p);
            band.iter()
                .map(|m| PI * m.iter().zip(&x).map(|(&mi, xi)| mi as f64 * xi).sum::<f64>())
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(dist.seed);
    rng.set_stream(member);
    let unit = 3f64.sqrt();
    for _ in 0..MAX_REJECTIONS {
        let mut comps = Vec::with_capacity(dim + 2);
        for c in 0..dim + 2 {
            let base = match c {
                0 => dist.rho_bar,
                1 => dist.theta_bar,
                _ => 0.0,
            };
            let coeffs: Vec<(f64, f64)> = amplitude
                .iter()
                .map(|s| {
                    let a = unit * (2.0 * rng.random::<f64>() - 1.0);
                    let b = unit * (2.0 * rng.random::<f64>() - 1.0);
                    (s * a, s * b)
                })
                .collect();
            let values = phases
                .iter()
                .map(|ph| {
                    base + coeffs
                        .iter()
                        .zip(ph)
                        .map(|((a, b), p)| a * p.cos() + b * p.sin())
                        .sum::<f64>()
                })
                .collect();
            comps.push(ScalarField::new(grid, values)?);
        }
        let state = State::from_components(comps)?;
        if state.rho.min() >= dist.margin && state.theta.min() >= dist.margin {
            return Ok(state);
        }
    }
    Err(StatsError::DistributionInfeasible { member, attempts: MAX_REJECTIONS })
}

/// Members `0..count` of the law.
pub fn sample_initial_data(
    dist: &DataDistribution,
    grid: &Grid,
    count: usize,
) -> Result<Vec<State>, StatsError> {
    if count == 0 {
        return Err(StatsError::InvalidConfig(vec!["member count must be >= 1".into()]));
    }
    (0..count as u64).map(|i| sample_member(dist, grid, i)).collect()
}

/// Finite probability measure: weighted atoms or a weighted mixture of measures.
#[derive(Debug, Clone, PartialEq)]
pub enum Measure<A> {
    Atoms(Vec<(f64, A)>),
    Mixture(Vec<(f64, Measure<A>)>),
}

impl<A> Measure<A> {
    /// Equal weights `1/n`.
    pub fn empirical(atoms: Vec<A>) -> Self {
        let w = 1.0 / atoms.len() as f64;
        Self::Atoms(atoms.into_iter().map(|a| (w, a)).collect())
    }

    /// Atoms in depth-first order.
    pub fn atoms(&self) -> Vec<&A> {
        let mut out = Vec::new();
        self.collect_atoms(&mut out);
        out
    }

    fn collect_atoms<'a>(&'a self, out: &mut Vec<&'a A>) {
        match self {
            Self::Atoms(v) => out.extend(v.iter().map(|(_, a)| a)),
            Self::Mixture(v) => v.iter().for_each(|(_, m)| m.collect_atoms(out)),
        }
    }

    /// Atoms with their absolute weights, in depth-first order.
    pub fn weighted_atoms(&self) -> Vec<(f64, &A)> {
        let mut out = Vec::new();
        self.collect_weighted(1.0, &mut out);
        out
    }

    fn collect_weighted<'a>(&'a self, scale: f64, out: &mut Vec<(f64, &'a A)>) {
        match self {
            Self::Atoms(v) => out.extend(v.iter().map(|(w, a)| (scale * w, a))),
            Self::Mixture(v) => v.iter().for_each(|(l, m)| m.collect_weighted(scale * l, out)),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Atoms(v) => v.len(),
            Self::Mixture(v) => v.iter().map(|(_, m)| m.len()).sum(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total weight, reduced in the same structured order as every estimate.
    pub fn total_mass(&self) -> f64 {
        self.integrate(&|_| vec![1.0])[0]
    }

    /// Replaces atoms in depth-first order, keeping weights and structure.
    pub fn rebuild<B>(&self, values: &mut impl Iterator<Item = B>) -> Measure<B> {
        match self {
            Self::Atoms(v) => Measure::Atoms(
                v.iter().map(|(w, _)| (*w, values.next().expect("one value per atom"))).collect(),
            ),
            Self::Mixture(v) => {
                Measure::Mixture(v.iter().map(|(l, m)| (*l, m.rebuild(values))).collect())
            }
        }
    }

    /// `int f dmu` for a vector-valued integrand, reduced deterministically:
    /// weighted terms are sorted and summed pairwise at every level, so the
    /// result does not depend on atom order or scheduling.
    pub fn integrate(&self, f: &dyn Fn(&A) -> Vec<f64>) -> Vec<f64> {
        let terms: Vec<(f64, Vec<f64>)> = match self {
            Self::Atoms(v) => v.iter().map(|(w, a)| (*w, f(a))).collect(),
            Self::Mixture(v) => v.iter().map(|(l, m)| (*l, m.integrate(f))).collect(),
        };
        reduce_weighted(&terms)
    }
}

fn reduce_weighted(terms: &[(f64, Vec<f64>)]) -> Vec<f64> {
    let Some((_, first)) = terms.first() else {
        return Vec::new();
    };
    let mut column = Vec::with_capacity(terms.len());
    (0..first.len())
        .map(|k| {
            column.clear();
            column.extend(terms.iter().map(|(w, v)| w * v[k]));
            deterministic_sum(&mut column)
        })
        .collect()
}

/// Order-independent sum: sort, then pairwise reduction.
pub fn deterministic_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    pairwise(values)
}

fn pairwise(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        2 => v[0] + v[1],
        n => pairwise(&v[..n / 2]) + pairwise(&v[n / 2..]),
    }
}

/// Initial datum paired with the index of its (forcing, parameter) model.
#[derive(Debug, Clone, PartialEq)]
pub struct DataAtom {
    pub initial: ExtendedState,
    pub model: usize,
}

/// One evolved member: states at the query times and its stopping record.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub states: Vec<ExtendedState>,
    pub record: StoppingRecord,
    pub model: usize,
}

/// `M_t nu` at every query time, sharing the structure of `nu`.
#[derive(Debug, Clone, PartialEq)]
pub struct PushForward {
    pub times: Vec<f64>,
    pub members: Measure<Member>,
}

impl PushForward {
    /// The push-forward measure at query index `i`.
    pub fn measure_at(&self, i: usize) -> Measure<ExtendedState> {
        let mut states = self.members.atoms().into_iter().map(|m| m.states[i].clone());
        self.members.rebuild(&mut states)
    }

    pub fn records(&self) -> Vec<StoppingRecord> {
        self.members.atoms().iter().map(|m| m.record).collect()
    }
}

fn evolve_member(model: &ExtendedEvolution, initial: &ExtendedState, times: &[f64]) -> (Vec<ExtendedState>, StoppingRecord) {
    match catch_unwind(AssertUnwindSafe(|| model.evolve_at(initial, times))) {
        Ok(v) => v,
        Err(_) => (
            vec![ExtendedState::Infinity; times.len()],
            StoppingRecord { t_stop: 0.0, reason: StopReason::NonFinite, peak_value: f64::NAN },
        ),
    }
}

/// Evolves every atom on `pool`; a panicking solve becomes an absorbed member.
pub fn push_forward(
    measure: &Measure<DataAtom>,
    models: &[ExtendedEvolution],
    times: &[f64],
    pool: &ThreadPool,
) -> Result<PushForward, StatsError> {
    if times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(StatsError::InvalidConfig(vec![
            "query times must be finite, non-negative and sorted".into(),
        ]));
    }
    let atoms = measure.atoms();
    for (i, a) in atoms.iter().enumerate() {
        if a.model >= models.len() {
            return Err(StatsError::UnknownModel { atom: i, model: a.model, count: models.len() });
        }
    }
    let evolved: Vec<Member> = pool.install(|| {
        atoms
            .par_iter()
            .map(|a| {
                let (states, record) = evolve_member(&models[a.model], &a.initial, times);
                Member { states, record, model: a.model }
            })
            .collect()
    });
    let members = measure.rebuild(&mut evolved.into_iter());
    Ok(PushForward { times: times.to_vec(), members })
}

/// Mean of one observable at one query time with its censoring split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObservableSummary {
    /// `int F dM_t`.
    pub mean: f64,
    /// `int F 1_{t < T_stop} dM_t`.
    pub censored_sum: f64,
    /// `F(0)`.
    pub at_infinity: f64,
    /// Normal-approximation 95% half-width of the mean.
    pub half_width: f64,
}

impl ObservableSummary {
    /// `|mean - (censored_sum + F(0) blowup_fraction)|`.
    pub fn censoring_defect(&self, blowup_fraction: f64) -> f64 {
        (self.mean - (self.censored_sum + self.at_infinity * blowup_fraction)).abs()
    }
}

/// Estimates at one query time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSlice {
    pub time: f64,
    pub measure: Measure<ExtendedState>,
    pub blowup_fraction: f64,
    /// Censored mean of `rho`.
    pub rho_moment: ScalarField,
    /// Censored mean of `rho u_i`, one field per axis.
    pub momentum_moment: Vec<ScalarField>,
    /// Censored mean of `rho (c_v ln theta - ln rho)`.
    pub entropy_moment: ScalarField,
    pub observables: Vec<ObservableSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleEstimate {
    /// Number of atoms.
    pub n: usize,
    pub slices: Vec<TimeSlice>,
    pub records: Vec<StoppingRecord>,
}

/// Censored moments and observable summaries of a push-forward.
pub fn estimate(
    push: &PushForward,
    grid: &Grid,
    models: &[ExtendedEvolution],
    observables: &[Observable],
) -> Result<EnsembleEstimate, StatsError> {
    let dim = grid.dim();
    let len = grid.len();
    let n = push.members.len();
    let mut slices = Vec::with_capacity(push.times.len());
    for (ti, &time) in push.times.iter().enumerate() {
        // evaluate observables once per member; errors carry the member index
        let atoms = push.members.atoms();
        let mut values = Vec::with_capacity(atoms.len());
        for (i, m) in atoms.iter().enumerate() {
            let row = observables
                .iter()
                .map(|o| o.evaluate(&m.states[ti]))
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|source| StatsError::Member { member: i, source })?;
            values.push(row);
        }
        let mut rows = values.into_iter();
        let tagged = push.members.rebuild(&mut atoms.iter().map(|m| (*m, rows.next().expect("row"))));

        let integrand = |(m, obs): &(&Member, Vec<f64>)| -> Vec<f64> {
            let mut out = Vec::with_capacity(1 + (dim + 2) * len + 3 * obs.len());
            let alive = match &m.states[ti] {
                ExtendedState::Regular(s) if m.record.alive_at(time) => Some(s),
                _ => None,
            };
            out.push(if alive.is_some() { 0.0 } else { 1.0 });
            match alive {
                Some(s) => {
                    let c_v = models[m.model].params().c_v;
                    out.extend_from_slice(s.rho.values());
                    for u in s.u.components() {
                        out.extend(s.rho.values().iter().zip(u.values()).map(|(r, v)| r * v));
                    }
                    out.extend(
                        s.rho
                            .values()
                            .iter()
                            .zip(s.theta.values())
                            .map(|(r, t)| r * (c_v * t.ln() - r.ln())),
                    );
                }
                None => out.extend(std::iter::repeat_n(0.0, (dim + 2) * len)),
            }
            for &v in obs {
                out.push(v);
                out.push(if alive.is_some() { v } else { 0.0 });
                out.push(v * v);
            }
            out
        };
        let totals = tagged.integrate(&integrand);
        let blowup_fraction = totals[0];
        let field = |k: usize| ScalarField::new(grid, totals[1 + k * len..1 + (k + 1) * len].to_vec());
        let rho_moment = field(0)?;
        let momentum_moment = (1..=dim).map(field).collect::<Result<Vec<_>, _>>()?;
        let entropy_moment = field(dim + 1)?;
        let base = 1 + (dim + 2) * len;
        let summaries = observables
            .iter()
            .enumerate()
            .map(|(j, o)| {
                let (mean, censored_sum, second) =
                    (totals[base + 3 * j], totals[base + 3 * j + 1], totals[base + 3 * j + 2]);
                let var = (second - mean * mean).max(0.0);
                ObservableSummary {
                    mean,
                    censored_sum,
                    at_infinity: o.at_infinity(),
                    half_width: 1.96 * (var / n as f64).sqrt(),
                }
            })
            .collect();
        slices.push(TimeSlice {
            time,
            measure: push.measure_at(ti),
            blowup_fraction,
            rho_moment,
            momentum_moment,
            entropy_moment,
            observables: summaries,
        });
    }
    Ok(EnsembleEstimate { n, slices, records: push.records() })
}

/// Empirical data measure of `count` members of `dist`, all using model 0.
pub fn data_measure(dist: &DataDistribution, grid: &Grid, count: usize) -> Result<Measure<DataAtom>, StatsError> {
    let states = sample_initial_data(dist, grid, count)?;
    Ok(Measure::empirical(
        states
            .into_iter()
            .map(|s| DataAtom { initial: ExtendedState::Regular(s), model: 0 })
            .collect(),
    ))
}

/// Samples, pushes forward and estimates in one call.
pub fn pushforward_estimate(
    dist: &DataDistribution,
    grid: &Grid,
    model: &ExtendedEvolution,
    times: &[f64],
    count: usize,
    observables: &[Observable],
    pool: &ThreadPool,
) -> Result<EnsembleEstimate, StatsError> {
    let measure = data_measure(dist, grid, count)?;
    let models = std::slice::from_ref(model);
    let push = push_forward(&measure, models, times, pool)?;
    estimate(&push, grid, models, observables)
}

/// `int |f - g|` over the torus.
pub fn l1_distance(a: &ScalarField, b: &ScalarField) -> Result<f64, FieldError> {
    Ok(a.zip_with(b, |x, y| (x - y).abs())?.integral())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SllnConfig {
    /// Increasing prefix sizes.
    pub n_list: Vec<usize>,
    pub replicates: usize,
    /// Reference ensemble size; raised to `8 max(n_list)` when smaller.
    pub n_ref: usize,
    /// Seed of the reference ensemble, independent of the replicate seeds.
    pub reference_seed: u64,
    pub time: f64,
}

impl Default for SllnConfig {
    fn default() -> Self {
        Self {
            n_list: vec![16, 32, 64, 128, 256, 512, 1024],
            replicates: 8,
            n_ref: 8192,
            reference_seed: 0x0005_EED0_F2EF,
            time: 0.1,
        }
    }
}

impl SllnConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_list.is_empty() || self.n_list[0] == 0 || self.n_list.windows(2).any(|w| w[1] <= w[0]) {
            v.push("n_list must be non-empty, positive and strictly increasing".into());
        }
        if self.replicates == 0 {
            v.push("replicates must be >= 1".into());
        }
        if !(self.time >= 0.0 && self.time.is_finite()) {
            v.push(format!("time = {} must be finite and >= 0", self.time));
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SllnRow {
    pub n: usize,
    /// L1 error against the reference, averaged over replicates.
    pub mean_error: f64,
    pub errors: Vec<f64>,
    /// Half-width of the tracked observable, averaged over replicates.
    pub mean_half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SllnReport {
    pub n_ref: usize,
    pub rows: Vec<SllnRow>,
    /// Log-log slope of mean error against `n`; NaN when it is undefined.
    pub slope: f64,
}

/// Censored-density convergence with the ensemble size. Each replicate
/// evolves `max(n_list)` members once and evaluates every prefix.
pub fn slln_convergence_study(
    dist: &DataDistribution,
    grid: &Grid,
    model: &ExtendedEvolution,
    config: &SllnConfig,
    observable: &Observable,
    pool: &ThreadPool,
) -> Result<SllnReport, StatsError> {
    let v = config.violations();
    if !v.is_empty() {
        return Err(StatsError::InvalidConfig(v));
    }
    let n_max = *config.n_list.last().expect("non-empty");
    let n_ref = config.n_ref.max(8 * n_max);
    let models = std::slice::from_ref(model);
    let times = [config.time];
    let rho_prefix = |push: &PushForward, n: usize| -> Result<(ScalarField, f64), StatsError> {
        let prefix = Measure::empirical(push.members.atoms()[..n].iter().map(|m| (*m).clone()).collect());
        let sub = PushForward { times: times.to_vec(), members: prefix };
        let est = estimate(&sub, grid, models, std::slice::from_ref(observable))?;
        let slice = &est.slices[0];
        Ok((slice.rho_moment.clone(), slice.observables[0].half_width))
    };

    let reference = if dist.sigma == 0.0 {
        let push = push_forward(&data_measure(dist, grid, 1)?, models, &times, pool)?;
        rho_prefix(&push, 1)?.0
    } else {
        let ref_dist = dist.with_seed(config.reference_seed);
        let push = push_forward(&data_measure(&ref_dist, grid, n_ref)?, models, &times, pool)?;
        rho_prefix(&push, n_ref)?.0
    };

    let mut errors = vec![Vec::with_capacity(config.replicates); config.n_list.len()];
    let mut widths = vec![0.0; config.n_list.len()];
    for r in 0..config.replicates as u64 {
        let rep = dist.with_seed(dist.seed.wrapping_add(r.wrapping_mul(REPLICATE_SEED_STRIDE)));
        let push = push_forward(&data_measure(&rep, grid, n_max)?, models, &times, pool)?;
        for (k, &n) in config.n_list.iter().enumerate() {
            let (rho, hw) = rho_prefix(&push, n)?;
            errors[k].push(l1_distance(&rho, &reference)?);
            widths[k] += hw / config.replicates as f64;
        }
    }
    let rows: Vec<SllnRow> = config
        .n_list
        .iter()
        .zip(errors)
        .zip(widths)
        .map(|((&n, errs), w)| SllnRow {
            n,
            mean_error: errs.iter().sum::<f64>() / errs.len() as f64,
            errors: errs,
            mean_half_width: w,
        })
        .collect();
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.mean_error > 0.0)
        .map(|r| ((r.n as f64).ln(), r.mean_error.ln()))
        .collect();
    Ok(SllnReport { n_ref, rows, slope: least_squares_slope(&pts) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarkovReport {
    /// `M_0 nu = nu` atom by atom, weights included.
    pub identity_at_zero: bool,
    /// Members whose `U(s + t)` and `U(U(s))(t)` differ bitwise.
    pub semigroup_failures: usize,
    /// Largest metric discrepancy of the per-member semigroup check.
    pub semigroup_max_discrepancy: f64,
    /// Mixture atoms equal the separately evolved atoms bitwise.
    pub mixture_atoms_identical: bool,
    /// `|mean(mixture) - (lambda mean_A + (1 - lambda) mean_B)|`, maximum over observables and times.
    pub mixture_defect: f64,
    /// Same for the finite-parameter product form.
    pub product_defect: f64,
    pub product_atoms_identical: bool,
}

impl MarkovReport {
    pub fn passed(&self) -> bool {
        self.identity_at_zero
            && self.semigroup_failures == 0
            && self.mixture_atoms_identical
            && self.mixture_defect == 0.0
            && self.product_atoms_identical
            && self.product_defect == 0.0
    }
}

/// Inputs of the Markov-property check.
pub struct MarkovSetup<'a> {
    pub grid: &'a Grid,
    /// Two data laws for the mixture identity.
    pub laws: [DataDistribution; 2],
    pub lambda: f64,
    pub count: usize,
    /// Weighted finite parameter set for the product form; entry 0 drives
    /// the mixture and semigroup checks.
    pub models: &'a [(f64, ExtendedEvolution)],
    pub s: f64,
    pub t: f64,
    pub observables: &'a [Observable],
    pub metric: MetricConfig,
}

fn combine(parts: &[(f64, &EnsembleEstimate)]) -> Vec<Vec<f64>> {
    let n_times = parts[0].1.slices.len();
    (0..n_times)
        .map(|ti| {
            let n_obs = parts[0].1.slices[ti].observables.len();
            (0..n_obs)
                .map(|j| {
                    let mut terms: Vec<f64> =
                        parts.iter().map(|(w, e)| w * e.slices[ti].observables[j].mean).collect();
                    deterministic_sum(&mut terms)
                })
                .collect()
        })
        .collect()
}

fn defect(total: &EnsembleEstimate, combined: &[Vec<f64>]) -> f64 {
    total
        .slices
        .iter()
        .zip(combined)
        .flat_map(|(s, c)| s.observables.iter().zip(c).map(|(o, v)| (o.mean - v).abs()))
        .fold(0.0, f64::max)
}

/// Markov operator identities under matched seeds and fixed steps.
pub fn markov_property_check(setup: &MarkovSetup<'_>, pool: &ThreadPool) -> Result<MarkovReport, StatsError> {
    let grid = setup.grid;
    let models: Vec<ExtendedEvolution> = setup.models.iter().map(|(_, m)| m.clone()).collect();
    if models.is_empty() {
        return Err(StatsError::InvalidConfig(vec!["at least one model is required".into()]));
    }
    if !(0.0..=1.0).contains(&setup.lambda) {
        return Err(StatsError::InvalidConfig(vec![format!("lambda = {} must lie in [0, 1]", setup.lambda)]));
    }
    let times = [setup.s, setup.s + setup.t];
    let run = |m: &Measure<DataAtom>| -> Result<(PushForward, EnsembleEstimate), StatsError> {
        let push = push_forward(m, &models, &times, pool)?;
        let est = estimate(&push, grid, &models, setup.observables)?;
        Ok((push, est))
    };
    let with_model = |m: &Measure<DataAtom>, model: usize| -> Measure<DataAtom> {
        let mut atoms = m.atoms().into_iter().map(|a| DataAtom { initial: a.initial.clone(), model });
        m.rebuild(&mut atoms)
    };

    let nu_a = data_measure(&setup.laws[0], grid, setup.count)?;
    let nu_b = data_measure(&setup.laws[1], grid, setup.count)?;

    // (0) M_0 = identity
    let zero = push_forward(&nu_a, &models, &[0.0], pool)?;
    let identity_at_zero = zero.measure_at(0).weighted_atoms().iter().map(|(w, s)| (*w, (*s).clone())).eq(
        nu_a.weighted_atoms().iter().map(|(w, a)| (*w, a.initial.clone())),
    );

    // (i) per-member semigroup
    let checks: Vec<_> = pool.install(|| {
        nu_a.atoms()
            .par_iter()
            .map(|a| models[0].semigroup_check(&a.initial, setup.s, setup.t, &setup.metric))
            .collect::<Result<Vec<_>, _>>()
    })?;
    let semigroup_failures = checks.iter().filter(|r| !r.bit_identical).count();
    let semigroup_max_discrepancy = checks.iter().map(|r| r.discrepancy).fold(0.0, f64::max);

    // (ii) convex mixture
    let lambda = setup.lambda;
    let mixture = Measure::Mixture(vec![(lambda, nu_a.clone()), (1.0 - lambda, nu_b.clone())]);
    let (push_mix, est_mix) = run(&mixture)?;
    let (push_a, est_a) = run(&nu_a)?;
    let (push_b, est_b) = run(&nu_b)?;
    let separate: Vec<&Member> = push_a.members.atoms().into_iter().chain(push_b.members.atoms()).collect();
    let mixture_atoms_identical = push_mix.members.atoms() == separate;
    let mixture_defect = defect(&est_mix, &combine(&[(lambda, &est_a), (1.0 - lambda, &est_b)]));

    // (iii) product form over the finite parameter set
    let product = Measure::Mixture(
        setup.models.iter().enumerate().map(|(j, (w, _))| (*w, with_model(&nu_a, j))).collect(),
    );
    let (push_prod, est_prod) = run(&product)?;
    let mut parts = Vec::with_capacity(setup.models.len());
    let mut separate = Vec::new();
    for j in 0..setup.models.len() {
        let (push_j, est_j) = run(&with_model(&nu_a, j))?;
        separate.extend(push_j.members.atoms().into_iter().cloned());
        parts.push((setup.models[j].0, est_j));
    }
    let product_atoms_identical = push_prod.members.atoms().into_iter().eq(separate.iter());
    let refs: Vec<(f64, &EnsembleEstimate)> = parts.iter().map(|(w, e)| (*w, e)).collect();
    let product_defect = defect(&est_prod, &combine(&refs));

    Ok(MarkovReport {
        identity_at_zero,
        semigroup_failures,
        semigroup_max_discrepancy,
        mixture_atoms_identical,
        mixture_defect,
        product_defect,
        product_atoms_identical,
    })
}
