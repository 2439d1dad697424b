//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::f64::consts::PI;
use std::process::ExitCode;
use std::time::Instant;

use nsf_cli::config::{parse_config, Mode};
use nsf_cli::run::run;
use nsf_core::extended::{ExtendedEvolution, ExtendedState, StopReason, StoppingConfig};
use nsf_core::fields::{Grid, ScalarField, State, VectorField};
use nsf_core::metric::{
    convergence_mode, make_observable, metric_d, ConvergenceMode, Functional, MetricConfig,
    Observable, ObservableKind,
};
use nsf_core::solver::{
    solve, Forcing, NsfModel, Parameters, Recording, SolverConfig, SolverError, Source,
    TrajectoryEnd,
};
use nsf_core::statistics::{
    estimate, markov_property_check, push_forward, sample_initial_data, sample_member,
    slln_convergence_study, DataAtom, DataDistribution, MarkovSetup, Measure, SllnConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::{ThreadPool, ThreadPoolBuilder};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn pool(workers: usize) -> ThreadPool {
    ThreadPoolBuilder::new().num_threads(workers).build().unwrap()
}

fn params() -> Parameters {
    Parameters::new(2.5, 0.05, 0.01, 0.05).unwrap()
}

fn evolution(grid: &Grid, heat: f64, dt: f64, threshold_m: f64) -> ExtendedEvolution {
    let forcing = Forcing::new(VectorField::zeros(grid), ScalarField::constant(grid, heat)).unwrap();
    let stopping = StoppingConfig { threshold_m, ..StoppingConfig::default() };
    ExtendedEvolution::new(params(), forcing, SolverConfig::fixed(dt), stopping).unwrap()
}

fn smooth(grid: &Grid, amp: f64) -> State {
    let rho = ScalarField::from_fn(grid, |x| 1.0 + amp * (PI * x[0]).cos()).unwrap();
    let theta = ScalarField::from_fn(grid, |x| 1.0 + amp * (PI * x[0] + 0.3).sin()).unwrap();
    let u = ScalarField::from_fn(grid, |x| amp * (2.0 * PI * x[0]).sin()).unwrap();
    State::new(rho, theta, VectorField::new(vec![u]).unwrap()).unwrap()
}

// 1D run shared by the conservation and entropy criteria.
fn conservation_data() -> (Grid, State, Parameters) {
    let grid = Grid::new(1, 128).unwrap();
    let dist = DataDistribution { sigma: 0.1, decay: 2.0, m_max: 4, seed: 7, ..DataDistribution::default() };
    let state = sample_member(&dist, &grid, 0).unwrap();
    (grid, state, Parameters::new(2.5, 0.02, 0.01, 0.03).unwrap())
}

const CONSERVATION_DT: f64 = 2e-3;

fn conservation() -> Outcome {
    let (grid, s0, p) = conservation_data();
    let mut mass_drift = 0.0f64;
    let mut drift = Vec::new();
    for dt in [CONSERVATION_DT, CONSERVATION_DT / 2.0] {
        let traj = solve(&s0, 0.5, &p, &Forcing::none(&grid), &SolverConfig::fixed(dt)).map_err(fail)?;
        let first = traj.diagnostics[0];
        for d in &traj.diagnostics {
            mass_drift = mass_drift.max((d.total_mass - first.total_mass).abs() / first.total_mass);
        }
        drift.push((traj.diagnostics.last().unwrap().total_energy - first.total_energy).abs());
    }
    let ratio = drift[0] / drift[1];
    check(
        mass_drift <= 1e-10 && (10.0..=22.0).contains(&ratio),
        format!("mass drift {mass_drift:.2e}, energy drift {:.3e} -> {:.3e}, ratio {ratio:.2}", drift[0], drift[1]),
    )
}

fn entropy_inequality() -> Outcome {
    let (grid, s0, p) = conservation_data();
    let traj = solve(&s0, 0.5, &p, &Forcing::none(&grid), &SolverConfig::fixed(CONSERVATION_DT / 2.0))
        .map_err(fail)?;
    let first = traj.diagnostics[0];
    let worst = traj
        .diagnostics
        .iter()
        .skip(1)
        .map(|d| (d.entropy - first.entropy) - d.entropy_production_integral + 1e-6 * d.time)
        .fold(f64::INFINITY, f64::min);
    check(worst >= 0.0, format!("{} records, min margin {worst:.3e}", traj.diagnostics.len()))
}

fn fixed_point() -> Outcome {
    let grid = Grid::new(1, 32).unwrap();
    let s0 = State::constant(&grid, 1.3, 0.7);
    let dt = 1e-3;
    let traj = solve(&s0, 1e4 * dt, &params(), &Forcing::none(&grid), &SolverConfig::fixed(dt)).map_err(fail)?;
    let steps = traj.diagnostics.len() - 1;
    let err = traj.final_state().sup_distance(&s0).map_err(fail)?;
    check(steps == 10_000 && err <= 1e-12, format!("{steps} steps, sup deviation {err:.2e}"))
}

const R: f64 = 0.5;

// Poisson-kernel profile minus its mean, with its first two derivatives.
fn poisson(x: f64) -> (f64, f64, f64) {
    let a = 1.0 - R * R;
    let d = 1.0 - 2.0 * R * (PI * x).cos() + R * R;
    let p = a / d - 1.0;
    let p1 = -a * 2.0 * R * PI * (PI * x).sin() / (d * d);
    let p2 = -a * 2.0 * R * PI * PI * (PI * x).cos() / (d * d)
        + a * 8.0 * R * R * PI * PI * (PI * x).sin().powi(2) / (d * d * d);
    (p, p1, p2)
}

struct Manufactured;

// (value, t, x, xx) derivatives
type Jet = (f64, f64, f64, f64);

impl Manufactured {
    fn fields(t: f64, x: f64) -> [Jet; 3] {
        let (p, p1, p2) = poisson(x);
        let (q, q1, q2) = poisson(x - 0.25);
        let (w, w1, w2) = poisson(x + 0.4);
        let (a, at) = (0.1 * t.cos(), -0.1 * t.sin());
        let (b, bt) = (0.1 * (1.0 + 0.5 * t.sin()), 0.05 * t.cos());
        let (c, ct) = (0.1 * (2.0 * t).cos(), -0.2 * (2.0 * t).sin());
        [
            (1.0 + a * p, at * p, a * p1, a * p2),
            (1.0 + b * q, bt * q, b * q1, b * q2),
            (c * w, ct * w, c * w1, c * w2),
        ]
    }

    fn state(grid: &Grid, t: f64) -> State {
        let comp = |k: usize| ScalarField::from_fn(grid, |x| Self::fields(t, x[0])[k].0).unwrap();
        State::new(comp(0), comp(1), VectorField::new(vec![comp(2)]).unwrap()).unwrap()
    }
}

impl Source for Manufactured {
    fn tendency(&self, time: f64, grid: &Grid) -> Result<State, SolverError> {
        let p = params();
        let nu = 4.0 / 3.0 * p.mu + p.eta;
        let mut s = [Vec::new(), Vec::new(), Vec::new()];
        for i in 0..grid.len() {
            let [(r, rt, rx, _), (th, tht, thx, thxx), (u, ut, ux, uxx)] = Self::fields(time, grid.coordinate(i));
            s[0].push(rt + rx * u + r * ux);
            s[1].push(tht + u * thx - (p.kappa * thxx + nu * ux * ux) / (p.c_v * r) + th * ux / p.c_v);
            s[2].push(ut + u * ux + (rx * th + r * thx) / r - nu * uxx / r);
        }
        let [a, b, c] = s.map(|v| ScalarField::new(grid, v).unwrap());
        Ok(State::new(a, b, VectorField::new(vec![c])?)?)
    }
}

fn manufactured_error(n: usize) -> Result<f64, String> {
    let grid = Grid::new(1, n).unwrap();
    let mut model = NsfModel::new(params(), Forcing::none(&grid));
    model.dealias = false;
    let traj = model
        .integrate(
            &Manufactured::state(&grid, 0.0),
            &[0.1],
            &SolverConfig::fixed(5e-4),
            Recording::Targets,
            Some(&Manufactured),
            |_, _| false,
        )
        .map_err(fail)?;
    if traj.end != TrajectoryEnd::Completed {
        return Err(format!("N={n} ended with {:?}", traj.end));
    }
    traj.final_state().sup_distance(&Manufactured::state(&grid, 0.1)).map_err(fail)
}

fn manufactured() -> Outcome {
    let e32 = manufactured_error(32)?;
    let e64 = manufactured_error(64)?;
    check(e64 <= 1e-6 && e32 / e64 >= 10.0, format!("N=32 {e32:.2e}, N=64 {e64:.2e}, factor {:.1}", e32 / e64))
}

fn random_extended(grid: &Grid, rng: &mut ChaCha8Rng) -> ExtendedState {
    if rng.random_bool(0.2) {
        return ExtendedState::Infinity;
    }
    let mut field = |base: f64| {
        let (a, b, c): (f64, f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..PI));
        ScalarField::from_fn(grid, |x| base + a * (PI * x[0]).cos() + b * (2.0 * PI * x[0] + c).sin()).unwrap()
    };
    let (rho, theta, u) = (field(2.0), field(2.0), field(0.0));
    ExtendedState::Regular(State::new(rho, theta, VectorField::new(vec![u]).unwrap()).unwrap())
}

fn metric_axioms() -> Outcome {
    let grid = Grid::new(1, 16).unwrap();
    let cfg = MetricConfig::default();
    let d = |x: &ExtendedState, y: &ExtendedState| metric_d(x, y, &cfg).map_err(fail);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut asym, mut tri, mut self_d) = (0.0f64, f64::NEG_INFINITY, 0.0f64);
    for _ in 0..1000 {
        let [u, v, w] = [(); 3].map(|_| random_extended(&grid, &mut rng));
        asym = asym.max((d(&u, &v)? - d(&v, &u)?).abs());
        tri = tri.max(d(&u, &w)? - d(&u, &v)? - d(&v, &w)?);
        self_d = self_d.max(d(&u, &u)?);
    }
    let ray: Vec<ExtendedState> = (0..12)
        .map(|j| {
            let amp = 2f64.powi(j);
            let mut s = State::constant(&grid, 1.0, 1.0);
            s.u = VectorField::new(vec![ScalarField::from_fn(&grid, |x| amp * (PI * x[0]).sin()).unwrap()]).unwrap();
            ExtendedState::Regular(s)
        })
        .collect();
    let to_inf: Vec<f64> = ray.iter().map(|s| d(s, &ExtendedState::Infinity)).collect::<Result<_, _>>()?;
    let mode = convergence_mode(&ray, &ExtendedState::Infinity, &cfg).map_err(fail)?;
    let decreasing = to_inf.windows(2).all(|w| w[1] < w[0]);
    check(
        asym == 0.0 && tri <= 1e-12 && self_d == 0.0 && decreasing && mode == ConvergenceMode::ToInfinity,
        format!(
            "asymmetry {asym:e}, triangle excess {tri:.2e}, d(U,U) {self_d:e}, d(ray, inf) {:.2e} -> {:.2e} ({mode:?})",
            to_inf[0],
            to_inf.last().unwrap()
        ),
    )
}

fn semigroup() -> Outcome {
    let grid = Grid::new(1, 32).unwrap();
    let cfg = MetricConfig::default();
    let u0 = ExtendedState::Regular(smooth(&grid, 0.2));
    let mut lines = Vec::new();
    let mut ok = true;
    let cases = [(0.0, 0.0, 0.05), (0.0, 0.05, 0.05), (0.0, 0.1, 0.07), (20.0, 0.5, 0.5)];
    for (heat, s, t) in cases {
        let r = evolution(&grid, heat, 0.01, 6.0).semigroup_check(&u0, s, t, &cfg).map_err(fail)?;
        ok &= r.bit_identical && r.discrepancy == 0.0 && r.absorbed == (heat > 0.0);
        lines.push(format!("(s={s}, t={t}, heat={heat}) identical={} absorbed={}", r.bit_identical, r.absorbed));
    }
    let r = evolution(&grid, 0.0, 0.01, 6.0)
        .semigroup_check(&ExtendedState::Infinity, 0.1, 0.1, &cfg)
        .map_err(fail)?;
    ok &= r.bit_identical && r.absorbed;
    lines.push(format!("(infinity) identical={}", r.bit_identical));
    check(ok, lines.join("; "))
}

fn stopping_time() -> Outcome {
    let grid = Grid::new(1, 32).unwrap();
    let s0 = smooth(&grid, 0.2);
    let peak0 = s0.rho.add(&s0.theta).map_err(fail)?.max();
    let mut times = Vec::new();
    for m in [4.0, 6.0, 8.0] {
        let ev = evolution(&grid, 20.0, 0.01, m);
        let (_, rec) = ev.trajectory(&s0, &[5.0], Recording::Targets).map_err(fail)?;
        times.push(rec.t_stop);
    }
    let low = evolution(&grid, 20.0, 0.01, peak0);
    let (_, rec0) = low.trajectory(&s0, &[1.0], Recording::Targets).map_err(fail)?;
    let monotone = times.windows(2).all(|w| w[0] < w[1]) && times.iter().all(|t| t.is_finite());
    check(
        monotone && rec0.t_stop == 0.0 && rec0.reason == StopReason::ThresholdM,
        format!("T_M for M = 4, 6, 8: {times:?}; M = max(rho0 + theta0) gives {}", rec0.t_stop),
    )
}

fn stability() -> Outcome {
    let grid = Grid::new(1, 32).unwrap();
    let ev = evolution(&grid, 0.0, 0.01, 100.0);
    let r = ev.stability_probe(&smooth(&grid, 0.2), &[1e-2, 1e-3, 1e-4], 0.2).map_err(fail)?;
    let diffs: Vec<String> = r
        .rows
        .iter()
        .map(|row| row.sup_difference.map_or("inf".into(), |d| format!("{d:.3e}")))
        .collect();
    check(
        r.strictly_decreasing() && r.fitted_order >= 0.9,
        format!("sup differences [{}], order {:.3}", diffs.join(", "), r.fitted_order),
    )
}

fn test_observables() -> Vec<Observable> {
    let kinds = [
        ObservableKind::Cutoff { n: 50.0, functional: Functional::Mass, window: 10.0 },
        ObservableKind::Shifted {
            inner: Box::new(ObservableKind::WindowedMoment { component: 1, wavevector: vec![1], sine: false, window: 1.0 }),
            offset: 0.3,
        },
        ObservableKind::Shifted {
            inner: Box::new(ObservableKind::Cutoff { n: 50.0, functional: Functional::Entropy { c_v: 2.5 }, window: 10.0 }),
            offset: -1.7,
        },
    ];
    kinds.into_iter().map(|k| make_observable(k, 6.0).unwrap()).collect()
}

fn censoring() -> Outcome {
    // odd members are heated hard enough to be absorbed partway through
    let grid = Grid::new(1, 16).unwrap();
    let models = vec![evolution(&grid, 0.0, 0.01, 6.0), evolution(&grid, 30.0, 0.01, 6.0)];
    let dist = DataDistribution { sigma: 0.2, seed: 5, ..DataDistribution::default() };
    let atoms: Vec<DataAtom> = sample_initial_data(&dist, &grid, 24)
        .map_err(fail)?
        .into_iter()
        .enumerate()
        .map(|(i, s)| DataAtom { initial: ExtendedState::Regular(s), model: i % 2 })
        .collect();
    let times = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
    let push = push_forward(&Measure::empirical(atoms), &models, &times, &pool(4)).map_err(fail)?;
    let est = estimate(&push, &grid, &models, &test_observables()).map_err(fail)?;
    let fractions: Vec<f64> = est.slices.iter().map(|s| s.blowup_fraction).collect();
    let defect = est
        .slices
        .iter()
        .flat_map(|s| s.observables.iter().map(|o| o.censoring_defect(s.blowup_fraction)))
        .fold(0.0, f64::max);
    let mixed = fractions.iter().any(|&f| f > 0.0 && f < 1.0);
    let monotone = fractions.windows(2).all(|w| w[1] >= w[0]);
    check(
        defect <= 1e-14 && mixed && monotone,
        format!("max defect {defect:.2e}, blowup fractions {fractions:?}"),
    )
}

fn slln() -> Outcome {
    let grid = Grid::new(1, 16).unwrap();
    let dist = DataDistribution { sigma: 0.1, seed: 21, ..DataDistribution::default() };
    let cfg = SllnConfig {
        n_list: vec![16, 32, 64, 128, 256, 512, 1024],
        replicates: 8,
        n_ref: 8192,
        time: 0.1,
        ..SllnConfig::default()
    };
    let obs = &test_observables()[1];
    let report = slln_convergence_study(&dist, &grid, &evolution(&grid, 0.0, 0.01, 6.0), &cfg, obs, &pool(4))
        .map_err(fail)?;
    let errors: Vec<String> = report.rows.iter().map(|r| format!("{}:{:.2e}", r.n, r.mean_error)).collect();
    check(
        (-0.65..=-0.35).contains(&report.slope),
        format!("slope {:.3} (N_ref {}), errors [{}]", report.slope, report.n_ref, errors.join(", ")),
    )
}

fn markov() -> Outcome {
    let grid = Grid::new(1, 16).unwrap();
    let models = vec![(0.3, evolution(&grid, 0.0, 0.01, 6.0)), (0.7, evolution(&grid, 30.0, 0.01, 6.0))];
    let laws = [
        DataDistribution { sigma: 0.05, seed: 1, ..DataDistribution::default() },
        DataDistribution { sigma: 0.2, seed: 2, ..DataDistribution::default() },
    ];
    let obs = test_observables();
    let mut details = Vec::new();
    let mut ok = true;
    for lambda in [0.0, 0.5, 1.0] {
        let setup = MarkovSetup {
            grid: &grid,
            laws,
            lambda,
            count: 12,
            models: &models,
            s: 0.1,
            t: 0.2,
            observables: &obs,
            metric: MetricConfig::default(),
        };
        let r = markov_property_check(&setup, &pool(3)).map_err(fail)?;
        ok &= r.passed();
        details.push(format!(
            "lambda {lambda}: identity {}, semigroup failures {}, mixture defect {:e}, product defect {:e}",
            r.identity_at_zero, r.semigroup_failures, r.mixture_defect, r.product_defect
        ));
    }
    check(ok, details.join("; "))
}

const DETERMINISM_CONFIG: &str = r#"
schema_version = 1
seed = 17
times = [0.0, 0.05, 0.1]

[grid]
dim = 1
n = 16

[forcing]
heat = 12.0

[solver]
fixed_step = true
dt_init = 0.005

[stopping]
threshold_m = 3.0

[distribution]
sigma = 0.3

[ensemble]
members = 32

[slln]
n_list = [8, 32]
replicates = 2
time = 0.05

[markov]
members = 8
"#;

fn determinism() -> Outcome {
    let base = parse_config(DETERMINISM_CONFIG).map_err(fail)?.config;
    let dir = tempfile::tempdir().map_err(fail)?;
    let mut compared = 0;
    for mode in [Mode::Solve, Mode::Ensemble, Mode::SllnStudy, Mode::MarkovCheck] {
        let mut hashes = Vec::new();
        for workers in [1usize, 4] {
            let mut c = base.clone();
            c.mode = mode;
            c.workers = workers;
            let out = run(&c, &dir.path().join(format!("{mode}-{workers}"))).map_err(fail)?;
            hashes.push(out.manifest.files);
        }
        if hashes[0] != hashes[1] {
            return Err(format!("mode {mode}: output hashes differ between 1 and 4 workers"));
        }
        compared += hashes[0].len();
    }
    check(compared > 0, format!("{compared} output files identical across 1 and 4 workers"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("conservation", conservation),
        ("entropy inequality", entropy_inequality),
        ("fixed point", fixed_point),
        ("manufactured solution", manufactured),
        ("metric axioms", metric_axioms),
        ("semigroup", semigroup),
        ("stopping time", stopping_time),
        ("stability", stability),
        ("censoring identity", censoring),
        ("SLLN rate", slln),
        ("Markov checks", markov),
        ("determinism", determinism),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = f();
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.2} s): {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {:>2} {name} ({secs:.2} s): {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
