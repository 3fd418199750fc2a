//! The `dynpet` command line tool.
//!
//! Exit codes: 0 success, 1 solver or numeric failure, 2 input error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{BetaChoice, Config, QChoice, SolverKind, ToyVariantConfig};
use crate::debias::{count_scatter_curve, heuristic_q, solve_toy, sweep_top_q, write_sweep_csv, ToyModel, ToyVariant};
use crate::error::{Error, Result};
use crate::forward::events::EventData;
use crate::forward::grid::{write_grid_measure, GridMeasure, VoxelGrid};
use crate::forward::operator::load_or_assemble;
use crate::forward::Mode;
use crate::listmode::{ground_truth_to_grid, read_listmode, sample_poisson_listmode, write_labels, write_listmode, GroundTruth, Listmode, Splat};
use crate::objective::{continuity, ModelParams, ObjectiveValue, CONTINUITY_TOL};
use crate::scaling::{beta_heuristic, functional_invariance, measurement_law, random_feasible_measure, BetaTable, Problem, ScaleTriple};
use crate::solver_grid::reconstruct_grid;
use crate::solver_particles::reconstruct_particles;
use crate::svg;

#[derive(Parser, Debug)]
#[command(name = "dynpet", version, about = "Dynamic PET listmode simulation and reconstruction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample a listmode realization of the ground truth.
    Simulate(CommonArgs),
    /// Reconstruct from a listmode file.
    Reconstruct(CommonArgs),
    /// Scatter count and minimum as functions of q.
    SweepQ(CommonArgs),
    /// Minimizers of the two-mass toy model over a range of q.
    ToyBias(CommonArgs),
    /// Check the rescaling identities of the functional and the sampler.
    VerifyScaling(CommonArgs),
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides `io.out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `solver.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; 1 is bit-deterministic.
    #[arg(long)]
    pub threads: Option<usize>,
}

struct Run {
    cfg: Config,
    out: PathBuf,
    seed: u64,
}

impl Run {
    fn new(a: &CommonArgs) -> Result<Self> {
        let cfg = Config::load(&a.config)?;
        let out = a.out.clone().or_else(|| cfg.io.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out)?;
        let seed = a.seed.unwrap_or(cfg.solver.seed);
        Ok(Self { cfg, out, seed })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn listmode_path(&self) -> PathBuf {
        self.cfg.io.listmode.clone().unwrap_or_else(|| self.path("listmode.csv"))
    }

    fn write_json<T: Serialize>(&self, name: &str, v: &T) -> Result<()> {
        std::fs::write(self.path(name), serde_json::to_string_pretty(v)? + "\n")?;
        Ok(())
    }
}

/// Parse `args` (including the program name) and run; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let a = match &cli.command {
        Command::Simulate(a) | Command::Reconstruct(a) | Command::SweepQ(a) | Command::ToyBias(a) | Command::VerifyScaling(a) => a.clone(),
    };
    let threads = a.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    pool.install(|| {
        let r = Run::new(&a)?;
        match cli.command {
            Command::Simulate(_) => cmd_simulate(&r),
            Command::Reconstruct(_) => cmd_reconstruct(&r),
            Command::SweepQ(_) => cmd_sweep_q(&r),
            Command::ToyBias(_) => cmd_toy_bias(&r),
            Command::VerifyScaling(_) => cmd_verify_scaling(&r),
        }
    })
}

fn cmd_simulate(r: &Run) -> Result<()> {
    let geom = r.cfg.geometry.build()?;
    let gt = r.cfg.ground_truth()?;
    let sp = r.cfg.sample_params()?;
    let (lm, labels) = sample_poisson_listmode(&gt, &geom, &sp, r.seed)?;
    write_listmode(&lm, &r.path("listmode.csv"))?;
    write_labels(&r.path("labels.jsonl"), &labels)?;
    r.write_json("truth.json", &gt)?;
    let n = labels.len();
    let scattered = labels.iter().filter(|l| l.scattered).count();
    let fraction = if n > 0 { scattered as f64 / n as f64 } else { 0.0 };
    let summary = json!({
        "events": lm.len(),
        "expected_events": gt.expected_count(&geom, sp.p_s, sp.p_d),
        "scatter_fraction": fraction,
        "seed": r.seed,
    });
    r.write_json("simulate.json", &summary)?;
    println!("|E| = {}, scatter fraction = {fraction:.4}", lm.len());
    Ok(())
}

/// Slice mass `|E| T_half / ((p_s + p_d) T)` that makes the expected count match.
pub fn mass_estimate(n_events: f64, p_s: f64, p_d: f64, t_half: f64, t_end: f64) -> f64 {
    n_events * t_half / ((p_s + p_d) * t_end)
}

/// Grid, event data and parameters of a listmode file under `cfg`.
pub struct Setup {
    pub grid: VoxelGrid,
    pub data: EventData,
    pub params: ModelParams,
    pub listmode: Listmode,
}

pub fn setup(cfg: &Config, lm: Listmode, cache: Option<&Path>) -> Result<Setup> {
    let geom = cfg.geometry.build()?;
    lm.check_geometry(&geom)?;
    if lm.mode != cfg.model.mode {
        return Err(Error::Config { path: "model.mode".into(), msg: format!("listmode is {:?}, config says {:?}", lm.mode, cfg.model.mode) });
    }
    let grid = VoxelGrid::new(&geom, cfg.solver.nx)?;
    let kernel = cfg.kernel()?;
    let quad = cfg.solver.quadrature;
    let t_half = cfg.model.t_half;
    let data = match lm.mode {
        Mode::Continuous => EventData::continuous(&grid, &kernel, &quad, &lm, t_half)?,
        Mode::Discrete => {
            let op = load_or_assemble(&grid, &kernel, &quad, cache)?;
            EventData::discrete(&grid, &op, &kernel, &quad, &lm, t_half)?
        }
    };
    let m = &cfg.model;
    let mass = mass_estimate(lm.len() as f64, m.p_s, m.p_d, t_half, geom.t_end);
    let q = match m.q {
        QChoice::Value(q) => q,
        QChoice::Named(_) if lm.is_empty() => 1.0,
        QChoice::Named(_) => heuristic_q(&geom, m.p_s, m.p_d, mass, m.mode, &kernel)?,
    };
    let beta = match &m.beta {
        BetaChoice::Value(b) => *b,
        BetaChoice::Heuristic { heuristic: h } => {
            let table = BetaTable::read_csv(&h.table)?;
            let mass = h.mass.unwrap_or(mass);
            if !(mass > 0.0) {
                return Err(Error::Config { path: "model.beta.heuristic.mass".into(), msg: "no events to estimate the mass from; set it".into() });
            }
            beta_heuristic(h.speed, h.length, mass, t_half, &table)?
        }
    };
    info!("q = {q:.6e}, beta = {beta:.6e}, estimated slice mass {mass:.4e}");
    Ok(Setup { grid, data, params: ModelParams { q, beta, p_s: m.p_s, p_d: m.p_d }, listmode: lm })
}

#[derive(Serialize)]
struct Check {
    name: &'static str,
    value: f64,
    limit: Option<f64>,
    pass: bool,
}

fn grid_checks(grid: &VoxelGrid, m: &GridMeasure, j: &ObjectiveValue) -> Vec<Check> {
    let mass = m.total_mass();
    let c = continuity(grid, m);
    let slices = m.slice_masses();
    let mean = slices.iter().sum::<f64>() / slices.len().max(1) as f64;
    let spread = if mean > 0.0 { slices.iter().map(|s| (s - mean).abs()).fold(0.0, f64::max) / mean } else { 0.0 };
    let min = m.min_rho();
    vec![
        Check { name: "nonnegative", value: min, limit: Some(-1e-14), pass: min >= -1e-14 },
        Check { name: "continuity_l1_relative", value: if mass > 0.0 { c.l1 / mass } else { c.l1 }, limit: Some(CONTINUITY_TOL), pass: c.l1 <= CONTINUITY_TOL * mass.max(f64::MIN_POSITIVE) || c.l1 == 0.0 },
        Check { name: "slice_mass_spread", value: spread, limit: Some(1e-8), pass: spread <= 1e-8 },
        Check { name: "objective_finite", value: j.total, limit: None, pass: j.total.is_finite() && j.feasible },
    ]
}

fn cmd_reconstruct(r: &Run) -> Result<()> {
    let lm = read_listmode(&r.listmode_path())?;
    let s = setup(&r.cfg, lm, Some(&r.path("operator.cache")))?;
    let geom = &s.grid.geom;
    let truth: Option<GroundTruth> = r.cfg.truth.as_ref().and_then(|_| r.cfg.ground_truth().ok());
    let start = Instant::now();
    let (value, checks, extra) = match r.cfg.solver.kind {
        SolverKind::Grid => {
            let (m, j, diag) = reconstruct_grid(&s.grid, &s.data, &s.params, &r.cfg.solver.grid)?;
            write_grid_measure(&r.path("grid.bin"), &s.grid, &m)?;
            svg::write(&r.path("slices.svg"), &svg::slice_heatmaps(&s.grid, &m))?;
            let hist: Vec<(f64, f64)> = diag.history.iter().map(|h| (h.iter as f64, h.objective)).collect();
            let shift = hist.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let decay: Vec<(f64, f64)> = hist.iter().map(|(i, v)| (*i, v - shift)).collect();
            svg::write(
                &r.path("objective.svg"),
                &svg::line_chart("objective decay", "iteration", "J - min J", &[svg::Series { name: "grid solver", points: decay }], true),
            )?;
            if let Some(t) = &truth {
                svg::write(&r.path("trajectories.svg"), &svg::trajectories(geom, &t.particles, &[]))?;
            }
            if !diag.converged {
                warn!("grid solver stopped after {} iterations (residual {:.2e})", diag.iterations, diag.gap_estimate);
            }
            let checks = grid_checks(&s.grid, &m, &j);
            (j, checks, json!({ "solver": "grid", "diagnostics": {
                "iterations": diag.iterations, "converged": diag.converged, "gap_estimate": diag.gap_estimate,
                "primal_residual": diag.primal_residual, "dual_residual": diag.dual_residual,
                "dropped_events": diag.dropped_events, "repair_mass_change": diag.repair_mass_change } }))
        }
        SolverKind::Particles => {
            let (set, j) = reconstruct_particles(&s.grid, &s.data, &s.params, &r.cfg.solver.particles);
            r.write_json("particles.json", &set)?;
            let tp = truth.as_ref().map(|t| t.particles.as_slice()).unwrap_or(&[]);
            svg::write(&r.path("trajectories.svg"), &svg::trajectories(geom, tp, &set.particles))?;
            let as_truth = GroundTruth { particles: set.particles.clone(), t_half: r.cfg.model.t_half };
            if let Ok(m) = ground_truth_to_grid(&as_truth, &s.grid, Splat::Linear) {
                svg::write(&r.path("slices.svg"), &svg::slice_heatmaps(&s.grid, &m))?;
            }
            let inside = set.particles.iter().all(|p| p.knots.iter().all(|k| geom.in_d(k)));
            let min_mass = set.particles.iter().map(|p| p.mass).fold(f64::INFINITY, f64::min);
            let checks = vec![
                Check { name: "positive_masses", value: if set.is_empty() { 0.0 } else { min_mass }, limit: Some(0.0), pass: set.is_empty() || min_mass > 0.0 },
                Check { name: "knots_inside_domain", value: inside as u8 as f64, limit: Some(1.0), pass: inside },
                Check { name: "objective_finite", value: j.total, limit: None, pass: j.total.is_finite() },
            ];
            (j, checks, json!({ "solver": "particles", "particles": set.len() }))
        }
    };
    let all_pass = checks.iter().all(|c| c.pass);
    let report = json!({
        "events": s.listmode.len(),
        "params": s.params,
        "objective": value,
        "checks": checks,
        "all_checks_pass": all_pass,
        "runtime_seconds": start.elapsed().as_secs_f64(),
        "run": extra,
    });
    r.write_json("report.json", &report)?;
    println!("J = {:.10e} (mass {:.6e}, -log {:.6e}, transport {:.6e}), checks {}", value.total, value.fidelity_mass, value.neg_log, value.bb, if all_pass { "pass" } else { "FAIL" });
    if !all_pass {
        return Err(Error::Numeric("reconstruction violates an invariant, see report.json".into()));
    }
    Ok(())
}

fn cmd_sweep_q(r: &Run) -> Result<()> {
    let sw = r.cfg.sweep.clone().unwrap_or_default();
    let lm = read_listmode(&r.listmode_path())?;
    let s = setup(&r.cfg, lm, Some(&r.path("operator.cache")))?;
    let top = sw.q_max.unwrap_or_else(|| sweep_top_q(&s.data, &s.params));
    let qs: Vec<f64> = (0..sw.points).map(|i| top * i as f64 / (sw.points - 1) as f64).collect();
    let pts = count_scatter_curve(&s.grid, &s.data, &s.params, &qs, &r.cfg.solver.grid, sw.band)?;
    write_sweep_csv(&r.path("sweep.csv"), &pts)?;
    let series = [
        svg::Series { name: "N_s lower", points: pts.iter().map(|p| (p.q, p.n_s_lo)).collect() },
        svg::Series { name: "N_s upper", points: pts.iter().map(|p| (p.q, p.n_s_hi)).collect() },
    ];
    svg::write(&r.path("sweep.svg"), &svg::line_chart("scatter count", "q", "N_s", &series, false))?;
    let jser = [svg::Series { name: "min J", points: pts.iter().map(|p| (p.q, p.min_j)).collect() }];
    svg::write(&r.path("sweep_objective.svg"), &svg::line_chart("attained minimum", "q", "J", &jser, false))?;
    for p in &pts {
        println!("q = {:.6e}  N_s in [{}, {}]  J = {:.10e}", p.q, p.n_s_lo, p.n_s_hi, p.min_j);
    }
    Ok(())
}

fn cmd_toy_bias(r: &Run) -> Result<()> {
    let t = r.cfg.toy.as_ref().ok_or_else(|| Error::Config { path: "toy".into(), msg: "toy-bias needs a toy block".into() })?;
    let variant = match t.variant {
        ToyVariantConfig::Continuous { g0 } => ToyVariant::Continuous { g0 },
        ToyVariantConfig::Discrete { cells } => ToyVariant::Discrete { cells },
    };
    let toy = ToyModel::new(variant, t.p_s, t.x0, t.m, t.scattered.clone()).map_err(|e| Error::Config { path: "toy".into(), msg: e.to_string() })?;
    let threshold = toy.threshold()?;
    let mut csv = String::from("q,alpha,beta,J\n");
    let mut pts = Vec::with_capacity(t.points);
    for i in 0..t.points {
        let q = t.q_min + (t.q_max - t.q_min) * i as f64 / (t.points - 1) as f64;
        let (a, b) = solve_toy(&toy, q);
        csv.push_str(&format!("{q:.17e},{a:.17e},{b:.17e},{:.17e}\n", toy.objective(a, b, q)));
        pts.push((q, a, b));
    }
    std::fs::write(r.path("toy.csv"), csv)?;
    let series = [
        svg::Series { name: "alpha (source mass)", points: pts.iter().map(|p| (p.0, p.1)).collect() },
        svg::Series { name: "beta (hallucinated mass)", points: pts.iter().map(|p| (p.0, p.2)).collect() },
    ];
    svg::write(&r.path("toy.svg"), &svg::line_chart("toy minimizers", "q", "mass", &series, false))?;
    r.write_json("toy.json", &json!({ "threshold": threshold }))?;
    println!("threshold q* = {threshold:.10}");
    Ok(())
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn cmd_verify_scaling(r: &Run) -> Result<()> {
    let sc = r.cfg.scaling.clone().unwrap_or_default();
    if r.cfg.model.mode != Mode::Continuous {
        return Err(Error::Config { path: "model.mode".into(), msg: "scaling checks need continuous mode".into() });
    }
    let geom = r.cfg.geometry.build()?;
    let gt = r.cfg.ground_truth().ok();
    let lm = match &gt {
        Some(gt) => sample_poisson_listmode(gt, &geom, &r.cfg.sample_params()?, r.seed)?.0,
        None => read_listmode(&r.listmode_path())?,
    };
    let s = setup(&r.cfg, lm, None)?;
    let problem = Problem { grid: s.grid.clone(), kernel: r.cfg.kernel()?, listmode: s.listmode, params: s.params, t_half: r.cfg.model.t_half };
    let mut rng = crate::rng::stream(r.seed, 1);
    let mass = mass_estimate(problem.listmode.len().max(1) as f64, s.params.p_s, s.params.p_d, problem.t_half, geom.t_end);
    let pairs: Vec<GridMeasure> = (0..sc.pairs.max(1)).map(|_| random_feasible_measure(&s.grid, mass, &mut rng)).collect();
    let mut scales = vec![ScaleTriple::identity()];
    for v in &sc.extra {
        scales.push(ScaleTriple::new(v[0], v[1], v[2])?);
    }
    for _ in 0..sc.triples {
        let (lo, hi) = sc.range;
        scales.push(ScaleTriple::new(log_uniform(&mut rng, lo, hi), log_uniform(&mut rng, lo, hi), log_uniform(&mut rng, lo, hi))?);
    }
    let rows = functional_invariance(&problem, &r.cfg.solver.quadrature, &pairs, &scales)?;
    let mut csv = String::from("theta,lambda,mu,expected_offset,max_spread,max_offset_error\n");
    for row in &rows {
        csv.push_str(&format!("{},{},{},{:.17e},{:.3e},{:.3e}\n", row.scale.theta, row.scale.lambda, row.scale.mu, row.expected, row.spread, row.offset_error));
    }
    std::fs::write(r.path("scaling.csv"), csv)?;
    let identity_dev = rows[0].differences.iter().fold(0.0, |a: f64, d| a.max(d.abs()));
    let worst = rows.iter().map(|x| x.spread.max(x.offset_error)).fold(0.0, f64::max);
    let law = if sc.law_seeds > 0 {
        let gt = gt.as_ref().ok_or_else(|| Error::Config { path: "truth".into(), msg: "the measurement-law check needs a ground truth".into() })?;
        let s = *scales.last().unwrap();
        let l = measurement_law(gt, &geom, &r.cfg.sample_params()?, &s, sc.law_seeds, r.seed.wrapping_add(1000))?;
        Some(l)
    } else {
        None
    };
    let law_z = law.as_ref().map(|l| l.max_abs_z());
    r.write_json(
        "scaling.json",
        &json!({ "identity_max_deviation": identity_dev, "max_relative_deviation": worst, "rows": rows, "law_max_abs_z": law_z }),
    )?;
    println!("identity max deviation {identity_dev:.3e}, worst relative deviation {worst:.3e}");
    if let Some(z) = law_z {
        println!("measurement law: max |z| = {z:.3} over {} seeds", sc.law_seeds);
    }
    if worst > 1e-9 || identity_dev > 1e-12 {
        return Err(Error::Numeric(format!("scaling identity violated: deviation {worst:.3e}")));
    }
    Ok(())
}
