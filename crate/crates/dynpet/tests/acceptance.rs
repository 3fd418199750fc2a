//! End-to-end acceptance checks. Runs without the test harness so that every
//! criterion prints one line, pass or fail, and the process exits nonzero if
//! any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use dynpet::debias::{
    bisect_threshold, brute_force_toy, combinatorial_minimum, count_scatter_curve, heuristic_q, max_form_local, solve_toy,
    sweep_top_q, ToyModel, ToyVariant,
};
use dynpet::forward::events::EventData;
use dynpet::forward::operator::{apply_unbiased_forward, bound_constant, scatter_weights, DetectionOperator};
use dynpet::forward::response::Quadrature;
use dynpet::geometry::point2;
use dynpet::listmode::{sample_poisson_listmode, GroundTruth, Listmode, ListmodeEvent, Particle, SampleParams};
use dynpet::objective::{continuity, evaluate_j_max, ModelParams, CONTINUITY_TOL};
use dynpet::rng::stream;
use dynpet::scaling::{functional_invariance, measurement_law, random_feasible_measure, Problem, ScaleTriple};
use dynpet::solver_grid::{estimate_opnorm, prox_neglog, reconstruct_grid, DenseOp, GridSolverConfig, LinearOp, PdhgOperator};
use dynpet::solver_particles::{reconstruct_particles, ParticleSolverConfig};
use dynpet::{GridMeasure, Mode, PositronKernel, ScannerGeometry, VoxelGrid};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Discrete, DiscreteCDF, Poisson};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_budget(start: Instant, budget: Duration, detail: String, ok: bool) -> Outcome {
    let t = start.elapsed();
    let detail = format!("{detail}; {:.1} s of {} s", t.as_secs_f64(), budget.as_secs());
    check(ok && t <= budget, detail)
}

// 1. toy thresholds

fn toy_threshold_against_oracle(variant: ToyVariant, scattered: Vec<f64>, expected: f64) -> (bool, String) {
    let toy = ToyModel::new(variant, 0.5, 0.0, 11, scattered).unwrap();
    let analytic = toy.threshold().unwrap();
    let hi = 4.0 * analytic;
    let q_fo = bisect_threshold(0.0, hi, 1e-6, |q| solve_toy(&toy, q).1 == 0.0);
    let q_bf = bisect_threshold(0.0, hi, 1e-6, |q| brute_force_toy(&toy, q, 200, 6).1 < 1e-7);
    let rel_fo = (q_fo - expected).abs() / expected;
    let rel_bf = (q_bf - q_fo).abs() / q_fo;
    // the oracle's minimizer must agree with the solver on both sides
    let mut agree = true;
    for q in [0.5 * expected, 0.9 * expected, 1.1 * expected, 2.0 * expected] {
        let (a, b) = solve_toy(&toy, q);
        let (ba, bb, _) = brute_force_toy(&toy, q, 200, 6);
        agree &= (a - ba).abs() < 1e-5 * a.max(1.0) && (b - bb).abs() < 1e-5 * toy.n as f64;
    }
    let ok = rel_fo <= 1e-4 && rel_bf <= 1e-4 && agree && (analytic - expected).abs() < 1e-12 * expected;
    (ok, format!("q* = {q_fo:.6} (oracle {q_bf:.6}, closed form {expected})"))
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (c_ok, c) = toy_threshold_against_oracle(ToyVariant::Continuous { g0: 2.0 }, vec![0.2, 0.4, 0.6, 0.8], 0.2);
    let (d_ok, d) = toy_threshold_against_oracle(ToyVariant::Discrete { cells: 20 }, vec![0.22, 0.47, 0.63, 0.81], 2.0);
    within_budget(start, Duration::from_secs(10), format!("continuous {c}, discrete {d}"), c_ok && d_ok)
}

// 2. scatter count along a q sweep

fn desk_scene(mode: Mode, seed: u64) -> (ScannerGeometry, VoxelGrid, PositronKernel, Listmode, GroundTruth) {
    let geom = ScannerGeometry::ring(2, 0.8, 1.0, 16, 10, 1.0).unwrap();
    let grid = VoxelGrid::new(&geom, 32).unwrap();
    let kernel = PositronKernel::gaussian(0.02, &geom).unwrap();
    let truth = GroundTruth {
        particles: vec![
            Particle::linear(70.0, point2(-0.4, -0.2), point2(0.5, 0.0), &geom),
            Particle::linear(55.0, point2(0.3, 0.35), point2(-0.2, -0.2), &geom),
        ],
        t_half: 1.0,
    };
    let sp = SampleParams { p_s: 0.2, p_d: 0.6, kernel, mode };
    let (lm, _) = sample_poisson_listmode(&truth, &geom, &sp, seed).unwrap();
    (geom, grid, kernel, lm, truth)
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let (_, grid, kernel, lm, _) = desk_scene(Mode::Discrete, 11);
    let quad = Quadrature::default();
    let op = DetectionOperator::assemble(&grid, &kernel, &quad).unwrap();
    let data = EventData::discrete(&grid, &op, &kernel, &quad, &lm, 1.0).unwrap();
    let n = lm.len() as f64;
    let base = ModelParams { q: 1.0, beta: 0.002, p_s: 0.2, p_d: 0.6 };
    let top = sweep_top_q(&data, &base);
    let qs: Vec<f64> = (0..12).map(|i| top * i as f64 / 11.0).collect();
    let cfg = GridSolverConfig { tol: 1e-5, max_iters: 20_000, ..Default::default() };
    let pts = count_scatter_curve(&grid, &data, &base, &qs, &cfg, 1e-3).unwrap();
    let monotone_counts = pts.windows(2).all(|w| w[1].n_s_lo >= w[0].n_s_lo && w[1].n_s_hi >= w[0].n_s_hi);
    let tol = 2.0 * cfg.tol;
    let monotone_j = pts.windows(2).all(|w| w[1].min_j <= w[0].min_j + tol * w[0].min_j.abs() || w[0].min_j == f64::INFINITY);
    let first = &pts[0];
    let last = &pts[pts.len() - 1];
    let curve: Vec<String> = pts.iter().map(|p| format!("[{},{}]", p.n_s_lo, p.n_s_hi)).collect();
    let detail = format!("|E| = {n}, N_s intervals {}", curve.join(" "));
    let ok = monotone_counts && monotone_j && first.n_s_lo == 0.0 && last.n_s_lo == n && last.n_s_hi == n;
    within_budget(start, Duration::from_secs(600), format!("{detail}, minima nonincreasing: {monotone_j}"), ok)
}

// 3. mixed-integer problem against the q-formulation

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let g = ScannerGeometry::ring(2, 0.8, 1.0, 8, 2, 1.0).unwrap();
    let grid = VoxelGrid::new(&g, 4).unwrap();
    let k = PositronKernel::Gaussian { sigma: 0.02 };
    let quad = Quadrature { kernel_points: 3, directions: 0 };
    let op = DetectionOperator::assemble(&grid, &k, &quad).unwrap();
    let mut lm = Listmode::empty(&g, Mode::Discrete);
    lm.events = [(0, 0, 4), (0, 1, 5), (0, 2, 5), (0, 1, 3), (1, 0, 3), (1, 2, 6), (1, 3, 7), (1, 1, 6)]
        .iter()
        .map(|&(i, j, k)| ListmodeEvent::Discrete { i, j, k })
        .collect();
    let data = EventData::discrete(&grid, &op, &k, &quad, &lm, 1.0).unwrap();
    let n = data.len();
    let top = sweep_top_q(&data, &ModelParams { q: 1.0, beta: 0.5, p_s: 0.2, p_d: 0.6 });
    let (mut worst, mut local_hits) = (0.0f64, 0);
    let mut counts = Vec::new();
    let mut ok = true;
    let qs = [0.15, 0.25, 0.35, 0.45, 0.6];
    for f in qs {
        let q = f * top;
        let p = ModelParams { q, beta: 0.5, p_s: 0.2, p_d: 0.6 };
        // global mixed-integer optimum over every scatter set
        let mut best = (f64::INFINITY, 0usize, Vec::new());
        for ns in 0..=n {
            let (v, set) = combinatorial_minimum(&grid, &data, &p, ns).unwrap();
            let v = v - ns as f64 * q.ln();
            if v < best.0 {
                best = (v, ns, set);
            }
        }
        let (global, ns, set) = best;
        // the max form at the mixed-integer minimizer attains the same value
        let (at_opt, m, _) = max_form_local(&grid, &data, &p, &[set]).unwrap();
        let direct = evaluate_j_max(&grid, &m, &data, &p).total;
        let gap = (direct - global).abs().max((at_opt - global).abs());
        // no local descent can beat the global value
        let starts = vec![vec![false; n], vec![true; n], (0..n).map(|i| i % 2 == 0).collect(), (0..n).map(|i| i % 2 == 1).collect()];
        let (local, _, _) = max_form_local(&grid, &data, &p, &starts).unwrap();
        ok &= gap <= 1e-6 && local >= global - 1e-6;
        if (local - global).abs() <= 1e-6 {
            local_hits += 1;
        }
        worst = worst.max(gap);
        counts.push(ns);
    }
    within_budget(
        start,
        Duration::from_secs(300),
        format!("|E| = {n}, optimal N_s per q {counts:?}, max gap {worst:.2e}, local descent reached the optimum at {local_hits}/{} q values", qs.len()),
        ok,
    )
}

// 4. scaling identities

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let (geom, _, kernel, lm, _) = desk_scene(Mode::Continuous, 4);
    let grid = VoxelGrid::new(&geom, 16).unwrap();
    let params = ModelParams { q: 3.0, beta: 0.01, p_s: 0.2, p_d: 0.6 };
    let problem = Problem { grid: grid.clone(), kernel, listmode: lm, params, t_half: 1.0 };
    let mut rng = stream(2024, 0);
    let pairs: Vec<GridMeasure> = (0..20).map(|_| random_feasible_measure(&grid, 125.0, &mut rng)).collect();
    let mut draw = || (0.5f64.ln() + rng.random::<f64>() * 4f64.ln()).exp();
    let scales: Vec<ScaleTriple> = (0..5).map(|_| ScaleTriple::new(draw(), draw(), draw()).unwrap()).collect();
    let rows = functional_invariance(&problem, &Quadrature::default(), &pairs, &scales).unwrap();
    let spread = rows.iter().map(|r| r.spread).fold(0.0, f64::max);
    let offset = rows.iter().map(|r| r.offset_error).fold(0.0, f64::max);
    // measurement law on coarse bins: 2 time bins × 15 detector pairs
    let g6 = ScannerGeometry::ring(2, 0.8, 1.0, 6, 2, 1.0).unwrap();
    let k6 = PositronKernel::gaussian(0.02, &g6).unwrap();
    let gt = GroundTruth { particles: vec![Particle::linear(30.0, point2(-0.3, 0.1), point2(0.5, -0.1), &g6)], t_half: 1.0 };
    let sp = SampleParams { p_s: 0.3, p_d: 0.5, kernel: k6, mode: Mode::Continuous };
    let law = measurement_law(&gt, &g6, &sp, &ScaleTriple::new(1.7, 0.6, 2.5).unwrap(), 10_000, 77).unwrap();
    let z = law.max_abs_z();
    let ok = spread <= 1e-9 && offset <= 1e-9 && z <= 3.0;
    within_budget(
        start,
        Duration::from_secs(300),
        format!("J - Ĵ spread {spread:.1e} and offset error {offset:.1e} over 20 pairs × 5 scales; law max |z| {z:.2} over {} bins", law.z.len()),
        ok,
    )
}

// 5. forward operator sandwich

fn random_conservative<R: Rng>(grid: &VoxelGrid, rng: &mut R) -> GridMeasure {
    let mass = 0.1 + 10.0 * rng.random::<f64>();
    match rng.random_range(0..3) {
        0 => random_feasible_measure(grid, mass, rng),
        kind => {
            // a few point masses per slice, possibly a single one
            let mut m = GridMeasure::zeros(grid);
            let nv = grid.nv();
            let per = mass * grid.dt();
            for t in 0..grid.nt() {
                let spots = if kind == 1 { 1 } else { rng.random_range(2..5) };
                let mut w: Vec<f64> = (0..spots).map(|_| rng.random::<f64>() + 0.01).collect();
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v *= per / s);
                for v in w {
                    m.rho[t * nv + rng.random_range(0..nv)] += v;
                }
            }
            m
        }
    }
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let geom = ScannerGeometry::ring(2, 0.8, 1.0, 12, 4, 1.0).unwrap();
    let grid = VoxelGrid::new(&geom, 12).unwrap();
    let kernel = PositronKernel::gaussian(0.02, &geom).unwrap();
    let quad = Quadrature::default();
    let op = DetectionOperator::assemble(&grid, &kernel, &quad).unwrap();
    let (q, p_s, p_d) = (1.5, 0.2, 0.6);
    let bd = bound_constant(&geom, &kernel, q, p_s, p_d, Mode::Discrete);
    let bc = bound_constant(&geom, &kernel, q, p_s, p_d, Mode::Continuous);
    let sw = scatter_weights(&geom);
    let m = geom.n_detectors();
    let mut rng = stream(5, 0);
    // continuous densities at random event coordinates and along lines through voxel centers
    let mut lm = Listmode::empty(&geom, Mode::Continuous);
    for e in 0..300 {
        let t = rng.random::<f64>() * geom.t_end;
        let (a, b) = if e % 2 == 0 {
            let u = rng.random::<f64>() * std::f64::consts::TAU;
            let v = rng.random::<f64>() * std::f64::consts::TAU;
            (point2(u.cos(), u.sin()), point2(v.cos(), v.sin()))
        } else {
            let x = grid.centers[rng.random_range(0..grid.nv())];
            let phi = rng.random::<f64>() * std::f64::consts::PI;
            geom.detect_ray(&x, &point2(phi.cos(), phi.sin())).unwrap()
        };
        if (a - b).norm() > 1e-6 {
            lm.events.push(ListmodeEvent::Continuous { t, a, b });
        }
    }
    let data = EventData::continuous(&grid, &kernel, &quad, &lm, 1.0).unwrap();
    let (mut checked, mut violations) = (0usize, 0usize);
    let (mut lo_ratio, mut hi_ratio) = (f64::INFINITY, 0.0f64);
    for _ in 0..1000 {
        let rho = random_conservative(&grid, &mut rng);
        let norm = rho.total_mass();
        let bins = apply_unbiased_forward(&grid, &op, &rho, q, p_s, p_d).unwrap();
        for (i, v) in bins.values.iter().enumerate() {
            if sw[i % (m * m)] == 0.0 {
                continue; // pairs within one detector are not measured
            }
            checked += 1;
            let r = v / norm;
            lo_ratio = lo_ratio.min(r / bd.lower);
            hi_ratio = hi_ratio.max(r / bd.upper);
            if r < bd.lower * (1.0 - 1e-12) || r > bd.upper * (1.0 + 1e-12) {
                violations += 1;
            }
        }
        for e in 0..data.len() {
            checked += 1;
            let r = data.intensity(e, &rho, q, p_s, p_d) / norm;
            if r < bc.lower * (1.0 - 1e-12) || r > bc.upper * (1.0 + 1e-12) {
                violations += 1;
            }
        }
    }
    within_budget(
        start,
        Duration::from_secs(60),
        format!("{checked} bin and event densities for 1000 measures, {violations} violations (discrete min/C_lower {lo_ratio:.3}, max/C_upper {hi_ratio:.3})"),
        violations == 0,
    )
}

// 6. feasibility of grid solver outputs

fn feasibility_report(grid: &VoxelGrid, m: &GridMeasure) -> (bool, f64, f64, f64) {
    let mass = m.total_mass();
    let c = continuity(grid, m).l1 / mass;
    let slices = m.slice_masses();
    let mean = slices.iter().sum::<f64>() / slices.len() as f64;
    let spread = slices.iter().map(|s| (s - mean).abs()).fold(0.0, f64::max) / mean;
    let min = m.min_rho();
    (min >= -1e-14 && c <= CONTINUITY_TOL && spread <= 1e-8, min, c, spread)
}

fn criterion_6(extra: Option<(VoxelGrid, GridMeasure)>) -> Outcome {
    let start = Instant::now();
    let mut cases: Vec<(String, VoxelGrid, GridMeasure)> = Vec::new();
    for (mode, name) in [(Mode::Discrete, "discrete"), (Mode::Continuous, "continuous")] {
        let (geom, _, kernel, lm, _) = desk_scene(mode, 21);
        let grid = VoxelGrid::new(&geom, 16).unwrap();
        let quad = Quadrature::default();
        let data = match mode {
            Mode::Discrete => EventData::discrete(&grid, &DetectionOperator::assemble(&grid, &kernel, &quad).unwrap(), &kernel, &quad, &lm, 1.0).unwrap(),
            Mode::Continuous => EventData::continuous(&grid, &kernel, &quad, &lm, 1.0).unwrap(),
        };
        for q in [1.0, 20.0] {
            let p = ModelParams { q, beta: 0.002, p_s: 0.2, p_d: 0.6 };
            let (m, _, _) = reconstruct_grid(&grid, &data, &p, &GridSolverConfig { max_iters: 3000, ..Default::default() }).unwrap();
            cases.push((format!("{name} q={q}"), grid.clone(), m));
        }
    }
    if let Some((g, m)) = extra {
        cases.push(("two-particle scene".into(), g, m));
    }
    let mut ok = true;
    let (mut worst_min, mut worst_c, mut worst_s) = (0.0f64, 0.0f64, 0.0f64);
    for (_, g, m) in &cases {
        let (pass, min, c, s) = feasibility_report(g, m);
        ok &= pass;
        worst_min = worst_min.min(min);
        worst_c = worst_c.max(c);
        worst_s = worst_s.max(s);
    }
    check(ok, format!("{} solver outputs: min ρ {worst_min:.1e}, continuity/‖ρ‖ {worst_c:.1e}, slice mass spread {worst_s:.1e}; {:.1} s", cases.len(), start.elapsed().as_secs_f64()))
}

// 7. particle solver on a two-particle scene

fn criterion_7() -> (Outcome, Option<(VoxelGrid, GridMeasure)>) {
    let start = Instant::now();
    let geom = ScannerGeometry::ring(2, 0.8, 1.0, 16, 10, 1.0).unwrap();
    let grid = VoxelGrid::new(&geom, 32).unwrap();
    let kernel = PositronKernel::gaussian(0.02, &geom).unwrap();
    let truth = GroundTruth {
        particles: vec![
            Particle::linear(312.5, point2(-0.45, -0.25), point2(0.4, 0.0), &geom),
            Particle::linear(312.5, point2(0.35, 0.4), point2(0.0, -0.35), &geom),
        ],
        t_half: 1.0,
    };
    let (p_s, p_d) = (0.1, 0.7);
    let sp = SampleParams { p_s, p_d, kernel, mode: Mode::Continuous };
    let (lm, _) = sample_poisson_listmode(&truth, &geom, &sp, 1).unwrap();
    let data = EventData::continuous(&grid, &kernel, &Quadrature::default(), &lm, 1.0).unwrap();
    let mass = lm.len() as f64 * truth.t_half / ((p_s + p_d) * geom.t_end);
    let q = heuristic_q(&geom, p_s, p_d, mass, Mode::Continuous, &kernel).unwrap();
    let params = ModelParams { q, beta: 0.01, p_s, p_d };
    let (set, jp) = reconstruct_particles(&grid, &data, &params, &ParticleSolverConfig::default());
    let cfg = GridSolverConfig { tol: 1e-6, max_iters: 40_000, ..Default::default() };
    let (m, jg, diag) = reconstruct_grid(&grid, &data, &params, &cfg).unwrap();
    // match each true particle to its closest reconstruction
    let mut tracked = Vec::new();
    for t in &truth.particles {
        let best = set
            .particles
            .iter()
            .map(|p| p.knots.iter().zip(&t.knots).filter(|(a, b)| (*a - *b).norm() <= 2.0 * grid.h).count())
            .max()
            .unwrap_or(0);
        tracked.push(best as f64 / geom.n_bins as f64);
    }
    let rel = (jp.total - jg.total) / jg.total.abs();
    let ok = set.len() == 2 && tracked.iter().all(|f| *f >= 0.9) && rel <= 0.05;
    let detail = format!(
        "|E| = {}, q = {q:.1}, {} particles, bins tracked within 2 voxels {tracked:?}, J_particles {:.4} vs J_grid {:.4} ({:+.2}%, grid {} iterations)",
        lm.len(),
        set.len(),
        jp.total,
        jg.total,
        100.0 * rel,
        diag.iterations
    );
    (within_budget(start, Duration::from_secs(600), detail, ok), Some((grid, m)))
}

// 8. Poisson sampler law

fn criterion_8() -> Outcome {
    let start = Instant::now();
    // static particle at the center, no positron range: unscattered pairs are antipodal
    let (m, nb) = (8usize, 2usize);
    let geom = ScannerGeometry::ring(2, 0.8, 1.0, m, nb, 1.0).unwrap();
    let truth = GroundTruth { particles: vec![Particle::fixed(60.0, point2(0.0, 0.0), &geom)], t_half: 1.0 };
    let (p_s, p_d) = (0.3, 0.5);
    let sp = SampleParams { p_s, p_d, kernel: PositronKernel::None, mode: Mode::Discrete };
    let rate = truth.expected_count(&geom, p_s, p_d);
    let (rate_s, rate_d) = (rate * p_s / (p_s + p_d), rate * p_d / (p_s + p_d));
    let mut expected = vec![0.0; nb * m * m];
    for i in 0..nb {
        for j in 0..m {
            for k in 0..m {
                if j != k {
                    let antipodal = if k == (j + m / 2) % m { rate_d / (nb * m) as f64 } else { 0.0 };
                    expected[(i * m + j) * m + k] = rate_s / (nb * m * m) as f64 + antipodal;
                }
            }
        }
    }
    let lambda: f64 = expected.iter().sum();
    let seeds = 10_000u64;
    let mut totals = Vec::with_capacity(seeds as usize);
    let mut pooled = vec![0.0; nb * m * m];
    for s in 0..seeds {
        let (lm, _) = sample_poisson_listmode(&truth, &geom, &sp, s).unwrap();
        totals.push(lm.len() as f64);
        for e in &lm.events {
            if let ListmodeEvent::Discrete { i, j, k } = e {
                pooled[(i * m + j) * m + k] += 1.0;
            }
        }
    }
    let n = seeds as f64;
    let mean = totals.iter().sum::<f64>() / n;
    let var = totals.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // pooled counts per bin against the intensity masses
    let (mut chi_bins, mut dof_bins) = (0.0, 0usize);
    for (c, e) in pooled.iter().zip(&expected) {
        if *e > 0.0 {
            let e = e * n;
            chi_bins += (c - e).powi(2) / e;
            dof_bins += 1;
        }
    }
    let p_bins = 1.0 - ChiSquared::new((dof_bins - 1) as f64).unwrap().cdf(chi_bins);
    // distribution of the total count against Poisson(Λ), tails merged
    let pois = Poisson::new(lambda).unwrap();
    let (lo, hi) = ((lambda - 3.0 * lambda.sqrt()).floor() as u64, (lambda + 3.0 * lambda.sqrt()).ceil() as u64);
    let mut observed = vec![0.0; (hi - lo + 3) as usize];
    for c in &totals {
        let c = *c as u64;
        let idx = if c < lo { 0 } else if c > hi { observed.len() - 1 } else { (c - lo + 1) as usize };
        observed[idx] += 1.0;
    }
    let mut probs: Vec<f64> = (lo..=hi).map(|c| pois.pmf(c)).collect();
    let below = pois.cdf(lo - 1);
    let above = 1.0 - pois.cdf(hi);
    probs.insert(0, below);
    probs.push(above);
    let chi_counts: f64 = observed.iter().zip(&probs).map(|(o, p)| (o - n * p).powi(2) / (n * p)).sum();
    let p_counts = 1.0 - ChiSquared::new((probs.len() - 1) as f64).unwrap().cdf(chi_counts);
    let ok = (mean - lambda).abs() <= 0.05 * lambda && (var - lambda).abs() <= 0.05 * lambda && p_bins > 0.01 && p_counts > 0.01;
    check(
        ok,
        format!(
            "Λ = {lambda:.2}, mean {mean:.3}, variance {var:.3}, per-bin χ² p = {p_bins:.3} ({dof_bins} bins), count-law χ² p = {p_counts:.3}; {:.1} s",
            start.elapsed().as_secs_f64()
        ),
    )
}

// 9. proximal map and operator norm

/// Root of `y² − x y − τw = 0` on `(0, ∞)` by bisection: the optimality
/// condition of `min_y −τw log y + (y − x)²/2`.
fn prox_oracle(x: f64, tau: f64, w: f64) -> f64 {
    let f = |y: f64| y - x - tau * w / y;
    let (mut lo, mut hi) = (f64::MIN_POSITIVE, x.abs() + (tau * w).sqrt() + 1.0);
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

fn dense_of(op: &dyn LinearOp) -> nalgebra::DMatrix<f64> {
    let (n, m) = op.dims();
    let mut a = nalgebra::DMatrix::zeros(m, n);
    let (mut e, mut col) = (vec![0.0; n], vec![0.0; m]);
    for j in 0..n {
        e[j] = 1.0;
        op.apply(&e, &mut col);
        a.column_mut(j).copy_from_slice(&col);
        e[j] = 0.0;
    }
    a
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let mut rng = stream(9, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let x = rng.random_range(-100.0..100.0);
        let tau = 10f64.powf(rng.random_range(-4.0..2.0));
        let w = 10f64.powf(rng.random_range(-2.0..2.0));
        let (p, o) = (prox_neglog(x, tau, w), prox_oracle(x, tau, w));
        worst = worst.max((p - o).abs() / o.abs().max(1e-300));
    }
    let mut worst_norm: f64 = 0.0;
    for s in 0..20 {
        let (r, c) = (rng.random_range(1..9), rng.random_range(1..9));
        let a = nalgebra::DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0) * if s % 3 == 0 { 10.0 } else { 1.0 });
        let svd = a.clone().svd(false, false).singular_values.max();
        let est = estimate_opnorm(&DenseOp(a));
        worst_norm = worst_norm.max((est - svd).abs() / svd);
    }
    // the solver's stacked operator on a tiny problem
    let g = ScannerGeometry::ring(2, 0.8, 1.0, 8, 3, 1.0).unwrap();
    let grid = VoxelGrid::new(&g, 4).unwrap();
    let k = PositronKernel::Gaussian { sigma: 0.02 };
    let quad = Quadrature { kernel_points: 5, directions: 0 };
    let op = DetectionOperator::assemble(&grid, &k, &quad).unwrap();
    let mut lm = Listmode::empty(&g, Mode::Discrete);
    lm.events = [(0, 0, 4), (1, 1, 5), (2, 2, 6), (2, 3, 7)].iter().map(|&(i, j, k)| ListmodeEvent::Discrete { i, j, k }).collect();
    let data = EventData::discrete(&grid, &op, &k, &quad, &lm, 1.0).unwrap();
    let pd = PdhgOperator::new(&grid, &data, &ModelParams { q: 2.0, beta: 1.0, p_s: 0.2, p_d: 0.6 });
    let svd = dense_of(&pd).svd(false, false).singular_values.max();
    let rel_pd = (estimate_opnorm(&pd) - svd).abs() / svd;
    worst_norm = worst_norm.max(rel_pd);
    check(
        worst <= 1e-10 && worst_norm <= 0.01,
        format!(
            "prox max relative error {worst:.1e} over 1000 draws, power iteration vs SVD max relative error {worst_norm:.1e}; {:.1} s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn guarded<T>(f: impl FnOnce() -> T) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
        e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into())
    })
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let want = |i: usize| only.as_ref().is_none_or(|v| v.contains(&i));
    let names = [
        "toy debias threshold",
        "scatter count along q",
        "mixed-integer equivalence",
        "scaling identities",
        "forward operator sandwich",
        "conservation and feasibility",
        "particle structure and relaxation gap",
        "Poisson sampler law",
        "prox and operator norm",
    ];
    let mut results: Vec<Option<Outcome>> = vec![None; 9];
    let run = |i: usize, f: &dyn Fn() -> Outcome| -> Option<Outcome> {
        want(i).then(|| guarded(f).unwrap_or_else(|p| Err(format!("panicked: {p}"))))
    };
    results[0] = run(1, &criterion_1);
    results[8] = run(9, &criterion_9);
    results[4] = run(5, &criterion_5);
    results[7] = run(8, &criterion_8);
    results[2] = run(3, &criterion_3);
    results[3] = run(4, &criterion_4);
    let mut extra = None;
    if want(7) {
        match guarded(criterion_7) {
            Ok((o, m)) => {
                results[6] = Some(o);
                extra = m;
            }
            Err(p) => results[6] = Some(Err(format!("panicked: {p}"))),
        }
    }
    if want(6) {
        results[5] = Some(guarded(move || criterion_6(extra)).unwrap_or_else(|p| Err(format!("panicked: {p}"))));
    }
    results[1] = run(2, &criterion_2);
    let mut failed = 0;
    println!();
    for (i, r) in results.iter().enumerate() {
        match r {
            Some(Ok(d)) => println!("criterion {} ({}): PASS  {d}", i + 1, names[i]),
            Some(Err(d)) => {
                failed += 1;
                println!("criterion {} ({}): FAIL  {d}", i + 1, names[i]);
            }
            None => println!("criterion {} ({}): skipped", i + 1, names[i]),
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
