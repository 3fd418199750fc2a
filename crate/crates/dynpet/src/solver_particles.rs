//! Sparse reconstruction as a finite set of travelling point masses.
//!
//! Alternates a conditional-gradient insertion, which finds the trajectory
//! with the most negative linearized cost by dynamic programming over the
//! time-layered voxel graph, with local refinement of masses and knots.

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::forward::events::EventData;
use crate::forward::grid::VoxelGrid;
use crate::geometry::{Point, ScannerGeometry};
use crate::listmode::Particle;
use crate::objective::{evaluate_particle_j, kinetic_energy, ModelParams, ObjectiveValue};
use crate::transport::layer_weights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParticleSolverConfig {
    /// Maximum number of insertion steps.
    pub max_outer: usize,
    /// Stop once an insertion lowers the objective by less than this, relative.
    pub rel_tol: f64,
    pub refine_sweeps: usize,
    pub refine_tol: f64,
    /// Particles lighter than this are removed.
    pub mass_eps: f64,
    /// Keep only voxels within this many voxel widths of an event's line in
    /// layers that have events. `None` keeps every voxel.
    pub prune_radius: Option<f64>,
    /// Particles whose knots all lie within this many voxel widths are merged.
    pub merge_radius: f64,
    /// Finite-difference step for knot gradients, in voxel widths.
    pub fd_step: f64,
}

impl Default for ParticleSolverConfig {
    fn default() -> Self {
        Self {
            max_outer: 20,
            rel_tol: 1e-6,
            refine_sweeps: 40,
            refine_tol: 1e-10,
            mass_eps: 1e-8,
            prune_radius: None,
            merge_radius: 0.5,
            fd_step: 1e-4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParticleSet {
    pub particles: Vec<Particle>,
    /// Objective of the set when it was last evaluated by the solver.
    pub objective: Option<f64>,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn total_mass(&self) -> f64 {
        self.particles.iter().map(|p| p.mass).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Insertion {
    NoDescent,
    Path {
        voxels: Vec<usize>,
        knots: Vec<Point>,
        /// Mass to add along the path, from an exact line search.
        step: f64,
        /// Linearized cost per unit mass; negative for a descent direction.
        linearized: f64,
    },
}

/// Detection rows `r_e` at the knots of one trajectory, one value per entry.
fn trajectory_rows(data: &EventData, knots: &[Point]) -> Vec<f64> {
    let mut r = vec![0.0; data.len()];
    for (t, evs) in data.by_slice.iter().enumerate() {
        if evs.is_empty() {
            continue;
        }
        for (e, v) in evs.iter().zip(data.rows_at(&knots[t], evs)) {
            r[*e] = v;
        }
    }
    r
}

/// The lifted problem in the form the solver manipulates:
/// `J = Σ_i m_i c_i − Σ_e w_e log Σ_i m_i a_ie` with
/// `c_i = (p_s+p_d)T/T_half + β KE(γ_i)` and
/// `a_ie = (q p_s c_e + p_d r_e(γ_i))ΔT/T_half`.
struct Lifted<'a> {
    data: &'a EventData,
    p: ModelParams,
    dt: f64,
    mass_cost: f64,
}

impl<'a> Lifted<'a> {
    fn new(data: &'a EventData, p: &ModelParams) -> Self {
        let dt = data.geom.dt();
        Self { data, p: *p, dt, mass_cost: (p.p_s + p.p_d) * data.geom.t_end / data.t_half }
    }

    fn coeffs(&self, rows: &[f64]) -> Vec<f64> {
        let (d, p) = (self.data, &self.p);
        rows.iter()
            .enumerate()
            .map(|(e, r)| (p.q * p.p_s * d.scatter[e] + p.p_d * r) * self.dt / d.t_half)
            .collect()
    }

    fn path_cost(&self, knots: &[Point]) -> f64 {
        self.mass_cost + if self.p.beta == 0.0 { 0.0 } else { self.p.beta * kinetic_energy(knots, self.dt) }
    }

    fn value(&self, masses: &[f64], costs: &[f64], lam: &[f64]) -> f64 {
        let lin: f64 = masses.iter().zip(costs).map(|(m, c)| m * c).sum();
        let mut nl = 0.0;
        for (w, l) in self.data.weight.iter().zip(lam) {
            if *l <= 0.0 {
                return f64::INFINITY;
            }
            nl -= w * l.ln();
        }
        lin + nl
    }
}

fn intensities(masses: &[f64], coeffs: &[Vec<f64>], ne: usize) -> Vec<f64> {
    let mut lam = vec![0.0; ne];
    for (m, a) in masses.iter().zip(coeffs) {
        for (l, v) in lam.iter_mut().zip(a) {
            *l += m * v;
        }
    }
    lam
}

/// Minimizer over `s ≥ 0` of `c s − Σ w_e log(λ_e + s a_e)`, for `c > 0`.
pub fn solve_mass(c: f64, lam: &[f64], a: &[f64], w: &[f64]) -> f64 {
    let deriv = |s: f64| -> (f64, f64) {
        let mut d1 = c;
        let mut d2 = 0.0;
        for ((l, a), w) in lam.iter().zip(a).zip(w) {
            if *a == 0.0 {
                continue;
            }
            let den = l + s * a;
            d1 -= w * a / den;
            d2 += w * a * a / (den * den);
        }
        (d1, d2)
    };
    if lam.iter().zip(a).all(|(l, a)| *l > 0.0 || *a == 0.0) && deriv(0.0).0 >= 0.0 {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while deriv(hi).0 < 0.0 {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return lo;
        }
    }
    let mut s = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (d1, d2) = deriv(s);
        if d1.abs() <= 1e-14 * c {
            break;
        }
        if d1 < 0.0 {
            lo = s;
        } else {
            hi = s;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
        let newton = s - d1 / d2;
        s = if d2 > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
    }
    s
}

fn project_into(geom: &ScannerGeometry, x: &Point) -> Point {
    let c = geom.center();
    let d = x - c;
    let r = d.norm();
    let lim = geom.radius_d * (1.0 - 1e-12);
    if r <= lim {
        *x
    } else {
        c + d * (lim / r)
    }
}

fn candidate_voxels(grid: &VoxelGrid, data: &EventData, t: usize, radius: Option<f64>) -> Vec<usize> {
    let evs = &data.by_slice[t];
    let Some(rad) = radius else {
        return (0..grid.nv()).collect();
    };
    if evs.is_empty() {
        return (0..grid.nv()).collect();
    }
    let lim = rad * grid.h;
    (0..grid.nv())
        .filter(|&x| {
            let y = &grid.centers[x];
            evs.iter().any(|&e| match &data.shape[e] {
                crate::forward::events::EventGeometry::Line { a, theta, .. } => {
                    crate::forward::response::line_distance(y, a, theta) <= lim
                }
                crate::forward::events::EventGeometry::Pair { .. } => {
                    let (c, _) = data.row(e);
                    c.binary_search(&(x as u32)).is_ok()
                }
            })
        })
        .collect()
}

/// Shortest path through the layered graph with `node[t][k]` costs on the
/// candidates `nodes[t]` and edge cost `edge_scale·w_t|x−y|²/ΔT`. Among
/// equally cheap paths the lexicographically smallest voxel sequence wins.
fn shortest_path(grid: &VoxelGrid, nodes: &[Vec<usize>], node_cost: &[Vec<f64>], edge_scale: f64) -> (Vec<usize>, f64) {
    let nt = nodes.len();
    let dt = grid.dt();
    let lw = layer_weights(nt);
    let mut value = node_cost[nt - 1].clone();
    let mut next: Vec<Vec<usize>> = vec![Vec::new(); nt];
    for t in (0..nt - 1).rev() {
        let k = edge_scale * lw[t] / dt;
        let (cur, nxt) = (&nodes[t], &nodes[t + 1]);
        let res: Vec<(f64, usize)> = cur
            .par_iter()
            .enumerate()
            .map(|(i, &x)| {
                let px = grid.centers[x];
                let mut best = f64::INFINITY;
                let mut arg = 0;
                for (j, &y) in nxt.iter().enumerate() {
                    let v = value[j] + k * (grid.centers[y] - px).norm_squared();
                    if v < best {
                        best = v;
                        arg = j;
                    }
                }
                (node_cost[t][i] + best, arg)
            })
            .collect();
        value = res.iter().map(|r| r.0).collect();
        next[t] = res.iter().map(|r| r.1).collect();
    }
    let mut best = f64::INFINITY;
    let mut k = 0;
    for (i, v) in value.iter().enumerate() {
        if *v < best {
            best = *v;
            k = i;
        }
    }
    let mut path = Vec::with_capacity(nt);
    for t in 0..nt {
        path.push(nodes[t][k]);
        if t + 1 < nt {
            k = next[t][k];
        }
    }
    (path, best)
}

/// Conditional-gradient insertion step for the current set.
pub fn insert_trajectory(grid: &VoxelGrid, set: &ParticleSet, data: &EventData, params: &ModelParams, cfg: &ParticleSolverConfig) -> Insertion {
    if data.is_empty() {
        return Insertion::NoDescent;
    }
    let lift = Lifted::new(data, params);
    let nt = grid.nt();
    let rows: Vec<Vec<f64>> = set.particles.iter().map(|p| trajectory_rows(data, &p.knots)).collect();
    let coeffs: Vec<Vec<f64>> = rows.iter().map(|r| lift.coeffs(r)).collect();
    let masses: Vec<f64> = set.particles.iter().map(|p| p.mass).collect();
    let lam = intensities(&masses, &coeffs, data.len());
    let empty = set.is_empty();
    let layer_mass = lift.mass_cost / nt as f64;
    // the empty set has no gradient; use the exact cost of one particle carrying the expected mass instead
    let m_est = data.total_weight() / lift.mass_cost;
    let nodes: Vec<Vec<usize>> = (0..nt).map(|t| candidate_voxels(grid, data, t, cfg.prune_radius)).collect();
    let scale = lift.dt / data.t_half;
    let node_cost: Vec<Vec<f64>> = (0..nt)
        .map(|t| {
            let evs = &data.by_slice[t];
            let pos: Vec<usize> = {
                let mut v = vec![usize::MAX; grid.nv()];
                for (k, x) in nodes[t].iter().enumerate() {
                    v[*x] = k;
                }
                v
            };
            if empty {
                let mut cost = vec![m_est * layer_mass; nodes[t].len()];
                for &e in evs {
                    let base = params.q * params.p_s * data.scatter[e] * scale;
                    let mut dense = vec![base; nodes[t].len()];
                    let (c, v) = data.row(e);
                    for (x, r) in c.iter().zip(v) {
                        let k = pos[*x as usize];
                        if k != usize::MAX {
                            dense[k] += params.p_d * r * scale;
                        }
                    }
                    for (cst, d) in cost.iter_mut().zip(dense) {
                        *cst -= data.weight[e] * if d > 0.0 { (m_est * d).ln() } else { f64::NEG_INFINITY };
                    }
                }
                cost
            } else {
                let mut base = layer_mass;
                for &e in evs {
                    base -= data.weight[e] / lam[e] * params.q * params.p_s * data.scatter[e] * scale;
                }
                let mut cost = vec![base; nodes[t].len()];
                for &e in evs {
                    let f = data.weight[e] / lam[e] * params.p_d * scale;
                    let (c, v) = data.row(e);
                    for (x, r) in c.iter().zip(v) {
                        let k = pos[*x as usize];
                        if k != usize::MAX {
                            cost[k] -= f * r;
                        }
                    }
                }
                cost
            }
        })
        .collect();
    let edge_scale = params.beta * if empty { m_est } else { 1.0 };
    let (voxels, value) = shortest_path(grid, &nodes, &node_cost, edge_scale);
    let knots: Vec<Point> = voxels.iter().map(|v| grid.centers[*v]).collect();
    let a = lift.coeffs(&trajectory_rows(data, &knots));
    let c = lift.path_cost(&knots);
    let linearized = if empty {
        value / m_est
    } else {
        c - data.weight.iter().zip(&a).zip(&lam).map(|((w, a), l)| w * a / l).sum::<f64>()
    };
    let step = solve_mass(c, &lam, &a, &data.weight);
    // the empty set has infinite objective when there is data, so any mass helps
    let descends = step > 0.0 && (empty || linearized < 0.0);
    debug!("insertion: linearized {linearized:.6e}, step {step:.6e}, descent {descends}");
    if !descends {
        return Insertion::NoDescent;
    }
    Insertion::Path { voxels, knots, step, linearized }
}

struct RefineState {
    masses: Vec<f64>,
    knots: Vec<Vec<Point>>,
    coeffs: Vec<Vec<f64>>,
    costs: Vec<f64>,
}

impl RefineState {
    fn build(lift: &Lifted, particles: &[Particle]) -> Self {
        let knots: Vec<Vec<Point>> = particles.iter().map(|p| p.knots.clone()).collect();
        let coeffs = knots.par_iter().map(|k| lift.coeffs(&trajectory_rows(lift.data, k))).collect();
        let costs = knots.iter().map(|k| lift.path_cost(k)).collect();
        Self { masses: particles.iter().map(|p| p.mass).collect(), knots, coeffs, costs }
    }

    fn value(&self, lift: &Lifted) -> f64 {
        lift.value(&self.masses, &self.costs, &intensities(&self.masses, &self.coeffs, lift.data.len()))
    }

    fn particles(&self) -> Vec<Particle> {
        self.masses.iter().zip(&self.knots).map(|(m, k)| Particle { mass: *m, knots: k.clone() }).collect()
    }
}

fn mass_sweep(lift: &Lifted, st: &mut RefineState) {
    let ne = lift.data.len();
    let mut lam = intensities(&st.masses, &st.coeffs, ne);
    for i in 0..st.masses.len() {
        let a = &st.coeffs[i];
        let mi = st.masses[i];
        let rest: Vec<f64> = lam.iter().zip(a).map(|(l, a)| (l - mi * a).max(0.0)).collect();
        let m_new = solve_mass(st.costs[i], &rest, a, &lift.data.weight);
        let before = lift.value(&[mi], &[st.costs[i]], &lam);
        let cand: Vec<f64> = rest.iter().zip(a).map(|(r, a)| r + m_new * a).collect();
        if lift.value(&[m_new], &[st.costs[i]], &cand) <= before {
            st.masses[i] = m_new;
            lam = cand;
        }
    }
}

/// Gradient of the objective with respect to every knot, by central
/// differences of the detection rows and exactly for the kinetic term.
fn knot_gradient(lift: &Lifted, st: &RefineState, h: f64) -> Vec<Vec<Point>> {
    let data = lift.data;
    let dim = data.geom.dim;
    let lam = intensities(&st.masses, &st.coeffs, data.len());
    (0..st.masses.len())
        .into_par_iter()
        .map(|i| {
            let m = st.masses[i];
            let knots = &st.knots[i];
            let nt = knots.len();
            let lw = layer_weights(nt);
            let mut g = vec![Point::zeros(); nt];
            for (t, evs) in data.by_slice.iter().enumerate() {
                if evs.is_empty() {
                    continue;
                }
                let f: Vec<f64> = evs.iter().map(|&e| data.weight[e] / lam[e] * m * lift.p.p_d * lift.dt / data.t_half).collect();
                for ax in 0..dim {
                    let mut up = knots[t];
                    let mut dn = knots[t];
                    up[ax] += h;
                    dn[ax] -= h;
                    let ru = data.rows_at(&up, evs);
                    let rd = data.rows_at(&dn, evs);
                    let s: f64 = f.iter().zip(ru.iter().zip(&rd)).map(|(f, (u, d))| f * (u - d)).sum();
                    g[t][ax] -= s / (2.0 * h);
                }
            }
            if lift.p.beta > 0.0 {
                for s in 0..nt.saturating_sub(1) {
                    let d = (knots[s + 1] - knots[s]) * (2.0 * lift.p.beta * m * lw[s] / lift.dt);
                    g[s] -= d;
                    g[s + 1] += d;
                }
            }
            g
        })
        .collect()
}

/// One backtracking step on the knots; returns the new value.
fn knot_step(lift: &Lifted, st: &mut RefineState, h: f64, step: &mut f64, current: f64) -> f64 {
    let geom = &lift.data.geom;
    let grad = knot_gradient(lift, st, h);
    // per-particle scaling by mass makes steps comparable across particles
    let mut slope = 0.0;
    for (g, m) in grad.iter().zip(&st.masses) {
        for v in g {
            slope += v.norm_squared() / m.max(1e-300);
        }
    }
    if slope == 0.0 {
        return current;
    }
    let mut alpha = *step * 2.0;
    for _ in 0..40 {
        let trial: Vec<Vec<Point>> = st
            .knots
            .iter()
            .zip(&grad)
            .zip(&st.masses)
            .map(|((k, g), m)| k.iter().zip(g).map(|(x, gx)| project_into(geom, &(x - gx * (alpha / m.max(1e-300))))).collect())
            .collect();
        let coeffs: Vec<Vec<f64>> = trial.par_iter().map(|k| lift.coeffs(&trajectory_rows(lift.data, k))).collect();
        let costs: Vec<f64> = trial.iter().map(|k| lift.path_cost(k)).collect();
        let v = lift.value(&st.masses, &costs, &intensities(&st.masses, &coeffs, lift.data.len()));
        if v <= current - 1e-4 * alpha * slope {
            st.knots = trial;
            st.coeffs = coeffs;
            st.costs = costs;
            *step = alpha;
            return v;
        }
        alpha *= 0.5;
    }
    *step = alpha;
    current
}

/// Block refinement: mass sweeps and knot descent steps. Never increases
/// the objective.
pub fn refine(grid: &VoxelGrid, particles: &[Particle], data: &EventData, params: &ModelParams, cfg: &ParticleSolverConfig) -> Vec<Particle> {
    if particles.is_empty() || data.is_empty() {
        return particles.to_vec();
    }
    let lift = Lifted::new(data, params);
    let mut st = RefineState::build(&lift, particles);
    let mut val = st.value(&lift);
    let h = cfg.fd_step * grid.h;
    let mut step = grid.h * grid.h / st.costs.iter().cloned().fold(1.0, f64::max);
    for sweep in 0..cfg.refine_sweeps {
        let start = val;
        mass_sweep(&lift, &mut st);
        val = st.value(&lift).min(val);
        if st.masses.iter().any(|m| *m > 0.0) {
            val = knot_step(&lift, &mut st, h, &mut step, val);
        }
        debug!("refine sweep {sweep}: {val:.10e}");
        if start - val <= cfg.refine_tol * val.abs().max(1.0) {
            break;
        }
    }
    st.particles()
}

fn prune(particles: &mut Vec<Particle>, eps: f64) {
    particles.retain(|p| p.mass >= eps);
}

fn try_merge(grid: &VoxelGrid, particles: &[Particle], data: &EventData, params: &ModelParams, cfg: &ParticleSolverConfig, current: f64) -> Option<(Vec<Particle>, f64)> {
    let lim = cfg.merge_radius * grid.h;
    for i in 0..particles.len() {
        for j in i + 1..particles.len() {
            let (a, b) = (&particles[i], &particles[j]);
            if a.knots.iter().zip(&b.knots).all(|(x, y)| (x - y).norm() <= lim) {
                let m = a.mass + b.mass;
                let knots = a.knots.iter().zip(&b.knots).map(|(x, y)| (x * a.mass + y * b.mass) / m).collect();
                let mut next: Vec<Particle> = particles.iter().enumerate().filter(|(k, _)| *k != i && *k != j).map(|(_, p)| p.clone()).collect();
                next.insert(i, Particle { mass: m, knots });
                let next = refine(grid, &next, data, params, cfg);
                let v = evaluate_particle_j(&next, data, params).total;
                if v <= current {
                    return Some((next, v));
                }
            }
        }
    }
    None
}

/// Sparse reconstruction: insert, refine, prune until an insertion stops
/// paying off.
pub fn reconstruct_particles(grid: &VoxelGrid, data: &EventData, params: &ModelParams, cfg: &ParticleSolverConfig) -> (ParticleSet, ObjectiveValue) {
    let mut set = ParticleSet::default();
    let mut val = evaluate_particle_j(&set.particles, data, params);
    if data.is_empty() {
        set.objective = Some(val.total);
        return (set, val);
    }
    let limit = data.total_weight().floor() as usize;
    for outer in 0..cfg.max_outer {
        if set.len() >= limit {
            break;
        }
        let (knots, step) = match insert_trajectory(grid, &set, data, params, cfg) {
            Insertion::NoDescent => break,
            Insertion::Path { knots, step, .. } => (knots, step),
        };
        let mut next = set.particles.clone();
        next.push(Particle { mass: step, knots });
        let mut next = refine(grid, &next, data, params, cfg);
        prune(&mut next, cfg.mass_eps);
        let mut v = evaluate_particle_j(&next, data, params);
        while let Some((merged, mv)) = try_merge(grid, &next, data, params, cfg, v.total) {
            next = merged;
            prune(&mut next, cfg.mass_eps);
            v = evaluate_particle_j(&next, data, params);
            debug!("merged to {} particles, {mv:.10e}", next.len());
        }
        let gain = val.total - v.total;
        info!("particle insertion {outer}: {} particles, objective {:.10e}", next.len(), v.total);
        if !(gain > 0.0) {
            break;
        }
        set.particles = next;
        val = v;
        if gain <= cfg.rel_tol * val.total.abs().max(1.0) {
            break;
        }
    }
    set.objective = Some(val.total);
    (set, val)
}
