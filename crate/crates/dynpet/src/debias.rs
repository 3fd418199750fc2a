//! The scatter-debiasing parameter `q`.
//!
//! Analytic thresholds of the one-dimensional toy models, the heuristic
//! choice of `q`, classification of events as scatter, the scatter count as
//! a function of `q`, and an exhaustive solver of the mixed-integer problem
//! for a handful of events.

use std::time::Instant;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::events::EventData;
use crate::forward::grid::{GridMeasure, VoxelGrid};
use crate::forward::kernel::PositronKernel;
use crate::forward::Mode;
use crate::geometry::ScannerGeometry;
use crate::objective::{split_densities, ModelParams};
use crate::solver_grid::{reconstruct_grid_from, GridSolverConfig};
use crate::transport::{add_divergence, layer_weights};

fn check_counts(m: usize) -> Result<()> {
    if m < 2 {
        return Err(Error::Parameter(format!("threshold needs m ≥ 2 events at the true location, got {m}")));
    }
    Ok(())
}

/// `(1 − p_s) G(0) / (p_s (m − 1))`.
pub fn toy_threshold_continuous(p_s: f64, g0: f64, m: usize) -> Result<f64> {
    check_counts(m)?;
    if !(p_s > 0.0 && p_s < 1.0) || !(g0 > 0.0) {
        return Err(Error::Parameter(format!("need p_s ∈ (0,1) and G(0) > 0, got {p_s}, {g0}")));
    }
    Ok((1.0 - p_s) * g0 / (p_s * (m - 1) as f64))
}

/// `(1 − p_s) M / (p_s (m − 1))`.
pub fn toy_threshold_discrete(p_s: f64, cells: usize, m: usize) -> Result<f64> {
    if cells < 2 {
        return Err(Error::Parameter(format!("need at least two cells, got {cells}")));
    }
    toy_threshold_continuous(p_s, cells as f64, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ToyVariant {
    /// Positron range kernel with peak `g0` on the periodic unit interval.
    Continuous { g0: f64 },
    /// `cells` detector intervals of width `1/cells`.
    Discrete { cells: usize },
}

/// One true Dirac mass at `x0` observed by `n` events, `m` of them at `x0`
/// and the rest at the well-separated `scattered` positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub variant: ToyVariant,
    pub p_s: f64,
    pub n: usize,
    pub m: usize,
    pub x0: f64,
    pub scattered: Vec<f64>,
}

impl ToyModel {
    pub fn new(variant: ToyVariant, p_s: f64, x0: f64, m: usize, scattered: Vec<f64>) -> Result<Self> {
        let t = Self { variant, p_s, n: m + scattered.len(), m, x0, scattered };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_s > 0.0 && self.p_s < 1.0) {
            return Err(Error::Parameter(format!("p_s must lie in (0,1), got {}", self.p_s)));
        }
        if self.m < 1 || self.m > self.n || self.n != self.m + self.scattered.len() {
            return Err(Error::Parameter(format!("need 1 ≤ m ≤ n, got m = {}, n = {}", self.m, self.n)));
        }
        let sites: Vec<f64> = std::iter::once(self.x0).chain(self.scattered.iter().copied()).collect();
        match self.variant {
            ToyVariant::Continuous { g0 } => {
                if !(g0 > 0.0) {
                    return Err(Error::Parameter(format!("kernel peak must be positive, got {g0}")));
                }
                let mut s: Vec<f64> = sites.iter().map(|x| x.rem_euclid(1.0)).collect();
                s.sort_by(f64::total_cmp);
                if s.windows(2).any(|w| w[1] - w[0] <= 0.0) || (s.len() > 1 && s[0] + 1.0 - s[s.len() - 1] <= 0.0) {
                    return Err(Error::Parameter("toy event positions must be distinct".into()));
                }
            }
            ToyVariant::Discrete { cells } => {
                if cells < 2 {
                    return Err(Error::Parameter(format!("need at least two cells, got {cells}")));
                }
                let mut c: Vec<usize> = sites.iter().map(|x| ((x.rem_euclid(1.0) * cells as f64) as usize).min(cells - 1)).collect();
                c.sort_unstable();
                if c.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::Parameter("toy events must fall in distinct cells".into()));
                }
            }
        }
        Ok(())
    }

    /// Coefficients `(a, b)` with `λ(x0) = a‖ρ‖ + bα` and `λ(x_i) = a‖ρ‖ + bβ`.
    fn coefficients(&self, q: f64) -> (f64, f64) {
        match self.variant {
            ToyVariant::Continuous { g0 } => (q * self.p_s, (1.0 - self.p_s) * g0),
            ToyVariant::Discrete { cells } => (q * self.p_s / cells as f64, 1.0 - self.p_s),
        }
    }

    pub fn threshold(&self) -> Result<f64> {
        match self.variant {
            ToyVariant::Continuous { g0 } => toy_threshold_continuous(self.p_s, g0, self.m),
            ToyVariant::Discrete { cells } => toy_threshold_discrete(self.p_s, cells, self.m),
        }
    }

    /// `J(αδ_{x0} + βΣδ_{x_i})`.
    pub fn objective(&self, alpha: f64, beta: f64, q: f64) -> f64 {
        let (a, b) = self.coefficients(q);
        let k = (self.n - self.m) as f64;
        let s = alpha + k * beta;
        let l0 = a * s + b * alpha;
        let l1 = a * s + b * beta;
        if l0 <= 0.0 || (k > 0.0 && l1 <= 0.0) {
            return f64::INFINITY;
        }
        s - self.m as f64 * l0.ln() - if k > 0.0 { k * l1.ln() } else { 0.0 }
    }

    fn grad(&self, alpha: f64, beta: f64, q: f64) -> (f64, f64) {
        let (a, b) = self.coefficients(q);
        let k = (self.n - self.m) as f64;
        let m = self.m as f64;
        let s = alpha + k * beta;
        let l0 = a * s + b * alpha;
        let l1 = a * s + b * beta;
        let da = 1.0 - m * (a + b) / l0 - if k > 0.0 { k * a / l1 } else { 0.0 };
        let db = k - m * a * k / l0 - if k > 0.0 { k * (a * k + b) / l1 } else { 0.0 };
        (da, db)
    }
}

/// Root of an increasing function on `[0, ∞)`, or 0 if it is nonnegative at 0.
fn increasing_root(f: impl Fn(f64) -> f64, scale: f64) -> f64 {
    if f(0.0) >= 0.0 {
        return 0.0;
    }
    let mut lo = 0.0;
    let mut hi = scale.max(1e-300);
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Minimizer `(α, β) ≥ 0` of the toy objective, from the first-order
/// conditions: `α(β)` by bisection on `∂_α J`, then `β` by bisection on the
/// derivative of the profile.
pub fn solve_toy(toy: &ToyModel, q: f64) -> (f64, f64) {
    let n = toy.n as f64;
    let alpha_of = |beta: f64| increasing_root(|a| toy.grad(a, beta, q).0, n);
    if toy.n == toy.m {
        return (alpha_of(0.0), 0.0);
    }
    let beta = increasing_root(|b| toy.grad(alpha_of(b), b, q).1, 1.0);
    (alpha_of(beta), beta)
}

/// Brute-force grid oracle: `res × res` grid on `[0, 2n] × [0, n]`, zoomed
/// `levels` times around the best node.
pub fn brute_force_toy(toy: &ToyModel, q: f64, res: usize, levels: usize) -> (f64, f64, f64) {
    let n = toy.n as f64;
    let (mut a0, mut a1, mut b0, mut b1) = (0.0, 2.0 * n, 0.0, n);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for _ in 0..levels {
        let da = (a1 - a0) / (res - 1) as f64;
        let db = (b1 - b0) / (res - 1) as f64;
        for i in 0..res {
            let a = a0 + i as f64 * da;
            for j in 0..res {
                let b = b0 + j as f64 * db;
                let v = toy.objective(a, b, q);
                if v < best.0 {
                    best = (v, a, b);
                }
            }
        }
        a0 = (best.1 - 2.0 * da).max(0.0);
        a1 = best.1 + 2.0 * da;
        b0 = (best.2 - 2.0 * db).max(0.0);
        b1 = best.2 + 2.0 * db;
    }
    (best.1, best.2, best.0)
}

/// Smallest `q` for which `predicate(q)` (the debiased family) holds, by
/// bisection on `[lo, hi]`, assuming `!predicate(lo)` and `predicate(hi)`.
pub fn bisect_threshold(mut lo: f64, mut hi: f64, rel_tol: f64, predicate: impl Fn(f64) -> bool) -> f64 {
    while hi - lo > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if predicate(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `max{1, p_d·count/(p_s‖ρ†‖)·𝓗(∂𝒟)/δ²}` on plain numbers; `count` is the
/// number of detectors or the kernel peak, `boundary` the detector surface
/// measure (perimeter in 2D).
pub fn heuristic_q_value(p_s: f64, p_d: f64, total_mass: f64, count: f64, boundary: f64, delta: f64) -> Result<f64> {
    if !(p_s > 0.0) {
        return Err(Error::Parameter("the heuristic needs a positive scatter probability".into()));
    }
    if !(total_mass > 0.0) || !(delta > 0.0) {
        return Err(Error::Parameter(format!("need positive mass and gap, got {total_mass}, {delta}")));
    }
    Ok((p_d * count / (p_s * total_mass) * boundary / (delta * delta)).max(1.0))
}

/// Heuristic debiasing parameter for a scanner: `M` detectors in discrete
/// mode, the kernel peak `G(0)` in continuous mode.
pub fn heuristic_q(geom: &ScannerGeometry, p_s: f64, p_d: f64, total_mass: f64, mode: Mode, kernel: &PositronKernel) -> Result<f64> {
    let count = match mode {
        Mode::Discrete => geom.n_detectors() as f64,
        Mode::Continuous => {
            if kernel.is_none() {
                return Err(Error::Parameter("continuous heuristic needs a positron kernel".into()));
            }
            kernel.peak(geom.dim)
        }
    };
    heuristic_q_value(p_s, p_d, total_mass, count, geom.boundary_measure(), geom.delta)
}

/// Events explained by scatter: `over` where `q p_s A^s ρ ≥ p_d A^d ρ`,
/// `under` where the inequality is strict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterSplit {
    pub under: Vec<usize>,
    pub over: Vec<usize>,
    /// Counts with multiplicity of merged bins.
    pub n_under: f64,
    pub n_over: f64,
}

pub fn scatter_sets(m: &GridMeasure, data: &EventData, p: &ModelParams) -> ScatterSplit {
    scatter_sets_banded(m, data, p, 0.0)
}

/// As [`scatter_sets`] with a relative band: `under` needs `s > (1+band) d`,
/// `over` only `s ≥ (1−band) d`. Used for approximate minimizers.
pub fn scatter_sets_banded(m: &GridMeasure, data: &EventData, p: &ModelParams, band: f64) -> ScatterSplit {
    let dens = split_densities(m, data, p);
    let mut s = ScatterSplit { under: Vec::new(), over: Vec::new(), n_under: 0.0, n_over: 0.0 };
    for (e, (sc, det)) in dens.iter().enumerate() {
        if *sc >= (1.0 - band) * det {
            s.over.push(e);
            s.n_over += data.weight[e];
        }
        if *sc > (1.0 + band) * det {
            s.under.push(e);
            s.n_under += data.weight[e];
        }
    }
    s
}

/// A `q` above which every event is classified as scatter for any measure:
/// twice `max_e p_d max_x r_e(x) / (p_s c_e)`.
pub fn sweep_top_q(data: &EventData, p: &ModelParams) -> f64 {
    let mut q = 0.0f64;
    for e in 0..data.len() {
        let (_, v) = data.row(e);
        let r = v.iter().cloned().fold(0.0, f64::max);
        q = q.max(p.p_d * r / (p.p_s * data.scatter[e]));
    }
    2.0 * q
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub q: f64,
    pub n_s_lo: f64,
    pub n_s_hi: f64,
    pub min_j: f64,
    pub converged: bool,
    pub runtime: f64,
}

/// Reconstruct at every `q` (warm-starting from the previous solution) and
/// report the scatter count interval and the attained objective.
pub fn count_scatter_curve(grid: &VoxelGrid, data: &EventData, base: &ModelParams, qs: &[f64], cfg: &GridSolverConfig, band: f64) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(qs.len());
    let mut warm: Option<GridMeasure> = None;
    for &q in qs {
        let p = ModelParams { q, ..*base };
        let start = Instant::now();
        let (m, val, diag) = reconstruct_grid_from(grid, data, &p, cfg, warm.as_ref())?;
        let split = scatter_sets_banded(&m, data, &p, band);
        let pt = SweepPoint {
            q,
            n_s_lo: split.n_under,
            n_s_hi: split.n_over,
            min_j: val.total,
            converged: diag.converged,
            runtime: start.elapsed().as_secs_f64(),
        };
        if !diag.converged {
            warn!("q = {q}: solver stopped after {} iterations", diag.iterations);
        }
        info!("q = {q:.6e}: N_s ∈ [{}, {}], J = {:.10e}", pt.n_s_lo, pt.n_s_hi, pt.min_j);
        out.push(pt);
        warm = Some(m);
    }
    Ok(out)
}

pub fn write_sweep_csv(path: &std::path::Path, pts: &[SweepPoint]) -> Result<()> {
    let mut s = String::from("q,N_s_lo,N_s_hi,minJ,runtime\n");
    for p in pts {
        s.push_str(&format!("{:.17e},{},{},{:.17e},{:.6}\n", p.q, p.n_s_lo, p.n_s_hi, p.min_j, p.runtime));
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Minimum over feasible `(ρ, η)` of the objective with a fixed scatter
/// assignment, for tiny grids. `ρ₀` and `η` are the unknowns, later slices
/// follow from the continuity equation, and a log barrier keeps `ρ > 0`.
pub fn split_minimum(grid: &VoxelGrid, data: &EventData, p: &ModelParams, scattered: &[bool]) -> Result<(f64, GridMeasure)> {
    let nv = grid.nv();
    let nt = grid.nt();
    let nf = grid.nf();
    let nl = grid.ntf();
    let nx = nv + nl * nf;
    let nr = nt * nv;
    if nx > 400 {
        return Err(Error::Parameter(format!("exhaustive solver is meant for tiny grids, got {nx} unknowns")));
    }
    // ρ = L x
    let mut l = DMatrix::<f64>::zeros(nr, nx);
    for x in 0..nv {
        l[(x, x)] = 1.0;
    }
    let s = grid.dt() / grid.h;
    for t in 0..nl {
        for x in 0..nv {
            for j in 0..nx {
                l[((t + 1) * nv + x, j)] = l[(t * nv + x, j)];
            }
        }
        for f in 0..nf {
            let mut unit = vec![0.0; nf];
            unit[f] = 1.0;
            let mut div = vec![0.0; nv];
            add_divergence(grid, &unit, s, &mut div);
            for (x, d) in div.iter().enumerate() {
                l[((t + 1) * nv + x, nv + t * nf + f)] -= d;
            }
        }
    }
    let unit = ModelParams { q: 1.0, ..*p };
    let rows: Vec<DVector<f64>> = (0..data.len())
        .map(|e| {
            let mut c = DVector::<f64>::zeros(nr);
            let off = data.slice[e] * nv;
            if scattered[e] {
                for x in 0..nv {
                    c[off + x] = unit.p_s * data.scatter[e] / data.t_half;
                }
            } else {
                let (cols, vals) = data.row(e);
                for (x, v) in cols.iter().zip(vals) {
                    c[off + *x as usize] = unit.p_d * v / data.t_half;
                }
            }
            l.tr_mul(&c)
        })
        .collect();
    let mass = l.tr_mul(&DVector::from_element(nr, (p.p_s + p.p_d) / data.t_half));
    let lw = &layer_weights(nt);
    let bars: Vec<(usize, f64, DVector<f64>)> = (0..nl)
        .flat_map(|t| {
            let l = &l;
            grid.faces.iter().enumerate().map(move |(f, face)| {
                let mut u = DVector::<f64>::zeros(nx);
                for r in [t * nv + face.lo as usize, t * nv + face.hi as usize, (t + 1) * nv + face.lo as usize, (t + 1) * nv + face.hi as usize] {
                    u += l.row(r).transpose() * 0.25;
                }
                (nv + t * nf + f, p.beta * lw[t], u)
            })
        })
        .collect();
    let lrows: Vec<DVector<f64>> = (0..nr).map(|r| l.row(r).transpose()).collect();
    let w = &data.weight;

    let value = |x: &DVector<f64>, mu: f64| -> f64 {
        let mut v = mass.dot(x);
        for (e, b) in rows.iter().enumerate() {
            let d = b.dot(x);
            if d <= 0.0 {
                return f64::INFINITY;
            }
            v -= w[e] * d.ln();
        }
        for r in &lrows {
            let d = r.dot(x);
            if d <= 0.0 {
                return f64::INFINITY;
            }
            if mu > 0.0 {
                v -= mu * d.ln();
            }
        }
        for (j, k, u) in &bars {
            if *k > 0.0 {
                v += k * x[*j] * x[*j] / u.dot(x);
            }
        }
        v
    };

    let total = data.total_weight() * data.t_half / (p.p_s + p.p_d);
    let mut x = DVector::<f64>::zeros(nx);
    for i in 0..nv {
        x[i] = total / nr as f64;
    }
    let mut mu = total / nr as f64 * 1e-2;
    let mu_end = 1e-13 * total.max(1.0) / nr as f64;
    loop {
        for _ in 0..200 {
            let mut g = mass.clone();
            let mut h = DMatrix::<f64>::zeros(nx, nx);
            for (e, b) in rows.iter().enumerate() {
                let d = b.dot(&x);
                g.axpy(-w[e] / d, b, 1.0);
                h.ger(w[e] / (d * d), b, b, 1.0);
            }
            for r in &lrows {
                let d = r.dot(&x);
                g.axpy(-mu / d, r, 1.0);
                h.ger(mu / (d * d), r, r, 1.0);
            }
            for (j, k, u) in &bars {
                if *k == 0.0 {
                    continue;
                }
                let rb = u.dot(&x);
                let eta = x[*j];
                // k η²/r̄: gradient k(2η/r̄, −η²/r̄²), Hessian (2k/r̄) z zᵀ with z = e_j − (η/r̄) u
                let mut z = u * (-eta / rb);
                z[*j] += 1.0;
                g[*j] += 2.0 * k * eta / rb;
                g.axpy(-k * eta * eta / (rb * rb), u, 1.0);
                h.ger(2.0 * k / rb, &z, &z, 1.0);
            }
            let ridge = 1e-14 * h.diagonal().amax().max(1e-300);
            for i in 0..nx {
                h[(i, i)] += ridge;
            }
            let Some(ch) = h.cholesky() else {
                return Err(Error::Numeric("barrier Hessian is not positive definite".into()));
            };
            let dx = -ch.solve(&g);
            let dec = -g.dot(&dx);
            if dec <= 1e-13 * (1.0 + value(&x, mu).abs()) {
                break;
            }
            let f0 = value(&x, mu);
            let mut step = 1.0;
            let mut moved = false;
            for _ in 0..60 {
                let trial = &x + &dx * step;
                let f1 = value(&trial, mu);
                if f1 <= f0 - 0.25 * step * dec {
                    x = trial;
                    moved = true;
                    break;
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if mu <= mu_end {
            break;
        }
        mu = (mu * 0.1).max(mu_end);
    }
    let rho = &l * &x;
    let mut m = GridMeasure::zeros(grid);
    m.rho.copy_from_slice(rho.as_slice());
    m.eta.copy_from_slice(&x.as_slice()[nv..]);
    Ok((value(&x, 0.0), m))
}

fn subset_mask(code: usize, n: usize) -> Vec<bool> {
    (0..n).map(|i| code >> i & 1 == 1).collect()
}

/// Exhaustive minimum of the mixed-integer problem over all scatter sets of
/// size `n_s` (entries counted once each). Returns the value and the best set.
pub fn combinatorial_minimum(grid: &VoxelGrid, data: &EventData, p: &ModelParams, n_s: usize) -> Result<(f64, Vec<bool>)> {
    let n = data.len();
    if n > 12 {
        return Err(Error::Parameter(format!("exhaustive search is limited to 12 entries, got {n}")));
    }
    if data.weight.iter().any(|w| *w != 1.0) {
        return Err(Error::Parameter("exhaustive search needs unit-weight entries".into()));
    }
    let mut best = (f64::INFINITY, vec![false; n]);
    for code in 0..1usize << n {
        if code.count_ones() as usize != n_s {
            continue;
        }
        let mask = subset_mask(code, n);
        let (v, _) = split_minimum(grid, data, p, &mask)?;
        if v < best.0 {
            best = (v, mask);
        }
    }
    Ok(best)
}

/// Local minimization of the max form by alternating between the convex
/// problem for a fixed scatter set and reclassification (`over` set), from
/// each start. Returns the best value, measure and final scatter set.
pub fn max_form_local(grid: &VoxelGrid, data: &EventData, p: &ModelParams, starts: &[Vec<bool>]) -> Result<(f64, GridMeasure, Vec<bool>)> {
    let mut best: Option<(f64, GridMeasure, Vec<bool>)> = None;
    let lq = p.q.ln();
    for s0 in starts {
        let mut s = s0.clone();
        let mut cur = f64::INFINITY;
        let mut res = None;
        for _ in 0..100 {
            let (v, m) = split_minimum(grid, data, p, &s)?;
            let ns = s.iter().filter(|b| **b).count() as f64;
            let val = v - ns * lq;
            if val >= cur - 1e-13 * cur.abs() {
                break;
            }
            cur = val;
            let split = scatter_sets(&m, data, p);
            let mut next = vec![false; data.len()];
            for e in split.over {
                next[e] = true;
            }
            let done = next == s;
            res = Some((val, m, s.clone()));
            if done {
                break;
            }
            s = next;
        }
        if let Some(r) = res {
            if best.as_ref().is_none_or(|b| r.0 < b.0) {
                best = Some(r);
            }
        }
    }
    best.ok_or_else(|| Error::Parameter("no start for the local search".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn toy_continuous(g0: f64, m: usize, k: usize) -> ToyModel {
        let sc = (0..k).map(|i| 0.5 + 0.4 * i as f64 / k.max(1) as f64).collect();
        ToyModel::new(ToyVariant::Continuous { g0 }, 0.5, 0.1, m, sc).unwrap()
    }

    #[test]
    fn threshold_formulas() {
        assert_relative_eq!(toy_threshold_continuous(0.5, 2.0, 11).unwrap(), 0.2, epsilon = 1e-15);
        assert_relative_eq!(toy_threshold_continuous(0.5, 1.0, 2).unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(toy_threshold_discrete(0.5, 20, 11).unwrap(), 2.0, epsilon = 1e-15);
        assert_relative_eq!(toy_threshold_discrete(0.9, 10, 2).unwrap(), 10.0 / 9.0, epsilon = 1e-15);
        assert_eq!(toy_threshold_discrete(0.3, 7, 4).unwrap(), toy_threshold_continuous(0.3, 7.0, 4).unwrap());
        assert!(toy_threshold_continuous(0.5, 2.0, 1).is_err());
        let mut prev = f64::INFINITY;
        for m in 2..50 {
            let q = toy_threshold_continuous(0.5, 2.0, m).unwrap();
            assert!(q < prev);
            prev = q;
        }
    }

    /// From the first-order conditions: `β = max(0, 1 − q/q*)` and
    /// `α = β + (m−1)(a(k+1)+b)/b` below the threshold, `(n, 0)` above.
    fn closed_form(toy: &ToyModel, q: f64) -> (f64, f64) {
        let qs = toy.threshold().unwrap();
        let (a, b) = toy.coefficients(q);
        let k = (toy.n - toy.m) as f64;
        let beta = (1.0 - q / qs).max(0.0);
        if beta == 0.0 {
            (toy.n as f64, 0.0)
        } else {
            (beta + (toy.m as f64 - 1.0) * (a * (k + 1.0) + b) / b, beta)
        }
    }

    #[test]
    fn toy_solution_matches_closed_form_and_grid() {
        let toy = toy_continuous(2.0, 11, 5);
        for q in [0.02, 0.1, 0.19, 0.21, 0.5, 3.0] {
            let (a, b) = solve_toy(&toy, q);
            let (ca, cb) = closed_form(&toy, q);
            assert_relative_eq!(a, ca, max_relative = 1e-9);
            assert!((b - cb).abs() <= 1e-9);
            let (ga, gb, gv) = brute_force_toy(&toy, q, 200, 4);
            assert!((ga - a).abs() <= 1e-3 && (gb - b).abs() <= 1e-3, "{q}: grid ({ga}, {gb}) vs ({a}, {b})");
            assert!(toy.objective(a, b, q) <= gv + 1e-9);
        }
    }

    #[test]
    fn toy_debiased_above_threshold() {
        let toy = ToyModel::new(ToyVariant::Discrete { cells: 20 }, 0.5, 0.01, 11, vec![0.33, 0.52, 0.77]).unwrap();
        let qs = toy.threshold().unwrap();
        let (a, b) = solve_toy(&toy, qs * (1.0 + 1e-6));
        assert_eq!(b, 0.0);
        assert_relative_eq!(a, 14.0, max_relative = 1e-12);
        assert!(solve_toy(&toy, qs * (1.0 - 1e-6)).1 > 0.0);
        let found = bisect_threshold(qs * 0.5, qs * 2.0, 1e-8, |q| solve_toy(&toy, q).1 == 0.0);
        assert_relative_eq!(found, qs, max_relative = 1e-7);
    }

    #[test]
    fn toy_without_scatter() {
        let toy = ToyModel::new(ToyVariant::Continuous { g0: 3.0 }, 0.4, 0.2, 6, vec![]).unwrap();
        let (a, b) = solve_toy(&toy, 0.0);
        assert_relative_eq!(a, 6.0, max_relative = 1e-12);
        assert_eq!(b, 0.0);
    }

    #[test]
    fn toy_rejects_coincident_events() {
        assert!(ToyModel::new(ToyVariant::Discrete { cells: 10 }, 0.5, 0.01, 3, vec![0.05]).is_err());
        assert!(ToyModel::new(ToyVariant::Continuous { g0: 1.0 }, 0.5, 0.25, 3, vec![1.25]).is_err());
        assert!(ToyModel::new(ToyVariant::Continuous { g0: 1.0 }, 1.5, 0.25, 3, vec![0.5]).is_err());
    }

    #[test]
    fn heuristic_plug_in() {
        let q = heuristic_q_value(0.2, 0.8, 50.0, 100.0, std::f64::consts::PI, 0.2).unwrap();
        assert_relative_eq!(q, 628.3185307179587, max_relative = 1e-12);
        assert_eq!(heuristic_q_value(0.9, 1e-9, 50.0, 100.0, 3.0, 0.2).unwrap(), 1.0);
        assert!(heuristic_q_value(0.0, 0.8, 50.0, 100.0, 3.0, 0.2).is_err());
        let g = ScannerGeometry::ring(2, 0.8, 1.0, 16, 4, 1.0).unwrap();
        let k = PositronKernel::Gaussian { sigma: 0.03 };
        let qc = heuristic_q(&g, 0.2, 0.6, 10.0, Mode::Continuous, &k).unwrap();
        let expect = heuristic_q_value(0.2, 0.6, 10.0, k.peak(2), g.boundary_measure(), g.delta).unwrap();
        assert_eq!(qc, expect);
    }

    fn micro() -> (VoxelGrid, EventData) {
        use crate::forward::operator::DetectionOperator;
        use crate::forward::response::Quadrature;
        use crate::listmode::{Listmode, ListmodeEvent};
        let g = ScannerGeometry::ring(2, 0.8, 1.0, 8, 2, 1.0).unwrap();
        let grid = VoxelGrid::new(&g, 4).unwrap();
        let k = PositronKernel::Gaussian { sigma: 0.02 };
        let quad = Quadrature { kernel_points: 3, directions: 0 };
        let op = DetectionOperator::assemble(&grid, &k, &quad).unwrap();
        let mut lm = Listmode::empty(&g, Mode::Discrete);
        lm.events = [(0, 0, 4), (0, 1, 5), (0, 2, 5), (1, 0, 3), (1, 2, 6), (1, 3, 7)]
            .iter()
            .map(|&(i, j, k)| ListmodeEvent::Discrete { i, j, k })
            .collect();
        let data = EventData::discrete(&grid, &op, &k, &quad, &lm, 1.0).unwrap();
        (grid, data)
    }

    #[test]
    fn barrier_solver_matches_grid_solver() {
        let (grid, data) = micro();
        let p = ModelParams { q: 0.0, beta: 0.5, p_s: 0.2, p_d: 0.6 };
        let (v, m) = split_minimum(&grid, &data, &p, &vec![false; data.len()]).unwrap();
        let direct = crate::objective::evaluate_j(&grid, &m, &data, &p).total;
        assert_relative_eq!(v, direct, max_relative = 1e-9);
        let cfg = GridSolverConfig { tol: 1e-8, max_iters: 200_000, ..Default::default() };
        let (_, jg, _) = crate::solver_grid::reconstruct_grid(&grid, &data, &p, &cfg).unwrap();
        assert!((jg.total - v).abs() <= 1e-5 * v.abs(), "{} vs {v}", jg.total);
        assert!(v <= jg.total + 1e-9 * v.abs());
    }

    #[test]
    fn max_form_matches_exhaustive_search() {
        let (grid, data) = micro();
        let n = data.len();
        let top = sweep_top_q(&data, &ModelParams { q: 1.0, beta: 0.5, p_s: 0.2, p_d: 0.6 });
        for f in [0.2, 0.3, 0.4, 0.5] {
            let q = f * top;
            let p = ModelParams { q, beta: 0.5, p_s: 0.2, p_d: 0.6 };
            let starts = vec![vec![false; n], vec![true; n], (0..n).map(|i| i % 2 == 0).collect()];
            let (jbar, m, set) = max_form_local(&grid, &data, &p, &starts).unwrap();
            let ns = set.iter().filter(|b| **b).count();
            let direct = crate::objective::evaluate_j_max(&grid, &m, &data, &p).total;
            assert!(direct <= jbar + 1e-9 * jbar.abs());
            let (exh, _) = combinatorial_minimum(&grid, &data, &p, ns).unwrap();
            assert!((exh - (direct + ns as f64 * q.ln())).abs() <= 1e-6, "q = {q}: {exh} vs {direct} + {ns} ln q");
        }
    }
}
