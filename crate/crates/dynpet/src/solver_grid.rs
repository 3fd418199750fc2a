//! Grid reconstruction by diagonally preconditioned primal-dual hybrid
//! gradient iterations.
//!
//! Primal variables are the slice masses `ρ` and layer fluxes `η`. The linear
//! operator stacks three blocks, each with a cheap dual prox:
//!
//! * event intensities, handled by the closed-form prox of `−w log`;
//! * face averages `ρ̄` and fluxes `η`, whose perspective energy has the
//!   parabolic set `{α + γ²/(4k) ≤ 0}` as conjugate domain;
//! * the continuity residual, whose multiplier takes plain ascent steps.
//!
//! Internally the problem runs in normalized units `u = ρ/s`,
//! `v = η ΔT/(h s)`, with `s` the mean cell mass of the initial guess, so the
//! continuity rows have unit coefficients. After the iterations the output is
//! projected onto the feasible set (see [`repair_feasibility`]).

use log::{debug, info};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::events::EventData;
use crate::forward::grid::{GridMeasure, VoxelGrid};
use crate::objective::{evaluate_j, ModelParams, ObjectiveValue};
use crate::transport::{
    add_divergence, add_gradient, check_continuity, components, face_average, layer_weights, weighted_flux,
    ContinuityCheck,
};

/// Proximal map of `s ↦ −w log s` with step `tau`.
pub fn prox_neglog(x: f64, tau: f64, w: f64) -> f64 {
    let d = (x * x + 4.0 * tau * w).sqrt();
    if x >= 0.0 {
        0.5 * (x + d)
    } else {
        2.0 * tau * w / (d - x)
    }
}

/// Prox of the conjugate of `−w log`, by Moreau's identity.
fn dual_neglog(z: f64, sigma: f64, w: f64) -> f64 {
    let d = (z * z + 4.0 * sigma * w).sqrt();
    if z <= 0.0 {
        0.5 * (z - d)
    } else {
        -2.0 * sigma * w / (z + d)
    }
}

/// Euclidean projection onto `{(a, b): a + b²/(4k) ≤ 0}`; for `k = 0` the set
/// is the half line `{a ≤ 0, b = 0}`.
pub fn project_parabola(a: f64, b: f64, k: f64) -> (f64, f64) {
    if k <= 0.0 {
        return (a.min(0.0), 0.0);
    }
    if a + b * b / (4.0 * k) <= 0.0 {
        return (a, b);
    }
    if b == 0.0 {
        return (0.0, 0.0);
    }
    // stationarity: g³ + p g + q = 0 with g = |γ|, one positive root
    let bb = b.abs();
    let c1 = 1.0 + a / (2.0 * k);
    let c3 = 1.0 / (8.0 * k * k);
    let p = c1 / c3;
    let q = bb / c3;
    let disc = 0.25 * q * q + (p / 3.0).powi(3);
    let mut g = if disc >= 0.0 {
        let big = (0.5 * q + disc.sqrt()).cbrt();
        q / (big * big + p / 3.0 + (p / (3.0 * big)).powi(2))
    } else {
        let r = 2.0 * (-p / 3.0).sqrt();
        let arg = (1.5 * q / -p * (-3.0 / p).sqrt()).clamp(-1.0, 1.0);
        r * (arg.acos() / 3.0).cos()
    };
    for _ in 0..2 {
        let fg = c3 * g * g * g + c1 * g - bb;
        let df = 3.0 * c3 * g * g + c1;
        if df > 0.0 {
            let next = g - fg / df;
            if next > 0.0 && next <= bb {
                g = next;
            }
        }
    }
    (-g * g / (4.0 * k), g.copysign(b))
}

pub trait LinearOp {
    /// `(input length, output length)`.
    fn dims(&self) -> (usize, usize);
    fn apply(&self, x: &[f64], out: &mut [f64]);
    fn adjoint(&self, y: &[f64], out: &mut [f64]);
}

pub struct DenseOp(pub nalgebra::DMatrix<f64>);

impl LinearOp for DenseOp {
    fn dims(&self) -> (usize, usize) {
        (self.0.ncols(), self.0.nrows())
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let y = &self.0 * nalgebra::DVector::from_column_slice(x);
        out.copy_from_slice(y.as_slice());
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        let x = self.0.transpose() * nalgebra::DVector::from_column_slice(y);
        out.copy_from_slice(x.as_slice());
    }
}

/// `D_out^{1/2} K D_in^{1/2}`.
pub struct Scaled<'a, K: LinearOp> {
    pub op: &'a K,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl<K: LinearOp> LinearOp for Scaled<'_, K> {
    fn dims(&self) -> (usize, usize) {
        self.op.dims()
    }
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let xs: Vec<f64> = x.iter().zip(&self.right).map(|(a, b)| a * b.sqrt()).collect();
        self.op.apply(&xs, out);
        out.iter_mut().zip(&self.left).for_each(|(o, l)| *o *= l.sqrt());
    }
    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        let ys: Vec<f64> = y.iter().zip(&self.left).map(|(a, b)| a * b.sqrt()).collect();
        self.op.adjoint(&ys, out);
        out.iter_mut().zip(&self.right).for_each(|(o, r)| *o *= r.sqrt());
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Largest singular value by power iteration on `KᵀK` from a fixed
/// pseudo-random start.
pub fn estimate_opnorm(op: &dyn LinearOp) -> f64 {
    estimate_opnorm_with(op, 1e-10, 5000)
}

/// [`estimate_opnorm`] with an explicit relative tolerance and iteration cap.
pub fn estimate_opnorm_with(op: &dyn LinearOp, tol: f64, max_iter: usize) -> f64 {
    let (n, m) = op.dims();
    if n == 0 || m == 0 {
        return 0.0;
    }
    let mut rng = crate::rng::stream(0x5eed, 0);
    let mut x: Vec<f64> = (0..n).map(|_| 0.5 + rng.random::<f64>()).collect();
    let mut y = vec![0.0; m];
    let mut z = vec![0.0; n];
    let nx = norm(&x);
    x.iter_mut().for_each(|v| *v /= nx);
    let mut est = 0.0;
    for _ in 0..max_iter {
        op.apply(&x, &mut y);
        op.adjoint(&y, &mut z);
        let nz = norm(&z);
        if nz == 0.0 {
            return 0.0;
        }
        let next = nz.sqrt();
        z.iter().zip(x.iter_mut()).for_each(|(a, b)| *b = a / nz);
        if (next - est).abs() <= tol * next {
            return next;
        }
        est = next;
    }
    est
}

/// The stacked operator in normalized units.
pub struct PdhgOperator<'a> {
    grid: &'a VoxelGrid,
    data: &'a EventData,
    /// `q p_s c_e / T_half`
    sc: Vec<f64>,
    /// `p_d / T_half`
    dc: f64,
    deg: Vec<f64>,
    nv: usize,
    nf: usize,
    nt: usize,
    nl: usize,
    ne: usize,
}

impl<'a> PdhgOperator<'a> {
    pub fn new(grid: &'a VoxelGrid, data: &'a EventData, p: &ModelParams) -> Self {
        let nv = grid.nv();
        let mut deg = vec![0.0; nv];
        for f in &grid.faces {
            deg[f.lo as usize] += 1.0;
            deg[f.hi as usize] += 1.0;
        }
        let sc = data.scatter.iter().map(|c| p.q * p.p_s * c / data.t_half).collect();
        Self {
            grid,
            data,
            sc,
            dc: p.p_d / data.t_half,
            deg,
            nv,
            nf: grid.nf(),
            nt: grid.nt(),
            nl: grid.ntf(),
            ne: data.len(),
        }
    }

    fn nu(&self) -> usize {
        self.nt * self.nv
    }

    fn off_alpha(&self) -> usize {
        self.ne
    }

    fn off_gamma(&self) -> usize {
        self.ne + self.nl * self.nf
    }

    fn off_phi(&self) -> usize {
        self.ne + 2 * self.nl * self.nf
    }

    fn data_apply(&self, u: &[f64], out: &mut [f64]) {
        let nv = self.nv;
        let sums: Vec<f64> = (0..self.nt).map(|t| u[t * nv..(t + 1) * nv].iter().sum()).collect();
        out.par_iter_mut().enumerate().with_min_len(64).for_each(|(e, o)| {
            let i = self.data.slice[e];
            let (c, v) = self.data.row(e);
            let s = &u[i * nv..(i + 1) * nv];
            let det: f64 = c.iter().zip(v).map(|(x, a)| a * s[*x as usize]).sum();
            *o = self.sc[e] * sums[i] + self.dc * det;
        });
    }

    /// Absolute row sums (dual side) and column sums (primal side).
    fn abs_sums(&self) -> (Vec<f64>, Vec<f64>) {
        let (n, m) = self.dims();
        let (nv, nf, nl) = (self.nv, self.nf, self.nl);
        let mut rows = vec![0.0; m];
        let mut cols = vec![0.0; n];
        for e in 0..self.ne {
            let (c, v) = self.data.row(e);
            let i = self.data.slice[e];
            let rs: f64 = v.iter().sum::<f64>() * self.dc;
            rows[e] = self.sc[e] * nv as f64 + rs;
            for x in 0..nv {
                cols[i * nv + x] += self.sc[e];
            }
            for (x, a) in c.iter().zip(v) {
                cols[i * nv + *x as usize] += self.dc * a;
            }
        }
        for t in 0..nl {
            for f in 0..nf {
                rows[self.off_alpha() + t * nf + f] = 1.0;
                rows[self.off_gamma() + t * nf + f] = 1.0;
                cols[self.nu() + t * nf + f] = 3.0;
            }
            for x in 0..nv {
                rows[self.off_phi() + t * nv + x] = 2.0 + self.deg[x];
            }
        }
        for t in 0..self.nt {
            let layers = (t > 0) as usize as f64 + (t + 1 < self.nt) as usize as f64;
            for x in 0..nv {
                cols[t * nv + x] += layers * (1.0 + 0.25 * self.deg[x]);
            }
        }
        (rows, cols)
    }
}

impl LinearOp for PdhgOperator<'_> {
    fn dims(&self) -> (usize, usize) {
        (self.nu() + self.nl * self.nf, self.off_phi() + self.nl * self.nv)
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let (nv, nf) = (self.nv, self.nf);
        let (u, v) = x.split_at(self.nu());
        self.data_apply(u, &mut out[..self.ne]);
        let (oa, og, op) = (self.off_alpha(), self.off_gamma(), self.off_phi());
        for t in 0..self.nl {
            let a = &u[t * nv..(t + 1) * nv];
            let b = &u[(t + 1) * nv..(t + 2) * nv];
            for (f, face) in self.grid.faces.iter().enumerate() {
                let (lo, hi) = (face.lo as usize, face.hi as usize);
                out[oa + t * nf + f] = 0.25 * (a[lo] + a[hi] + b[lo] + b[hi]);
            }
            out[og + t * nf..og + (t + 1) * nf].copy_from_slice(&v[t * nf..(t + 1) * nf]);
            let r = &mut out[op + t * nv..op + (t + 1) * nv];
            for x in 0..nv {
                r[x] = b[x] - a[x];
            }
            add_divergence(self.grid, &v[t * nf..(t + 1) * nf], 1.0, r);
        }
    }

    fn adjoint(&self, y: &[f64], out: &mut [f64]) {
        let (nv, nf) = (self.nv, self.nf);
        out.iter_mut().for_each(|o| *o = 0.0);
        let (u, v) = out.split_at_mut(self.nu());
        let mut acc = vec![0.0; self.nt];
        for e in 0..self.ne {
            let i = self.data.slice[e];
            acc[i] += y[e] * self.sc[e];
            let (c, vals) = self.data.row(e);
            let s = &mut u[i * nv..(i + 1) * nv];
            for (x, a) in c.iter().zip(vals) {
                s[*x as usize] += y[e] * self.dc * a;
            }
        }
        for t in 0..self.nt {
            u[t * nv..(t + 1) * nv].iter_mut().for_each(|o| *o += acc[t]);
        }
        let (oa, og, op) = (self.off_alpha(), self.off_gamma(), self.off_phi());
        for t in 0..self.nl {
            for (f, face) in self.grid.faces.iter().enumerate() {
                let q = 0.25 * y[oa + t * nf + f];
                let (lo, hi) = (face.lo as usize, face.hi as usize);
                u[t * nv + lo] += q;
                u[t * nv + hi] += q;
                u[(t + 1) * nv + lo] += q;
                u[(t + 1) * nv + hi] += q;
            }
            let phi = &y[op + t * nv..op + (t + 1) * nv];
            for x in 0..nv {
                u[(t + 1) * nv + x] += phi[x];
                u[t * nv + x] -= phi[x];
            }
            let vt = &mut v[t * nf..(t + 1) * nf];
            for (o, g) in vt.iter_mut().zip(&y[og + t * nf..og + (t + 1) * nf]) {
                *o += g;
            }
            add_gradient(self.grid, phi, 1.0, vt);
        }
    }
}

struct Work {
    xt: Vec<f64>,
    xbar: Vec<f64>,
    yt: Vec<f64>,
    kxbar: Vec<f64>,
    kxt: Vec<f64>,
    ktyt: Vec<f64>,
}

impl Work {
    fn new(n: usize, m: usize) -> Self {
        Self { xt: vec![0.0; n], xbar: vec![0.0; n], yt: vec![0.0; m], kxbar: vec![0.0; m], kxt: vec![0.0; m], ktyt: vec![0.0; n] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSolverConfig {
    pub max_iters: usize,
    pub min_iters: usize,
    /// Relative primal and dual residual at termination.
    pub tol: f64,
    pub check_every: usize,
    /// Rebalance primal and dual step sizes from the residual ratio.
    pub adaptive: bool,
    /// Consecutive objective increases above the initial value that abort the run.
    pub divergence_window: usize,
    /// Over-relaxation factor in `(0, 2)`.
    pub relaxation: f64,
    /// Restart from the running average when its fixed-point residual has dropped enough.
    pub restarts: bool,
}

impl Default for GridSolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 20000,
            min_iters: 100,
            tol: 1e-6,
            check_every: 25,
            adaptive: true,
            divergence_window: 100,
            relaxation: 1.5,
            restarts: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryPoint {
    pub iter: usize,
    /// Objective without the continuity constraint.
    pub objective: f64,
    pub continuity_l1: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// `max(primal, dual)` relative residual, used as optimality certificate.
    pub gap_estimate: f64,
    /// Norm of the preconditioned operator at the initial step sizes, at most one.
    pub opnorm: f64,
    pub mass_scale: f64,
    /// Entries whose intensity vanishes identically and were left out.
    pub dropped_events: usize,
    pub objective_before_repair: f64,
    pub continuity_before_repair: ContinuityCheck,
    pub continuity: ContinuityCheck,
    pub repair_mass_change: f64,
    /// Increases of the monitored objective after the first quarter of the run.
    pub monotonicity_violations: usize,
    pub history: Vec<HistoryPoint>,
}

/// `(ρ, η)` made exactly feasible: negative and negligible masses clipped, fluxes on faces
/// without mass removed, each slice scaled piecewise to the mass of the
/// previous one on every connected piece, and the flux corrected by the
/// least-energy solution of the remaining continuity residual.
/// Returns the relative change of total mass.
pub fn repair_feasibility(grid: &VoxelGrid, m: &mut GridMeasure) -> f64 {
    let (nv, nf) = (grid.nv(), grid.nf());
    let before = m.total_mass();
    // masses far below the peak only make the flux solve ill conditioned
    let floor = 1e-10 * m.rho.iter().cloned().fold(0.0, f64::max);
    m.rho.iter_mut().for_each(|r| {
        if *r < floor {
            *r = 0.0
        }
    });
    let s = grid.h / grid.dt();
    for t in 0..grid.ntf() {
        let w = face_average(grid, m, t);
        let (label, nc) = components(nv, grid, &w);
        let mut a = vec![0.0; nc];
        let mut b = vec![0.0; nc];
        for x in 0..nv {
            a[label[x]] += m.rho[t * nv + x];
            b[label[x]] += m.rho[(t + 1) * nv + x];
        }
        for x in 0..nv {
            let c = label[x];
            let cur = m.rho[t * nv + x];
            let next = &mut m.rho[(t + 1) * nv + x];
            *next = if a[c] == 0.0 {
                0.0
            } else if b[c] == 0.0 {
                cur
            } else {
                *next * (a[c] / b[c])
            };
        }
        let w = face_average(grid, m, t);
        let eta = &mut m.eta[t * nf..(t + 1) * nf];
        for (e, wf) in eta.iter_mut().zip(&w) {
            if *wf <= 0.0 {
                *e = 0.0;
            }
        }
        let mut rhs: Vec<f64> = (0..nv).map(|x| s * (m.rho[t * nv + x] - m.rho[(t + 1) * nv + x])).collect();
        add_divergence(grid, eta, -1.0, &mut rhs);
        let d = weighted_flux(grid, &w, &rhs, 1e-14, 20 * nv);
        eta.iter_mut().zip(d).for_each(|(e, x)| *e += x);
        if log::log_enabled!(log::Level::Debug) {
            let wmin = w.iter().cloned().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
            let rn: f64 = rhs.iter().map(|v| v.abs()).sum();
            debug!("repair layer {t}: min weight {wmin:.3e}, rhs l1 {rn:.3e}");
        }
    }
    if before > 0.0 {
        (m.total_mass() - before).abs() / before
    } else {
        0.0
    }
}

/// Minimize the functional from a uniform start.
pub fn reconstruct_grid(
    grid: &VoxelGrid,
    data: &EventData,
    params: &ModelParams,
    cfg: &GridSolverConfig,
) -> Result<(GridMeasure, ObjectiveValue, GridDiagnostics)> {
    reconstruct_grid_from(grid, data, params, cfg, None)
}

fn validate(grid: &VoxelGrid, data: &EventData, p: &ModelParams, cfg: &GridSolverConfig) -> Result<()> {
    for (name, v) in [("q", p.q), ("beta", p.beta), ("p_s", p.p_s), ("p_d", p.p_d)] {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(Error::Parameter(format!("{name} must be finite and nonnegative, got {v}")));
        }
    }
    if p.p_s + p.p_d > 1.0 + 1e-12 {
        return Err(Error::Parameter("p_s + p_d must not exceed 1".into()));
    }
    if !(cfg.tol > 0.0) || cfg.check_every == 0 {
        return Err(Error::Parameter("solver tolerance and check interval must be positive".into()));
    }
    if data.nv != grid.nv() || data.nt != grid.nt() {
        return Err(Error::Shape("event data built for a different grid".into()));
    }
    if data.vals.iter().chain(&data.scatter).chain(&data.weight).any(|v| !v.is_finite()) {
        return Err(Error::Parameter("non-finite event data".into()));
    }
    Ok(())
}

/// As [`reconstruct_grid`], optionally warm-started from `init`.
pub fn reconstruct_grid_from(
    grid: &VoxelGrid,
    data: &EventData,
    params: &ModelParams,
    cfg: &GridSolverConfig,
    init: Option<&GridMeasure>,
) -> Result<(GridMeasure, ObjectiveValue, GridDiagnostics)> {
    validate(grid, data, params, cfg)?;
    let p = params;
    // entries that no measure can explain
    let keep: Vec<bool> = (0..data.len())
        .map(|e| p.q * p.p_s * data.scatter[e] > 0.0 || (p.p_d > 0.0 && data.row(e).1.iter().any(|v| *v > 0.0)))
        .collect();
    let dropped = keep.iter().filter(|k| !**k).count();
    let active = data.subset(&keep);
    let (nv, nf, nt, nl) = (grid.nv(), grid.nf(), grid.nt(), grid.ntf());
    let c = (p.p_s + p.p_d) / data.t_half;
    let n_events = active.total_weight();
    let mut diag = GridDiagnostics {
        iterations: 0,
        converged: true,
        primal_residual: 0.0,
        dual_residual: 0.0,
        gap_estimate: 0.0,
        opnorm: 0.0,
        mass_scale: 0.0,
        dropped_events: dropped,
        objective_before_repair: 0.0,
        continuity_before_repair: ContinuityCheck::default(),
        continuity: ContinuityCheck::default(),
        repair_mass_change: 0.0,
        monotonicity_violations: 0,
        history: Vec::new(),
    };
    if n_events == 0.0 || c == 0.0 {
        let m = GridMeasure::zeros(grid);
        let j = evaluate_j(grid, &m, data, p);
        return Ok((m, j, diag));
    }

    let total0 = n_events / c;
    let s = total0 / (nv * nt) as f64;
    diag.mass_scale = s;
    let op = PdhgOperator::new(grid, &active, p);
    let (n, m_dual) = op.dims();
    let nu = nt * nv;
    let (rows, cols) = op.abs_sums();
    let mut tau: Vec<f64> = cols.iter().map(|v| 1.0 / v.max(1e-12)).collect();
    let mut sigma: Vec<f64> = rows.iter().map(|v| 1.0 / v.max(1e-12)).collect();
    diag.opnorm = estimate_opnorm_with(&Scaled { op: &op, left: sigma.clone(), right: tau.clone() }, 1e-4, 200);
    debug!("preconditioned operator norm {:.6}", diag.opnorm);

    let hdt = grid.h / grid.dt();
    let lw = layer_weights(nt);
    let k_layer: Vec<f64> = lw.iter().map(|w| s * p.beta * w * hdt * hdt).collect();
    let mass_cost = c * s;

    let mut x = vec![0.0; n];
    match init {
        Some(m0) => {
            m0.check_shape(grid)?;
            for (xi, r) in x[..nu].iter_mut().zip(&m0.rho) {
                *xi = r.max(0.0) / s;
            }
            for (xi, e) in x[nu..].iter_mut().zip(&m0.eta) {
                *xi = e / (s * hdt);
            }
        }
        None => x[..nu].iter_mut().for_each(|v| *v = 1.0),
    }
    let weights = active.weight.clone();
    let ne = active.len();
    let (oa, og, oph) = (op.off_alpha(), op.off_gamma(), op.off_phi());
    let objective = |x: &[f64], kx: &[f64]| -> f64 {
        let fid = mass_cost * x[..nu].iter().sum::<f64>();
        let mut nl_term = 0.0;
        for e in 0..ne {
            let v = s * kx[e];
            if v <= 0.0 {
                return f64::INFINITY;
            }
            nl_term -= weights[e] * v.ln();
        }
        let mut bb = 0.0;
        for t in 0..nl {
            if k_layer[t] == 0.0 {
                continue;
            }
            for f in 0..nf {
                let vv = x[nu + t * nf + f];
                if vv != 0.0 {
                    let ub = kx[oa + t * nf + f];
                    if ub <= 0.0 {
                        return f64::INFINITY;
                    }
                    bb += k_layer[t] * vv * vv / ub;
                }
            }
        }
        fid + nl_term + bb
    };
    let cont_l1 = |kx: &[f64]| -> f64 { s * kx[oph..].iter().map(|v| v.abs()).sum::<f64>() };

    let mut w = Work::new(n, m_dual);
    // one primal-dual step from (x, y), given Kx and Kᵀy
    let step = |x: &[f64], y: &[f64], kx: &[f64], kty: &[f64], tau: &[f64], sigma: &[f64], w: &mut Work| {
        for j in 0..n {
            let g = kty[j] + if j < nu { mass_cost } else { 0.0 };
            let v = x[j] - tau[j] * g;
            w.xt[j] = if j < nu { v.max(0.0) } else { v };
            w.xbar[j] = 2.0 * w.xt[j] - x[j];
        }
        op.apply(&w.xbar, &mut w.kxbar);
        for i in 0..m_dual {
            w.yt[i] = y[i] + sigma[i] * w.kxbar[i];
            w.kxt[i] = 0.5 * (w.kxbar[i] + kx[i]);
        }
        for e in 0..ne {
            w.yt[e] = dual_neglog(w.yt[e], sigma[e], weights[e]);
        }
        for t in 0..nl {
            for f in 0..nf {
                let ia = oa + t * nf + f;
                let ig = og + t * nf + f;
                let (a, g) = project_parabola(w.yt[ia], w.yt[ig], k_layer[t]);
                w.yt[ia] = a;
                w.yt[ig] = g;
            }
        }
        op.adjoint(&w.yt, &mut w.ktyt);
    };
    // primal and dual residuals of a step, relative
    let residuals = |x: &[f64], y: &[f64], kx: &[f64], kty: &[f64], tau: &[f64], sigma: &[f64], w: &Work| -> (f64, f64, f64) {
        let mut pr = 0.0;
        let mut fp = 0.0;
        for j in 0..n {
            let dx = x[j] - w.xt[j];
            let v = dx / tau[j] - (kty[j] - w.ktyt[j]);
            pr += v * v;
            fp += dx * dx / tau[j];
        }
        let mut dr = 0.0;
        for i in 0..m_dual {
            let dy = y[i] - w.yt[i];
            let v = dy / sigma[i] - (kx[i] - w.kxt[i]);
            dr += v * v;
            fp += dy * dy / sigma[i];
        }
        let cnorm = mass_cost * (nu as f64).sqrt();
        (pr.sqrt() / norm(&w.ktyt).max(cnorm).max(1e-300), dr.sqrt() / norm(&w.kxt).max(1e-300), fp.sqrt())
    };

    let mut y = vec![0.0; m_dual];
    let mut kx = vec![0.0; m_dual];
    let mut kty = vec![0.0; n];
    op.apply(&x, &mut kx);
    let mut sum_x = vec![0.0; n];
    let mut sum_y = vec![0.0; m_dual];
    let mut n_sum = 0usize;
    let mut avg = Work::new(n, m_dual);
    let mut kx_avg = vec![0.0; m_dual];
    let mut kty_avg = vec![0.0; n];
    let mut err_restart: Option<f64> = None;
    let mut last_candidate = f64::INFINITY;
    let mut since_restart = 0usize;
    let relax = cfg.relaxation;

    let j_init = objective(&x, &kx);
    let mut prev = j_init;
    let mut rising = 0usize;
    let mut adapt = 0.5;
    let mut converged = false;
    let mut it = 0;
    let mut last_check: Option<HistoryPoint> = None;
    let mut out_x = x.clone();
    while it < cfg.max_iters {
        it += 1;
        since_restart += 1;
        let check = it % cfg.check_every == 0 || it == cfg.max_iters;
        if check {
            op.apply(&x, &mut kx);
        }
        step(&x, &y, &kx, &kty, &tau, &sigma, &mut w);
        if check {
            op.apply(&w.xt, &mut w.kxt);
        }
        if w.xt.iter().any(|v| !v.is_finite()) || w.yt.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite iterate at iteration {it}")));
        }
        let j_now = objective(&w.xt, &w.kxt);
        if j_now > prev && j_now > j_init {
            rising += 1;
            if rising >= cfg.divergence_window {
                return Err(Error::Numeric(format!(
                    "objective increased for {rising} consecutive iterations (iteration {it}, value {j_now:.6e}, start {j_init:.6e}, continuity L1 {:.3e})",
                    cont_l1(&w.kxt)
                )));
            }
        } else {
            rising = 0;
        }
        if j_now > prev && it > cfg.max_iters / 4 {
            diag.monotonicity_violations += 1;
        }
        prev = j_now;

        let mut restart_to: Option<bool> = None;
        if check {
            let (pr, dr, err_cur) = residuals(&x, &y, &kx, &kty, &tau, &sigma, &w);
            let (mut pr_c, mut dr_c, mut err_c, mut use_avg) = (pr, dr, err_cur, false);
            if cfg.restarts && n_sum > 0 {
                for j in 0..n {
                    avg.xbar[j] = sum_x[j] / n_sum as f64;
                }
                for i in 0..m_dual {
                    avg.yt[i] = sum_y[i] / n_sum as f64;
                }
                op.apply(&avg.xbar, &mut kx_avg);
                op.adjoint(&avg.yt, &mut kty_avg);
                let xa = avg.xbar.clone();
                let ya = avg.yt.clone();
                step(&xa, &ya, &kx_avg, &kty_avg, &tau, &sigma, &mut avg);
                op.apply(&avg.xt, &mut avg.kxt);
                let (pa, da, ea) = residuals(&xa, &ya, &kx_avg, &kty_avg, &tau, &sigma, &avg);
                avg.xbar.copy_from_slice(&xa);
                if ea < err_cur {
                    pr_c = pa;
                    dr_c = da;
                    err_c = ea;
                    use_avg = true;
                }
                avg.kxbar.copy_from_slice(&ya);
            }
            let hp = HistoryPoint { iter: it, objective: j_now, continuity_l1: cont_l1(&w.kxt), primal_residual: pr_c, dual_residual: dr_c };
            diag.history.push(hp.clone());
            last_check = Some(hp);
            if it >= cfg.min_iters && pr_c.max(dr_c) <= cfg.tol {
                converged = true;
                out_x.copy_from_slice(if use_avg { &avg.xt } else { &w.xt });
            }
            if cfg.restarts && !converged {
                let base = *err_restart.get_or_insert(err_c);
                if err_c <= 0.2 * base || (err_c <= 0.8 * base && err_c > last_candidate) || since_restart as f64 >= 0.36 * it as f64 {
                    restart_to = Some(use_avg);
                    err_restart = Some(err_c);
                }
                last_candidate = err_c;
            }
            if cfg.adaptive && !converged {
                let ratio = pr_c / dr_c.max(1e-300);
                if ratio > 2.0 {
                    tau.iter_mut().for_each(|t| *t /= 1.0 - adapt);
                    sigma.iter_mut().for_each(|t| *t *= 1.0 - adapt);
                    adapt *= 0.95;
                } else if ratio < 0.5 {
                    tau.iter_mut().for_each(|t| *t *= 1.0 - adapt);
                    sigma.iter_mut().for_each(|t| *t /= 1.0 - adapt);
                    adapt *= 0.95;
                }
            }
        }
        if converged {
            break;
        }
        match restart_to {
            Some(true) => {
                x.copy_from_slice(&avg.xbar);
                y.copy_from_slice(&avg.kxbar);
                kx.copy_from_slice(&kx_avg);
                kty.copy_from_slice(&kty_avg);
            }
            Some(false) => {}
            None => {
                for j in 0..n {
                    x[j] += relax * (w.xt[j] - x[j]);
                    kty[j] += relax * (w.ktyt[j] - kty[j]);
                }
                for i in 0..m_dual {
                    y[i] += relax * (w.yt[i] - y[i]);
                    kx[i] += relax * (w.kxt[i] - kx[i]);
                }
            }
        }
        if restart_to.is_some() {
            sum_x.iter_mut().for_each(|v| *v = 0.0);
            sum_y.iter_mut().for_each(|v| *v = 0.0);
            n_sum = 0;
            since_restart = 0;
            last_candidate = f64::INFINITY;
        } else {
            for j in 0..n {
                sum_x[j] += x[j];
            }
            for i in 0..m_dual {
                sum_y[i] += y[i];
            }
            n_sum += 1;
        }
        out_x.copy_from_slice(&w.xt);
    }
    let x = out_x;
    diag.iterations = it;
    diag.converged = converged;
    if let Some(h) = last_check {
        diag.primal_residual = h.primal_residual;
        diag.dual_residual = h.dual_residual;
        diag.gap_estimate = h.primal_residual.max(h.dual_residual);
    }
    diag.objective_before_repair = prev;
    info!(
        "grid solver: {} iterations, residuals {:.2e}/{:.2e}, converged {}",
        it, diag.primal_residual, diag.dual_residual, converged
    );

    let mut m = GridMeasure::zeros(grid);
    for (r, u) in m.rho.iter_mut().zip(&x[..nu]) {
        *r = s * u;
    }
    for (e, v) in m.eta.iter_mut().zip(&x[nu..]) {
        *e = s * hdt * v;
    }
    diag.continuity_before_repair = check_continuity(grid, &m);
    diag.repair_mass_change = repair_feasibility(grid, &mut m);
    diag.continuity = check_continuity(grid, &m);
    let j = evaluate_j(grid, &m, data, p);
    Ok((m, j, diag))
}
