//! The reconstruction functional on grid measures and on particle sets.
//!
//! ```text
//! J(ρ, η) = (p_s + p_d)‖ρ‖/T_half − Σ_e w_e log λ_e(ρ) + β S(ρ, η)
//! ```
//!
//! and `+∞` unless `ρ ≥ 0` and the continuity equation holds.

use serde::{Deserialize, Serialize};

use crate::forward::events::EventData;
use crate::forward::grid::{GridMeasure, VoxelGrid};
use crate::listmode::Particle;
use crate::transport::{benamou_brenier, check_continuity, layer_weights};

pub use crate::transport::{benamou_brenier as bb_energy, check_continuity as continuity, ContinuityCheck};

/// Continuity residual (L1) below `CONTINUITY_TOL·‖ρ‖` counts as feasible.
pub const CONTINUITY_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub q: f64,
    pub beta: f64,
    pub p_s: f64,
    pub p_d: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub fidelity_mass: f64,
    pub neg_log: f64,
    pub bb: f64,
    pub feasible: bool,
}

impl ObjectiveValue {
    fn from_parts(fidelity_mass: f64, neg_log: f64, bb: f64, feasible: bool) -> Self {
        let total = if feasible { fidelity_mass + neg_log + bb } else { f64::INFINITY };
        Self { total, fidelity_mass, neg_log, bb, feasible: feasible && total.is_finite() }
    }
}

/// `−Σ w log x` with `−log 0 = +∞`.
fn neg_log_sum(w: &[f64], x: impl Iterator<Item = f64>) -> f64 {
    let mut s = 0.0;
    for (w, v) in w.iter().zip(x) {
        if v <= 0.0 {
            return f64::INFINITY;
        }
        s -= w * v.ln();
    }
    s
}

pub fn is_feasible(grid: &VoxelGrid, m: &GridMeasure) -> bool {
    if m.check_shape(grid).is_err() || m.rho.iter().chain(&m.eta).any(|v| !v.is_finite()) || m.min_rho() < 0.0 {
        return false;
    }
    check_continuity(grid, m).l1 <= CONTINUITY_TOL * m.total_mass().max(f64::MIN_POSITIVE)
}

pub fn evaluate_j(grid: &VoxelGrid, m: &GridMeasure, data: &EventData, p: &ModelParams) -> ObjectiveValue {
    let feasible = is_feasible(grid, m);
    let fid = (p.p_s + p.p_d) * m.total_mass() / data.t_half;
    let nl = neg_log_sum(&data.weight, (0..data.len()).map(|e| data.intensity(e, m, p.q, p.p_s, p.p_d)));
    let bb = if p.beta == 0.0 { 0.0 } else { p.beta * benamou_brenier(grid, m) };
    ObjectiveValue::from_parts(fid, nl, bb, feasible)
}

/// Scatter and detection densities `(q p_s A^s ρ, p_d A^d ρ)/T_half` per entry.
pub fn split_densities(m: &GridMeasure, data: &EventData, p: &ModelParams) -> Vec<(f64, f64)> {
    (0..data.len())
        .map(|e| {
            (
                p.q * p.p_s * data.scatter_part(e, m) / data.t_half,
                p.p_d * data.detection(e, m) / data.t_half,
            )
        })
        .collect()
}

/// Max form: `−Σ w log max{q p_s A^s ρ, p_d A^d ρ}` in place of the sum.
pub fn evaluate_j_max(grid: &VoxelGrid, m: &GridMeasure, data: &EventData, p: &ModelParams) -> ObjectiveValue {
    let feasible = is_feasible(grid, m);
    let fid = (p.p_s + p.p_d) * m.total_mass() / data.t_half;
    let nl = neg_log_sum(&data.weight, split_densities(m, data, p).into_iter().map(|(s, d)| s.max(d)));
    let bb = if p.beta == 0.0 { 0.0 } else { p.beta * benamou_brenier(grid, m) };
    ObjectiveValue::from_parts(fid, nl, bb, feasible)
}

/// Objective with an explicit scatter assignment: entries with
/// `scattered[e]` are explained by `p_s A^s ρ`, the others by `p_d A^d ρ`.
/// `q` is ignored.
pub fn evaluate_j_split(grid: &VoxelGrid, m: &GridMeasure, data: &EventData, p: &ModelParams, scattered: &[bool]) -> ObjectiveValue {
    let feasible = is_feasible(grid, m);
    let fid = (p.p_s + p.p_d) * m.total_mass() / data.t_half;
    let unit = ModelParams { q: 1.0, ..*p };
    let nl = neg_log_sum(
        &data.weight,
        split_densities(m, data, &unit).into_iter().zip(scattered).map(|((s, d), sc)| if *sc { s } else { d }),
    );
    let bb = if p.beta == 0.0 { 0.0 } else { p.beta * benamou_brenier(grid, m) };
    ObjectiveValue::from_parts(fid, nl, bb, feasible)
}

/// `Σ_seg w_seg |Δγ|² / ΔT` for knots at bin centers, the end segments
/// extended over the half bins at the ends.
pub fn kinetic_energy(knots: &[crate::geometry::Point], dt: f64) -> f64 {
    let w = layer_weights(knots.len());
    knots.windows(2).zip(&w).map(|(k, w)| w * (k[1] - k[0]).norm_squared() / dt).sum()
}

/// Objective of a set of travelling point masses. Data rows are evaluated
/// at the exact knot positions; the particle solver uses the same terms.
pub fn evaluate_particle_j(particles: &[Particle], data: &EventData, p: &ModelParams) -> ObjectiveValue {
    let dt = data.geom.dt();
    let t_end = data.geom.t_end;
    let total: f64 = particles.iter().map(|x| x.mass).sum();
    let fid = (p.p_s + p.p_d) * total * t_end / data.t_half;
    let mut det = vec![0.0; data.len()];
    for part in particles {
        for (t, evs) in data.by_slice.iter().enumerate() {
            if evs.is_empty() {
                continue;
            }
            let rows = data.rows_at(&part.knots[t], evs);
            for (e, r) in evs.iter().zip(rows) {
                det[*e] += part.mass * dt * r;
            }
        }
    }
    let slice_mass = total * dt;
    let dens = (0..data.len()).map(|e| (p.q * p.p_s * data.scatter[e] * slice_mass + p.p_d * det[e]) / data.t_half);
    let nl = neg_log_sum(&data.weight, dens);
    let ke: f64 = particles.iter().map(|x| x.mass * kinetic_energy(&x.knots, dt)).sum();
    let bb = if p.beta == 0.0 { 0.0 } else { p.beta * ke };
    ObjectiveValue::from_parts(fid, nl, bb, true)
}
