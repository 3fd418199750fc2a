//! Discrete continuity equation and Benamou–Brenier energy on the staggered
//! grid, plus the weighted-Laplacian flux solve shared by the ground-truth
//! builder and the solver's feasibility repair.
//!
//! Residual of layer `t`: `ρ[t+1] - ρ[t] + (ΔT/h)·div η[t]`, where a positive
//! face flux moves mass from `lo` to `hi`. Energy of layer `t` is
//! `w_t Σ_f η_f² / ρ̄_f` with `ρ̄_f` the mean of the two voxels of `f` in
//! both slices. The end layers carry the extra half bins, `w = 1 + ½ + ...`,
//! so a particle at constant velocity gets exactly `m v² T`.

use serde::{Deserialize, Serialize};

use crate::forward::grid::{GridMeasure, VoxelGrid};

pub fn layer_weights(nt: usize) -> Vec<f64> {
    let nl = nt.saturating_sub(1);
    (0..nl)
        .map(|t| 1.0 + if t == 0 { 0.5 } else { 0.0 } + if t + 1 == nl { 0.5 } else { 0.0 })
        .collect()
}

/// Add the outflow minus inflow of `eta_layer` to `out`.
pub fn add_divergence(grid: &VoxelGrid, eta_layer: &[f64], scale: f64, out: &mut [f64]) {
    for (f, e) in grid.faces.iter().zip(eta_layer) {
        out[f.lo as usize] += scale * e;
        out[f.hi as usize] -= scale * e;
    }
}

/// Adjoint of [`add_divergence`]: `φ[lo] - φ[hi]` per face.
pub fn add_gradient(grid: &VoxelGrid, phi: &[f64], scale: f64, out: &mut [f64]) {
    for (o, f) in out.iter_mut().zip(&grid.faces) {
        *o += scale * (phi[f.lo as usize] - phi[f.hi as usize]);
    }
}

pub fn face_average(grid: &VoxelGrid, m: &GridMeasure, t: usize) -> Vec<f64> {
    let a = m.slice(t);
    let b = m.slice(t + 1);
    grid.faces
        .iter()
        .map(|f| 0.25 * (a[f.lo as usize] + a[f.hi as usize] + b[f.lo as usize] + b[f.hi as usize]))
        .collect()
}

/// Residual field, `(nt-1)·nv` values.
pub fn continuity_residual(grid: &VoxelGrid, m: &GridMeasure) -> Vec<f64> {
    let nv = grid.nv();
    let s = grid.dt() / grid.h;
    let mut r = vec![0.0; grid.ntf() * nv];
    for t in 0..grid.ntf() {
        let out = &mut r[t * nv..(t + 1) * nv];
        for (x, o) in out.iter_mut().enumerate() {
            *o = m.rho[(t + 1) * nv + x] - m.rho[t * nv + x];
        }
        add_divergence(grid, m.flux(t), s, out);
    }
    r
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContinuityCheck {
    pub max: f64,
    pub l1: f64,
}

pub fn check_continuity(grid: &VoxelGrid, m: &GridMeasure) -> ContinuityCheck {
    let r = continuity_residual(grid, m);
    ContinuityCheck {
        max: r.iter().fold(0.0, |a, v| a.max(v.abs())),
        l1: r.iter().map(|v| v.abs()).sum(),
    }
}

/// `η²/ρ̄` with `0/0 = 0` and `c/0 = ∞`.
#[inline]
pub fn perspective(eta: f64, rho_bar: f64) -> f64 {
    if eta == 0.0 {
        0.0
    } else if rho_bar <= 0.0 {
        f64::INFINITY
    } else {
        eta * eta / rho_bar
    }
}

pub fn benamou_brenier(grid: &VoxelGrid, m: &GridMeasure) -> f64 {
    let w = layer_weights(grid.nt());
    let mut s = 0.0;
    for t in 0..grid.ntf() {
        let bar = face_average(grid, m, t);
        let layer: f64 = m.flux(t).iter().zip(&bar).map(|(e, b)| perspective(*e, *b)).sum();
        s += w[t] * layer;
    }
    s
}

/// Connected components of the graph of faces with positive weight.
/// Returns the component label of every voxel.
pub fn components(nv: usize, grid: &VoxelGrid, weights: &[f64]) -> (Vec<usize>, usize) {
    let mut parent: Vec<usize> = (0..nv).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (f, w) in grid.faces.iter().zip(weights) {
        if *w > 0.0 {
            let a = find(&mut parent, f.lo as usize);
            let b = find(&mut parent, f.hi as usize);
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut label = vec![usize::MAX; nv];
    let mut n = 0;
    let mut root_label = vec![usize::MAX; nv];
    for x in 0..nv {
        let r = find(&mut parent, x);
        if root_label[r] == usize::MAX {
            root_label[r] = n;
            n += 1;
        }
        label[x] = root_label[r];
    }
    (label, n)
}

/// Solve `div(W grad φ) = rhs` for a face flux `η = W·grad φ` with
/// `div η = rhs` on every component of the positive-weight graph. The right
/// hand side must sum to zero on each component; the mean is projected out.
/// Jacobi-preconditioned CG with iterative refinement.
pub fn weighted_flux(grid: &VoxelGrid, weights: &[f64], rhs: &[f64], tol: f64, max_iter: usize) -> Vec<f64> {
    let nv = grid.nv();
    let (label, nc) = components(nv, grid, weights);
    let mut b = rhs.to_vec();
    let mut sum = vec![0.0; nc];
    let mut cnt = vec![0usize; nc];
    for x in 0..nv {
        sum[label[x]] += b[x];
        cnt[label[x]] += 1;
    }
    for x in 0..nv {
        b[x] -= sum[label[x]] / cnt[label[x]] as f64;
    }
    let mut diag = vec![0.0; nv];
    for (f, w) in grid.faces.iter().zip(weights) {
        if *w > 0.0 {
            diag[f.lo as usize] += w;
            diag[f.hi as usize] += w;
        }
    }
    let apply = |phi: &[f64], out: &mut [f64]| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (f, w) in grid.faces.iter().zip(weights) {
            if *w > 0.0 {
                let g = w * (phi[f.lo as usize] - phi[f.hi as usize]);
                out[f.lo as usize] += g;
                out[f.hi as usize] -= g;
            }
        }
    };
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut phi = vec![0.0; nv];
    if bnorm == 0.0 {
        return vec![0.0; grid.nf()];
    }
    // rounding leaks into the constant null space of each component
    let deflate = |r: &mut [f64]| {
        let mut sum = vec![0.0; nc];
        for x in 0..nv {
            if diag[x] > 0.0 {
                sum[label[x]] += r[x];
            } else {
                r[x] = 0.0;
            }
        }
        for x in 0..nv {
            if diag[x] > 0.0 {
                r[x] -= sum[label[x]] / cnt[label[x]] as f64;
            }
        }
    };
    let mut ap = vec![0.0; nv];
    let mut best = f64::INFINITY;
    for _refine in 0..4 {
        apply(&phi, &mut ap);
        let mut r: Vec<f64> = b.iter().zip(&ap).map(|(x, y)| x - y).collect();
        deflate(&mut r);
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        log::trace!("flux solve residual {:.3e} of {:.3e}", rn, bnorm);
        if rn <= tol * bnorm || rn >= 0.5 * best {
            break;
        }
        best = rn;
        let mut dphi = vec![0.0; nv];
        let mut z: Vec<f64> = r.iter().zip(&diag).map(|(v, d)| if *d > 0.0 { v / d } else { 0.0 }).collect();
        let mut p = z.clone();
        let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        for _ in 0..max_iter {
            apply(&p, &mut ap);
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if !(pap > 0.0) {
                break;
            }
            let alpha = rz / pap;
            for x in 0..nv {
                dphi[x] += alpha * p[x];
                r[x] -= alpha * ap[x];
            }
            deflate(&mut r);
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn <= tol * bnorm {
                break;
            }
            for x in 0..nv {
                z[x] = if diag[x] > 0.0 { r[x] / diag[x] } else { 0.0 };
            }
            let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
            if !(rz_new > 0.0) {
                break;
            }
            let beta = rz_new / rz;
            rz = rz_new;
            for x in 0..nv {
                p[x] = z[x] + beta * p[x];
            }
        }
        for x in 0..nv {
            phi[x] += dphi[x];
        }
    }
    grid.faces
        .iter()
        .zip(weights)
        .map(|(f, w)| if *w > 0.0 { w * (phi[f.lo as usize] - phi[f.hi as usize]) } else { 0.0 })
        .collect()
}

/// Fill `m.eta` with the flux of least energy transporting each slice into
/// the next, with face weights `ρ̄`. Where `ρ̄` splits the grid into pieces
/// that do not balance mass on their own, a small uniform floor is added to
/// the weights. Slice masses must agree.
pub fn fill_min_energy_flux(grid: &VoxelGrid, m: &mut GridMeasure) {
    let nv = grid.nv();
    let nf = grid.nf();
    let s = grid.h / grid.dt();
    for t in 0..grid.ntf() {
        let mut w = face_average(grid, m, t);
        // need (ΔT/h) div η = ρ[t] - ρ[t+1]
        let rhs: Vec<f64> = (0..nv).map(|x| s * (m.rho[t * nv + x] - m.rho[(t + 1) * nv + x])).collect();
        let (label, nc) = components(nv, grid, &w);
        let mut imbalance = vec![0.0; nc];
        for x in 0..nv {
            imbalance[label[x]] += rhs[x];
        }
        let scale: f64 = rhs.iter().map(|v| v.abs()).sum();
        if imbalance.iter().any(|v| v.abs() > 1e-12 * scale) {
            let floor = 1e-6 * w.iter().cloned().fold(0.0, f64::max);
            w.iter_mut().for_each(|v| *v += floor);
        }
        let eta = weighted_flux(grid, &w, &rhs, 1e-14, 20 * nv);
        m.eta[t * nf..(t + 1) * nf].copy_from_slice(&eta);
    }
}
