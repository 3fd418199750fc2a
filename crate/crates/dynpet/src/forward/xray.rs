//! X-ray transform `Pf(θ, s) = ∫ f(s + rθ) dr` of a voxelized density,
//! traced with exact per-voxel intersection lengths.

use crate::geometry::Point;

/// Axis-aligned box of `n[k]` voxels of side `h` starting at `origin`.
#[derive(Clone, Debug)]
pub struct BoxGrid {
    pub dim: usize,
    pub n: [usize; 3],
    pub origin: Point,
    pub h: f64,
}

impl BoxGrid {
    pub fn len(&self) -> usize {
        self.n[..self.dim].iter().product()
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn center(&self, idx: [usize; 3]) -> Point {
        let mut p = self.origin;
        for k in 0..self.dim {
            p[k] += (idx[k] as f64 + 0.5) * self.h;
        }
        p
    }
    fn linear(&self, idx: [usize; 3]) -> usize {
        let mut lin = 0;
        for k in (0..self.dim).rev() {
            lin = lin * self.n[k] + idx[k];
        }
        lin
    }
}

/// Visit every voxel crossed by the line `s + rθ` with its chord length.
pub fn trace<F: FnMut(usize, f64)>(grid: &BoxGrid, theta: &Point, s: &Point, mut visit: F) {
    let dim = grid.dim;
    let mut r_lo = f64::NEG_INFINITY;
    let mut r_hi = f64::INFINITY;
    for k in 0..dim {
        let lo = grid.origin[k];
        let hi = lo + grid.n[k] as f64 * grid.h;
        if theta[k].abs() < 1e-300 {
            if s[k] < lo || s[k] > hi {
                return;
            }
        } else {
            let a = (lo - s[k]) / theta[k];
            let b = (hi - s[k]) / theta[k];
            r_lo = r_lo.max(a.min(b));
            r_hi = r_hi.min(a.max(b));
        }
    }
    if !(r_hi > r_lo) {
        return;
    }
    let mut cuts = vec![r_lo, r_hi];
    for k in 0..dim {
        if theta[k].abs() < 1e-300 {
            continue;
        }
        for i in 1..grid.n[k] {
            let plane = grid.origin[k] + i as f64 * grid.h;
            let r = (plane - s[k]) / theta[k];
            if r > r_lo && r < r_hi {
                cuts.push(r);
            }
        }
    }
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for w in cuts.windows(2) {
        let len = w[1] - w[0];
        if len <= 0.0 {
            continue;
        }
        let mid = 0.5 * (w[0] + w[1]);
        let mut idx = [0usize; 3];
        let mut inside = true;
        for k in 0..dim {
            let f = ((s[k] + mid * theta[k]) - grid.origin[k]) / grid.h;
            if f < 0.0 || f >= grid.n[k] as f64 {
                inside = false;
                break;
            }
            idx[k] = f as usize;
        }
        if inside {
            visit(grid.linear(idx), len);
        }
    }
}

/// Line integral of the voxel density `f` (value per unit volume).
/// The direction is canonicalized first, so `±θ` give bitwise equal values.
pub fn xray_transform(grid: &BoxGrid, f: &[f64], theta: &Point, s: &Point) -> f64 {
    let lead = (0..grid.dim).map(|k| theta[k]).find(|c| *c != 0.0).unwrap_or(0.0);
    let th = if lead < 0.0 { -theta } else { *theta };
    let mut acc = 0.0;
    trace(grid, &th, s, |i, len| acc += f[i] * len);
    acc
}
