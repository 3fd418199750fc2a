//! Staggered spacetime grid. `rho[t, x]` is the spacetime mass of voxel `x`
//! during time bin `t` (so a static particle of mass `m` puts `m·ΔT` into
//! each slice); `eta[t, f]` is the flux through face `f` between the bin
//! centers `t` and `t+1`, integrated over that time step.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, ScannerGeometry};

/// Interior face between two active voxels, `lo` and `hi` along `axis`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Face {
    pub lo: u32,
    pub hi: u32,
    pub axis: u8,
}

#[derive(Clone, Debug)]
pub struct VoxelGrid {
    pub geom: ScannerGeometry,
    pub nx: usize,
    pub h: f64,
    /// Lower corner of the bounding box of `D`.
    pub origin: Point,
    /// Full-grid linear index of every active voxel (center inside `D`).
    pub active: Vec<usize>,
    /// Active index of each full-grid voxel, `u32::MAX` when inactive.
    pub lookup: Vec<u32>,
    pub centers: Vec<Point>,
    pub faces: Vec<Face>,
}

impl VoxelGrid {
    pub fn new(geom: &ScannerGeometry, nx: usize) -> Result<Self> {
        if nx < 2 {
            return Err(Error::Parameter(format!("need nx >= 2, got {nx}")));
        }
        let dim = geom.dim;
        let h = 2.0 * geom.radius_d / nx as f64;
        let c = geom.center();
        let mut origin = c;
        for k in 0..dim {
            origin[k] -= geom.radius_d;
        }
        let total = nx.pow(dim as u32);
        let mut active = Vec::new();
        let mut lookup = vec![u32::MAX; total];
        let mut centers = Vec::new();
        for lin in 0..total {
            let idx = unravel(lin, nx, dim);
            let mut p = origin;
            for k in 0..dim {
                p[k] += (idx[k] as f64 + 0.5) * h;
            }
            if (p - c).norm() <= geom.radius_d {
                lookup[lin] = active.len() as u32;
                active.push(lin);
                centers.push(p);
            }
        }
        let mut faces = Vec::new();
        for (ai, &lin) in active.iter().enumerate() {
            let idx = unravel(lin, nx, dim);
            for axis in 0..dim {
                if idx[axis] + 1 < nx {
                    let mut n = idx;
                    n[axis] += 1;
                    let other = lookup[ravel(&n, nx, dim)];
                    if other != u32::MAX {
                        faces.push(Face { lo: ai as u32, hi: other, axis: axis as u8 });
                    }
                }
            }
        }
        Ok(Self { geom: geom.clone(), nx, h, origin, active, lookup, centers, faces })
    }

    pub fn dim(&self) -> usize {
        self.geom.dim
    }
    pub fn nv(&self) -> usize {
        self.active.len()
    }
    pub fn nf(&self) -> usize {
        self.faces.len()
    }
    pub fn nt(&self) -> usize {
        self.geom.n_bins
    }
    pub fn dt(&self) -> f64 {
        self.geom.dt()
    }
    /// Number of flux layers.
    pub fn ntf(&self) -> usize {
        self.nt().saturating_sub(1)
    }

    /// Active voxel whose cell contains `p`, if any.
    pub fn voxel_of(&self, p: &Point) -> Option<usize> {
        let mut idx = [0usize; 3];
        for k in 0..self.dim() {
            let f = (p[k] - self.origin[k]) / self.h;
            if f < 0.0 || f >= self.nx as f64 {
                return None;
            }
            idx[k] = f as usize;
        }
        let a = self.lookup[ravel(&idx, self.nx, self.dim())];
        (a != u32::MAX).then_some(a as usize)
    }

    /// Active voxel nearest to `p` among all active centers.
    pub fn nearest_voxel(&self, p: &Point) -> usize {
        if let Some(v) = self.voxel_of(p) {
            return v;
        }
        let mut best = (f64::INFINITY, 0);
        for (i, c) in self.centers.iter().enumerate() {
            let d = (c - p).norm_squared();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Grid with identical indexing for a rescaled geometry.
    pub fn rescaled(&self, theta: f64, lambda: f64) -> Self {
        let geom = self.geom.rescaled(theta, lambda);
        Self {
            geom,
            nx: self.nx,
            h: self.h / lambda,
            origin: self.origin / lambda,
            active: self.active.clone(),
            lookup: self.lookup.clone(),
            centers: self.centers.iter().map(|c| c / lambda).collect(),
            faces: self.faces.clone(),
        }
    }
}

pub fn unravel(lin: usize, nx: usize, dim: usize) -> [usize; 3] {
    let mut idx = [0usize; 3];
    let mut r = lin;
    for slot in idx.iter_mut().take(dim) {
        *slot = r % nx;
        r /= nx;
    }
    idx
}

pub fn ravel(idx: &[usize; 3], nx: usize, dim: usize) -> usize {
    let mut lin = 0;
    for k in (0..dim).rev() {
        lin = lin * nx + idx[k];
    }
    lin
}

/// Discretized spacetime pair `(ρ, η)`.
#[derive(Clone, Debug)]
pub struct GridMeasure {
    pub rho: Vec<f64>,
    pub eta: Vec<f64>,
    pub nv: usize,
    pub nf: usize,
    pub nt: usize,
}

impl GridMeasure {
    pub fn zeros(grid: &VoxelGrid) -> Self {
        Self {
            rho: vec![0.0; grid.nt() * grid.nv()],
            eta: vec![0.0; grid.ntf() * grid.nf()],
            nv: grid.nv(),
            nf: grid.nf(),
            nt: grid.nt(),
        }
    }

    /// Static, spatially uniform measure of total spacetime mass `mass`.
    pub fn uniform(grid: &VoxelGrid, mass: f64) -> Self {
        let mut m = Self::zeros(grid);
        let v = mass / (grid.nt() * grid.nv()) as f64;
        m.rho.iter_mut().for_each(|x| *x = v);
        m
    }

    pub fn check_shape(&self, grid: &VoxelGrid) -> Result<()> {
        if self.rho.len() != grid.nt() * grid.nv() || self.eta.len() != grid.ntf() * grid.nf() {
            return Err(Error::Shape(format!(
                "measure has {} rho / {} eta entries, grid expects {} / {}",
                self.rho.len(),
                self.eta.len(),
                grid.nt() * grid.nv(),
                grid.ntf() * grid.nf()
            )));
        }
        Ok(())
    }

    pub fn slice(&self, t: usize) -> &[f64] {
        &self.rho[t * self.nv..(t + 1) * self.nv]
    }
    pub fn slice_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.rho[t * self.nv..(t + 1) * self.nv]
    }
    pub fn flux(&self, t: usize) -> &[f64] {
        &self.eta[t * self.nf..(t + 1) * self.nf]
    }

    /// `‖ρ‖`, the total spacetime mass.
    pub fn total_mass(&self) -> f64 {
        self.rho.iter().sum()
    }

    pub fn slice_masses(&self) -> Vec<f64> {
        (0..self.nt).map(|t| self.slice(t).iter().sum()).collect()
    }

    pub fn min_rho(&self) -> f64 {
        self.rho.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Total variation of the flux, `Σ|η_f|`.
    pub fn flux_norm(&self) -> f64 {
        self.eta.iter().map(|e| e.abs()).sum()
    }

    pub fn scaled(&self, a: f64, b: f64) -> Self {
        let mut m = self.clone();
        m.rho.iter_mut().for_each(|x| *x *= a);
        m.eta.iter_mut().for_each(|x| *x *= b);
        m
    }

    /// `λ·self + (1-λ)·other`.
    pub fn lerp(&self, other: &Self, lambda: f64) -> Self {
        let mut m = self.clone();
        for (x, y) in m.rho.iter_mut().zip(&other.rho) {
            *x = lambda * *x + (1.0 - lambda) * y;
        }
        for (x, y) in m.eta.iter_mut().zip(&other.eta) {
            *x = lambda * *x + (1.0 - lambda) * y;
        }
        m
    }

    /// Values of slice `t` on the full `nx^d` grid (zero outside `D`).
    pub fn full_slice(&self, grid: &VoxelGrid, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; grid.nx.pow(grid.dim() as u32)];
        for (a, &lin) in grid.active.iter().enumerate() {
            out[lin] = self.rho[t * self.nv + a];
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    format: String,
    dim: usize,
    nx: usize,
    nt: usize,
    nv: usize,
    nf: usize,
    h: f64,
    dt: f64,
    active: Vec<usize>,
    faces: Vec<(u32, u32, u8)>,
}

/// Grid output: one JSON header line, then `rho` followed by `eta` as
/// little-endian float64.
pub fn write_grid_measure(path: &Path, grid: &VoxelGrid, m: &GridMeasure) -> Result<()> {
    m.check_shape(grid)?;
    let header = GridHeader {
        format: "dynpet-grid v1".into(),
        dim: grid.dim(),
        nx: grid.nx,
        nt: grid.nt(),
        nv: grid.nv(),
        nf: grid.nf(),
        h: grid.h,
        dt: grid.dt(),
        active: grid.active.clone(),
        faces: grid.faces.iter().map(|f| (f.lo, f.hi, f.axis)).collect(),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    for v in m.rho.iter().chain(m.eta.iter()) {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_grid_measure(path: &Path) -> Result<GridMeasure> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Shape("grid file without header line".into()))?;
    let header: GridHeader = serde_json::from_slice(&bytes[..nl])?;
    let n_rho = header.nt * header.nv;
    let n_eta = header.nt.saturating_sub(1) * header.nf;
    let body = &bytes[nl + 1..];
    if body.len() != 8 * (n_rho + n_eta) {
        return Err(Error::Shape(format!("grid body has {} bytes, expected {}", body.len(), 8 * (n_rho + n_eta))));
    }
    let vals: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(GridMeasure {
        rho: vals[..n_rho].to_vec(),
        eta: vals[n_rho..].to_vec(),
        nv: header.nv,
        nf: header.nf,
        nt: header.nt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn active_voxels_inside_d() {
        let g = ScannerGeometry::ring(2, 0.8, 1.0, 8, 4, 1.0).unwrap();
        let grid = VoxelGrid::new(&g, 16).unwrap();
        assert!(grid.centers.iter().all(|c| c.norm() <= 0.8));
        // roughly π/4 of the bounding square
        let frac = grid.nv() as f64 / 256.0;
        assert!((frac - std::f64::consts::PI / 4.0).abs() < 0.06);
        for f in &grid.faces {
            let d = grid.centers[f.hi as usize] - grid.centers[f.lo as usize];
            assert!((d[f.axis as usize] - grid.h).abs() < 1e-12);
        }
    }

    #[test]
    fn voxel_lookup_round_trip() {
        let g = ScannerGeometry::ring(3, 0.8, 1.0, 12, 4, 1.0).unwrap();
        let grid = VoxelGrid::new(&g, 8).unwrap();
        for (i, c) in grid.centers.iter().enumerate() {
            assert_eq!(grid.voxel_of(c), Some(i));
        }
    }

    #[test]
    fn grid_file_round_trip() {
        let g = ScannerGeometry::ring(2, 0.8, 1.0, 8, 3, 1.0).unwrap();
        let grid = VoxelGrid::new(&g, 6).unwrap();
        let mut m = GridMeasure::uniform(&grid, 2.0);
        m.eta.iter_mut().enumerate().for_each(|(i, e)| *e = (i as f64).sin() / 7.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.bin");
        write_grid_measure(&p, &grid, &m).unwrap();
        let r = read_grid_measure(&p).unwrap();
        assert_eq!(r.rho, m.rho);
        assert_eq!(r.eta, m.eta);
    }
}
