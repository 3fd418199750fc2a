//! Assembled forward operator from voxels to detector-pair bins.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::grid::{GridMeasure, VoxelGrid};
use crate::forward::kernel::PositronKernel;
use crate::forward::response::{accumulate_point, pair_density_sup, Quadrature};
use crate::forward::Mode;
use crate::geometry::{direction_set, Point, ScannerGeometry};

/// Sparse detection matrix, one row per ordered pair `j·M + k`, columns are
/// active voxels. Entry `(p, x)` is the probability that an annihilation
/// from voxel center `x` is detected in pair `p`.
#[derive(Clone, Debug)]
pub struct DetectionOperator {
    pub m: usize,
    pub nv: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
    /// Probability mass falling on diagonal pairs, per voxel.
    pub diagonal_loss: Vec<f64>,
}

impl DetectionOperator {
    pub fn assemble(grid: &VoxelGrid, kernel: &PositronKernel, quad: &Quadrature) -> Result<Self> {
        let geom = &grid.geom;
        if kernel.support_radius() > 0.5 * geom.delta * (1.0 + 1e-12) {
            return Err(Error::Parameter("kernel support exceeds δ/2".into()));
        }
        let m = geom.n_detectors();
        let dirs = if geom.dim == 3 { direction_set(3, quad.directions) } else { Vec::new() };
        let offsets = kernel.quadrature(geom.dim, quad.kernel_points);
        let columns: Vec<(Vec<(u32, f64)>, f64)> = grid
            .centers
            .par_iter()
            .map(|c| {
                let mut out = vec![0.0; m * m];
                let mut lost = 0.0;
                for (o, w) in &offsets {
                    lost += accumulate_point(geom, &(c + o), *w, &dirs, &mut out);
                }
                let col = out.iter().enumerate().filter(|(_, v)| **v > 0.0).map(|(p, v)| (p as u32, *v)).collect();
                (col, lost)
            })
            .collect();
        let nv = grid.nv();
        let mut counts = vec![0usize; m * m + 1];
        for (col, _) in &columns {
            for (p, _) in col {
                counts[*p as usize + 1] += 1;
            }
        }
        for p in 0..m * m {
            counts[p + 1] += counts[p];
        }
        let nnz = counts[m * m];
        let mut fill = counts.clone();
        let mut cols = vec![0u32; nnz];
        let mut vals = vec![0.0; nnz];
        for (x, (col, _)) in columns.iter().enumerate() {
            for (p, v) in col {
                let slot = &mut fill[*p as usize];
                cols[*slot] = x as u32;
                vals[*slot] = *v;
                *slot += 1;
            }
        }
        let diagonal_loss = columns.iter().map(|c| c.1).collect();
        Ok(Self { m, nv, row_ptr: counts, cols, vals, diagonal_loss })
    }

    pub fn n_pairs(&self) -> usize {
        self.m * self.m
    }

    pub fn row(&self, pair: usize) -> (&[u32], &[f64]) {
        let r = self.row_ptr[pair]..self.row_ptr[pair + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn row_dot(&self, pair: usize, x: &[f64]) -> f64 {
        let (c, v) = self.row(pair);
        c.iter().zip(v).map(|(i, a)| a * x[*i as usize]).sum()
    }

    /// Binned detection of one spatial slice, `M·M` values.
    pub fn apply_slice(&self, rho_slice: &[f64]) -> Vec<f64> {
        (0..self.n_pairs()).map(|p| self.row_dot(p, rho_slice)).collect()
    }

    pub fn adjoint_slice(&self, bins: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.nv];
        for (p, b) in bins.iter().enumerate() {
            if *b == 0.0 {
                continue;
            }
            let (c, v) = self.row(p);
            for (i, a) in c.iter().zip(v) {
                out[*i as usize] += a * b;
            }
        }
        out
    }

    /// Total detection probability of every voxel.
    pub fn column_sums(&self) -> Vec<f64> {
        self.adjoint_slice(&vec![1.0; self.n_pairs()])
    }
}

/// Scatter share `|Γ_j||Γ_k| / 𝓗(∂𝒟)²` of each ordered pair, zero on the diagonal.
pub fn scatter_weights(geom: &ScannerGeometry) -> Vec<f64> {
    let cells = geom.cell_measures();
    let h2 = geom.boundary_measure().powi(2);
    let m = cells.len();
    let mut out = vec![0.0; m * m];
    for j in 0..m {
        for k in 0..m {
            if j != k {
                out[j * m + k] = cells[j] * cells[k] / h2;
            }
        }
    }
    out
}

/// Uniform scatter intensity of a spatial slice per ordered pair.
pub fn apply_scatter(geom: &ScannerGeometry, rho_slice: &[f64]) -> Result<Vec<f64>> {
    if rho_slice.iter().any(|v| *v < 0.0) {
        return Err(Error::Parameter("scatter operator needs nonnegative mass".into()));
    }
    let mass: f64 = rho_slice.iter().sum();
    Ok(scatter_weights(geom).into_iter().map(|w| w * mass).collect())
}

/// Intensity masses per `(τ_i, Γ_j, Γ_k)`, stored as `values[(i·M + j)·M + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BinnedIntensity {
    pub n_bins: usize,
    pub m: usize,
    pub values: Vec<f64>,
}

impl BinnedIntensity {
    pub fn zeros(n_bins: usize, m: usize) -> Self {
        Self { n_bins, m, values: vec![0.0; n_bins * m * m] }
    }
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(i * self.m + j) * self.m + k]
    }
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

fn check_probabilities(p_s: f64, p_d: f64) -> Result<()> {
    if !(p_s >= 0.0 && p_d >= 0.0 && p_s + p_d <= 1.0 + 1e-12) {
        return Err(Error::Parameter(format!("need p_s, p_d ≥ 0 and p_s + p_d ≤ 1, got {p_s}, {p_d}")));
    }
    Ok(())
}

/// `q·p_s·A^s ρ + p_d·A^d ρ` binned in time and detector pairs.
pub fn apply_unbiased_forward(
    grid: &VoxelGrid,
    op: &DetectionOperator,
    rho: &GridMeasure,
    q: f64,
    p_s: f64,
    p_d: f64,
) -> Result<BinnedIntensity> {
    check_probabilities(p_s, p_d)?;
    if !(q >= 0.0) {
        return Err(Error::Parameter(format!("q must be nonnegative, got {q}")));
    }
    if rho.min_rho() < 0.0 {
        return Err(Error::Parameter("forward operator needs nonnegative ρ".into()));
    }
    rho.check_shape(grid)?;
    let m = op.m;
    let sw = scatter_weights(&grid.geom);
    let mut out = BinnedIntensity::zeros(grid.nt(), m);
    out.values.par_chunks_mut(m * m).enumerate().for_each(|(t, bins)| {
        let slice = rho.slice(t);
        let mass: f64 = slice.iter().sum();
        let det = if p_d > 0.0 { op.apply_slice(slice) } else { vec![0.0; m * m] };
        for p in 0..m * m {
            bins[p] = q * p_s * sw[p] * mass + p_d * det[p];
        }
    });
    Ok(out)
}

/// `A ρ = p_s A^s ρ + p_d A^d ρ`; attenuated pairs contribute nothing.
pub fn apply_forward(
    grid: &VoxelGrid,
    op: &DetectionOperator,
    rho: &GridMeasure,
    p_s: f64,
    p_d: f64,
) -> Result<BinnedIntensity> {
    apply_unbiased_forward(grid, op, rho, 1.0, p_s, p_d)
}

/// Bin a continuous intensity `f(t, a, b)` (density against `dt ⊗ 𝓗 ⊗ 𝓗`)
/// by a product midpoint rule with `nq` nodes per time bin and per cell axis.
pub fn discretize<F>(geom: &ScannerGeometry, nq: usize, f: F) -> BinnedIntensity
where
    F: Fn(f64, &Point, &Point) -> f64 + Sync,
{
    let nodes = cell_nodes(geom, nq);
    let m = geom.n_detectors();
    let dt = geom.dt();
    let mut out = BinnedIntensity::zeros(geom.n_bins, m);
    out.values.par_chunks_mut(m * m).enumerate().for_each(|(i, bins)| {
        for j in 0..m {
            for k in 0..m {
                if j == k {
                    continue;
                }
                let mut acc = 0.0;
                for s in 0..nq {
                    let t = (i as f64 + (s as f64 + 0.5) / nq as f64) * dt;
                    for (a, wa) in &nodes[j] {
                        for (b, wb) in &nodes[k] {
                            acc += f(t, a, b) * wa * wb;
                        }
                    }
                }
                bins[j * m + k] = acc * dt / nq as f64;
            }
        }
    });
    out
}

/// Quadrature nodes and surface weights inside every detector cell.
pub fn cell_nodes(geom: &ScannerGeometry, nq: usize) -> Vec<Vec<(Point, f64)>> {
    use crate::geometry::{point2, Detectors};
    use std::f64::consts::PI;
    let c = geom.center();
    let r = geom.radius_dd;
    match &geom.detectors {
        Detectors::Ring { m } => {
            let width = 2.0 * PI / *m as f64;
            (0..*m)
                .map(|j| {
                    (0..nq)
                        .map(|s| {
                            let ang = (j as f64 + (s as f64 + 0.5) / nq as f64) * width;
                            (c + point2(r * ang.cos(), r * ang.sin()), r * width / nq as f64)
                        })
                        .collect()
                })
                .collect()
        }
        Detectors::Zonal { zones, .. } => {
            let mut out = Vec::new();
            for z in zones {
                let (zlo, zhi) = (z.theta_hi.cos(), z.theta_lo.cos());
                let width = 2.0 * PI / z.count as f64;
                for i in 0..z.count {
                    let mut cell = Vec::new();
                    for a in 0..nq {
                        let cz = zlo + (a as f64 + 0.5) / nq as f64 * (zhi - zlo);
                        let sz = (1.0 - cz * cz).max(0.0).sqrt();
                        for b in 0..nq {
                            let ph = (i as f64 + (b as f64 + 0.5) / nq as f64) * width;
                            let w = (zhi - zlo) * width * r * r / (nq * nq) as f64;
                            cell.push((c + Point::new(r * sz * ph.cos(), r * sz * ph.sin(), r * cz), w));
                        }
                    }
                    out.push(cell);
                }
            }
            out
        }
    }
}

/// Constants of the sandwich `C_lower‖ρ‖ ≤ dA^qρ/dν ≤ C_upper‖ρ‖`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
    /// Bound of the detection part alone (per unit `p_d`).
    pub detection_upper: f64,
    /// `false` when `q·p_s = 0` and no positive lower bound exists.
    pub has_lower: bool,
}

pub fn bound_constant(geom: &ScannerGeometry, kernel: &PositronKernel, q: f64, p_s: f64, p_d: f64, mode: Mode) -> Bounds {
    let n = geom.n_bins as f64;
    match mode {
        Mode::Discrete => {
            let sw: Vec<f64> = scatter_weights(geom).into_iter().filter(|w| *w > 0.0).collect();
            let smin = sw.iter().cloned().fold(f64::INFINITY, f64::min);
            let smax = sw.iter().cloned().fold(0.0, f64::max);
            let lower = q * p_s * smin / n;
            Bounds { lower, upper: q * p_s * smax / n + p_d, detection_upper: 1.0, has_lower: lower > 0.0 }
        }
        Mode::Continuous => {
            let h2 = geom.boundary_measure().powi(2);
            let t = geom.t_end;
            let det = pair_density_sup(geom) * kernel.line_integral(geom.dim, 0.0);
            let lower = q * p_s / (h2 * t);
            Bounds { lower, upper: (q * p_s / h2 + p_d * det) / t, detection_upper: det / t, has_lower: lower > 0.0 }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    hash: u64,
    m: usize,
    nv: usize,
    nnz: usize,
}

/// FNV-1a over the bytes of `s`.
pub fn fnv1a(s: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Hash identifying an operator: geometry, grid size, kernel and quadrature.
pub fn operator_hash(grid: &VoxelGrid, kernel: &PositronKernel, quad: &Quadrature) -> u64 {
    let key = serde_json::json!({ "geom": grid.geom, "nx": grid.nx, "kernel": kernel, "quad": quad });
    fnv1a(key.to_string().as_bytes())
}

/// Cache layout: JSON header line, then row pointers as LE u32, column
/// indices as LE u32, values as LE f64, diagonal loss as LE f64.
pub fn write_operator_cache(path: &Path, op: &DetectionOperator, hash: u64) -> Result<()> {
    let header = CacheHeader { format: "dynpet-operator v1".into(), hash, m: op.m, nv: op.nv, nnz: op.vals.len() };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    for p in &op.row_ptr {
        f.write_all(&(*p as u32).to_le_bytes())?;
    }
    for c in &op.cols {
        f.write_all(&c.to_le_bytes())?;
    }
    for v in op.vals.iter().chain(&op.diagonal_loss) {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Load a cached operator; `Ok(None)` if the hash does not match.
pub fn read_operator_cache(path: &Path, hash: u64) -> Result<Option<DetectionOperator>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Shape("operator cache without header".into()))?;
    let h: CacheHeader = serde_json::from_slice(&bytes[..nl])?;
    if h.hash != hash {
        return Ok(None);
    }
    let np = h.m * h.m + 1;
    let body = &bytes[nl + 1..];
    let want = 4 * (np + h.nnz) + 8 * (h.nnz + h.nv);
    if body.len() != want {
        return Err(Error::Shape(format!("operator cache has {} bytes, expected {want}", body.len())));
    }
    let u32s = |b: &[u8]| -> Vec<u32> { b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect() };
    let f64s = |b: &[u8]| -> Vec<f64> { b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect() };
    let row_ptr = u32s(&body[..4 * np]).into_iter().map(|v| v as usize).collect();
    let cols = u32s(&body[4 * np..4 * (np + h.nnz)]);
    let rest = f64s(&body[4 * (np + h.nnz)..]);
    Ok(Some(DetectionOperator {
        m: h.m,
        nv: h.nv,
        row_ptr,
        cols,
        vals: rest[..h.nnz].to_vec(),
        diagonal_loss: rest[h.nnz..].to_vec(),
    }))
}

/// Assemble or load from `cache` when its hash matches.
pub fn load_or_assemble(
    grid: &VoxelGrid,
    kernel: &PositronKernel,
    quad: &Quadrature,
    cache: Option<&Path>,
) -> Result<DetectionOperator> {
    let hash = operator_hash(grid, kernel, quad);
    if let Some(p) = cache {
        if p.exists() {
            if let Some(op) = read_operator_cache(p, hash)? {
                return Ok(op);
            }
            log::info!("operator cache {} is stale, reassembling", p.display());
        }
    }
    let op = DetectionOperator::assemble(grid, kernel, quad)?;
    if let Some(p) = cache {
        write_operator_cache(p, &op, hash)?;
    }
    Ok(op)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::response::point_pair_density;
    use approx::assert_relative_eq;

    fn setup(m: usize, nt: usize) -> (VoxelGrid, DetectionOperator) {
        let g = ScannerGeometry::ring(2, 0.8, 1.0, m, nt, 1.0).unwrap();
        let grid = VoxelGrid::new(&g, 12).unwrap();
        let k = PositronKernel::Gaussian { sigma: 0.02 };
        let op = DetectionOperator::assemble(&grid, &k, &Quadrature { kernel_points: 5, directions: 0 }).unwrap();
        (grid, op)
    }

    #[test]
    fn scatter_examples() {
        let g = ScannerGeometry::ring(2, 0.8, 1.0, 8, 1, 1.0).unwrap();
        let s = apply_scatter(&g, &[0.0; 4]).unwrap();
        assert!(s.iter().all(|v| *v == 0.0));
        let s = apply_scatter(&g, &[0.25; 4]).unwrap();
        assert_relative_eq!(s[1], 0.015625, epsilon = 1e-15);
        assert_eq!(s[0], 0.0);
        assert_relative_eq!(s.iter().sum::<f64>(), 1.0 - 1.0 / 8.0, epsilon = 1e-14);
        let s = apply_scatter(&g, &[3.0]).unwrap();
        assert_relative_eq!(s[9 + 1], 0.046875, epsilon = 1e-15);
        assert!(apply_scatter(&g, &[-1.0]).is_err());
    }

    #[test]
    fn detection_preserves_mass() {
        let (_, op) = setup(8, 1);
        for (x, s) in op.column_sums().iter().enumerate() {
            assert_relative_eq!(*s + op.diagonal_loss[x], 1.0, epsilon = 1e-12);
            assert_eq!(op.diagonal_loss[x], 0.0);
        }
    }

    #[test]
    fn forward_examples() {
        let (grid, op) = setup(8, 10);
        let rho = GridMeasure::uniform(&grid, 1.0);
        let zero = apply_forward(&grid, &op, &rho, 0.0, 0.0).unwrap();
        assert_eq!(zero.total(), 0.0);
        let s = apply_forward(&grid, &op, &rho, 1.0, 0.0).unwrap();
        assert_relative_eq!(s.get(3, 1, 2), 0.1 / 64.0, epsilon = 1e-15);
        assert_eq!(s.get(3, 2, 2), 0.0);
        let a = apply_forward(&grid, &op, &rho, 0.2, 0.6).unwrap();
        assert_relative_eq!(a.total(), 0.2 * (1.0 - 1.0 / 8.0) + 0.6, max_relative = 1e-12);
        let q1 = apply_unbiased_forward(&grid, &op, &rho, 1.0, 0.2, 0.6).unwrap();
        assert_eq!(q1, a);
        let s1 = apply_unbiased_forward(&grid, &op, &rho, 1.0, 0.5, 0.0).unwrap();
        let s2 = apply_unbiased_forward(&grid, &op, &rho, 2.0, 0.5, 0.0).unwrap();
        for (x, y) in s1.values.iter().zip(&s2.values) {
            assert_eq!(2.0 * x, *y);
        }
        assert!(apply_forward(&grid, &op, &rho, 0.7, 0.6).is_err());
    }

    #[test]
    fn forward_is_linear() {
        let (grid, op) = setup(8, 3);
        let mut a = GridMeasure::zeros(&grid);
        let mut b = GridMeasure::zeros(&grid);
        for (i, v) in a.rho.iter_mut().enumerate() {
            *v = ((i * 7) % 5) as f64;
        }
        for (i, v) in b.rho.iter_mut().enumerate() {
            *v = ((i * 3) % 11) as f64 * 0.1;
        }
        let c = {
            let mut c = a.clone();
            for (x, y) in c.rho.iter_mut().zip(&b.rho) {
                *x = 2.0 * *x + 0.5 * y;
            }
            c
        };
        let fa = apply_forward(&grid, &op, &a, 0.3, 0.6).unwrap();
        let fb = apply_forward(&grid, &op, &b, 0.3, 0.6).unwrap();
        let fc = apply_forward(&grid, &op, &c, 0.3, 0.6).unwrap();
        for i in 0..fa.values.len() {
            let lin = 2.0 * fa.values[i] + 0.5 * fb.values[i];
            assert!((fc.values[i] - lin).abs() <= 1e-12 * (1.0 + lin.abs()));
        }
    }

    /// Integrating the closed-form continuous density over detector cells is
    /// an independent route to the assembled bins.
    #[test]
    fn continuous_density_integrates_to_bins() {
        let g = ScannerGeometry::ring(2, 0.8, 1.0, 8, 1, 1.0).unwrap();
        let k = PositronKernel::Gaussian { sigma: 0.025 };
        let y = Point::new(0.3, -0.2, 0.0);
        let (resp, _) = crate::forward::response::point_response(&g, &k, &Quadrature { kernel_points: 21, directions: 0 }, &y);
        let binned = discretize(&g, 64, |_, a, b| point_pair_density(&g, &k, &y, a, b));
        for p in 0..64 {
            assert!((binned.values[p] - resp[p]).abs() < 2e-3, "pair {p}: {} vs {}", binned.values[p], resp[p]);
        }
        assert_relative_eq!(binned.total(), 1.0, max_relative = 2e-3);
    }

    #[test]
    fn discretize_uniform_intensity() {
        let g = ScannerGeometry::ring(3, 0.8, 1.0, 12, 2, 1.0).unwrap();
        let z = discretize(&g, 3, |_, _, _| 0.0);
        assert_eq!(z.total(), 0.0);
        let u = discretize(&g, 3, |_, _, _| 1.0);
        let cell = 4.0 * std::f64::consts::PI / 12.0;
        for i in 0..2 {
            for j in 0..12 {
                for k in 0..12 {
                    let expect = if j == k { 0.0 } else { 0.5 * cell * cell };
                    assert_relative_eq!(u.get(i, j, k), expect, max_relative = 1e-9);
                }
            }
        }
    }

    #[test]
    fn discrete_bounds() {
        let g = ScannerGeometry::ring(2, 0.8, 1.0, 8, 10, 1.0).unwrap();
        let b = bound_constant(&g, &PositronKernel::None, 0.0, 0.5, 0.5, Mode::Discrete);
        assert_eq!(b.lower, 0.0);
        assert!(!b.has_lower);
        assert_eq!(b.detection_upper, 1.0);
    }

    #[test]
    fn cache_round_trip() {
        let (grid, op) = setup(8, 1);
        let k = PositronKernel::Gaussian { sigma: 0.02 };
        let q = Quadrature { kernel_points: 5, directions: 0 };
        let hash = operator_hash(&grid, &k, &q);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("op.bin");
        write_operator_cache(&p, &op, hash).unwrap();
        let r = read_operator_cache(&p, hash).unwrap().unwrap();
        assert_eq!(r.vals, op.vals);
        assert_eq!(r.cols, op.cols);
        assert_eq!(r.row_ptr, op.row_ptr);
        assert!(read_operator_cache(&p, hash ^ 1).unwrap().is_none());
    }
}
