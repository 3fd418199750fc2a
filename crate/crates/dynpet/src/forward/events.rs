//! Measurement data in the form the objective and the solvers consume.
//!
//! For every event `e` (or merged discrete bin) with slice `i(e)` the
//! intensity density against `ν` is
//!
//! ```text
//! λ_e(ρ) = (q p_s c_e Σ_x ρ[i,x] + p_d r_e·ρ[i,·]) / T_half
//! ```
//!
//! with `c_e` the scatter share and `r_e` a sparse detection row over voxels.
//! Discrete bins use `c_e = |Γ_j||Γ_k|/𝓗²` and the operator row of `(j, k)`;
//! continuous events use `c_e = 1/(𝓗² ΔT)` and
//! `r_e(x) = g(a, b)·P[G*δ_x](θ, s)/ΔT`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::forward::grid::{GridMeasure, VoxelGrid};
use crate::forward::kernel::PositronKernel;
use crate::forward::operator::{scatter_weights, DetectionOperator};
use crate::forward::response::{line_distance, pair_density_factor, point_response_with, Quadrature};
use crate::forward::Mode;
use crate::geometry::{direction_set, Point, ScannerGeometry};
use crate::listmode::{Listmode, ListmodeEvent};

#[derive(Clone, Debug)]
pub enum EventGeometry {
    Pair { j: usize, k: usize },
    Line { a: Point, theta: Point, g: f64 },
}

#[derive(Clone, Debug)]
pub struct EventData {
    pub mode: Mode,
    pub geom: ScannerGeometry,
    pub kernel: PositronKernel,
    pub nt: usize,
    pub nv: usize,
    pub t_half: f64,
    pub slice: Vec<usize>,
    pub weight: Vec<f64>,
    pub scatter: Vec<f64>,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
    pub shape: Vec<EventGeometry>,
    pub by_slice: Vec<Vec<usize>>,
    offsets: Vec<(Point, f64)>,
    dirs: Vec<Point>,
}

impl EventData {
    /// Merge identical bins of a discrete list; the operator supplies the rows.
    pub fn discrete(grid: &VoxelGrid, op: &DetectionOperator, kernel: &PositronKernel, quad: &Quadrature, lm: &Listmode, t_half: f64) -> Result<Self> {
        if lm.mode != Mode::Discrete {
            return Err(Error::Listmode("discrete event data needs a binned listmode".into()));
        }
        lm.check_geometry(&grid.geom)?;
        let mut counts: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
        for e in &lm.events {
            if let ListmodeEvent::Discrete { i, j, k } = e {
                *counts.entry((*i, *j, *k)).or_insert(0.0) += 1.0;
            }
        }
        let sw = scatter_weights(&grid.geom);
        let m = op.m;
        let mut d = Self::empty(grid, Mode::Discrete, kernel, quad, t_half)?;
        for ((i, j, k), w) in counts {
            let (c, v) = op.row(j * m + k);
            d.push(i, w, sw[j * m + k], c, v, EventGeometry::Pair { j, k });
        }
        Ok(d)
    }

    /// One entry per continuous event, voxels treated as point masses at their centers.
    pub fn continuous(grid: &VoxelGrid, kernel: &PositronKernel, quad: &Quadrature, lm: &Listmode, t_half: f64) -> Result<Self> {
        if lm.mode != Mode::Continuous {
            return Err(Error::Listmode("continuous event data needs exact event coordinates".into()));
        }
        if kernel.is_none() {
            return Err(Error::Parameter("continuous mode needs a positron kernel".into()));
        }
        let geom = &grid.geom;
        lm.check_geometry(geom)?;
        let mut events = lm.events.clone();
        events.sort_by(crate::listmode::cmp_events);
        let h2 = geom.boundary_measure().powi(2);
        let dt = geom.dt();
        let mut d = Self::empty(grid, Mode::Continuous, kernel, quad, t_half)?;
        for e in &events {
            if let ListmodeEvent::Continuous { t, a, b } = e {
                let i = geom.time_bin(*t)?;
                let lor = geom.line_of_response(a, b)?;
                let g = pair_density_factor(geom, a, b);
                let mut c = Vec::new();
                let mut v = Vec::new();
                for (x, p) in grid.centers.iter().enumerate() {
                    let val = g * kernel.line_integral(geom.dim, line_distance(p, a, &lor.theta)) / dt;
                    if val > 0.0 {
                        c.push(x as u32);
                        v.push(val);
                    }
                }
                d.push(i, 1.0, 1.0 / (h2 * dt), &c, &v, EventGeometry::Line { a: *a, theta: lor.theta, g });
            }
        }
        Ok(d)
    }

    fn empty(grid: &VoxelGrid, mode: Mode, kernel: &PositronKernel, quad: &Quadrature, t_half: f64) -> Result<Self> {
        if !(t_half > 0.0) || !t_half.is_finite() {
            return Err(Error::Parameter(format!("T_half must be positive, got {t_half}")));
        }
        Ok(Self {
            mode,
            geom: grid.geom.clone(),
            kernel: *kernel,
            nt: grid.nt(),
            nv: grid.nv(),
            t_half,
            slice: Vec::new(),
            weight: Vec::new(),
            scatter: Vec::new(),
            row_ptr: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
            shape: Vec::new(),
            by_slice: vec![Vec::new(); grid.nt()],
            offsets: kernel.quadrature(grid.dim(), quad.kernel_points),
            dirs: if grid.dim() == 3 { direction_set(3, quad.directions) } else { Vec::new() },
        })
    }

    fn push(&mut self, i: usize, w: f64, sc: f64, c: &[u32], v: &[f64], shape: EventGeometry) {
        self.by_slice[i].push(self.slice.len());
        self.slice.push(i);
        self.weight.push(w);
        self.scatter.push(sc);
        self.cols.extend_from_slice(c);
        self.vals.extend_from_slice(v);
        self.row_ptr.push(self.cols.len());
        self.shape.push(shape);
    }

    /// Keep only the entries selected by `keep`.
    pub fn subset(&self, keep: &[bool]) -> Self {
        let mut d = Self { slice: Vec::new(), weight: Vec::new(), scatter: Vec::new(), row_ptr: vec![0], cols: Vec::new(), vals: Vec::new(), shape: Vec::new(), by_slice: vec![Vec::new(); self.nt], ..self.clone() };
        for e in 0..self.len() {
            if keep[e] {
                let (c, v) = self.row(e);
                d.push(self.slice[e], self.weight[e], self.scatter[e], c, v, self.shape[e].clone());
            }
        }
        d
    }

    pub fn len(&self) -> usize {
        self.slice.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slice.is_empty()
    }

    /// `|E|`, counting merged bins with multiplicity.
    pub fn total_weight(&self) -> f64 {
        self.weight.iter().sum()
    }

    pub fn row(&self, e: usize) -> (&[u32], &[f64]) {
        let r = self.row_ptr[e]..self.row_ptr[e + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    /// `r_e · ρ[i(e), ·]`.
    pub fn detection(&self, e: usize, rho: &GridMeasure) -> f64 {
        let s = rho.slice(self.slice[e]);
        let (c, v) = self.row(e);
        c.iter().zip(v).map(|(x, a)| a * s[*x as usize]).sum()
    }

    /// Scatter part per unit `q p_s`: `c_e Σ_x ρ[i(e), x]`.
    pub fn scatter_part(&self, e: usize, rho: &GridMeasure) -> f64 {
        self.scatter[e] * rho.slice(self.slice[e]).iter().sum::<f64>()
    }

    /// Density of `A^q ρ / T_half` at entry `e`.
    pub fn intensity(&self, e: usize, rho: &GridMeasure, q: f64, p_s: f64, p_d: f64) -> f64 {
        let sc = if q * p_s > 0.0 { q * p_s * self.scatter_part(e, rho) } else { 0.0 };
        (sc + p_d * self.detection(e, rho)) / self.t_half
    }

    /// Detection row of each entry in `events` evaluated at the point `y`,
    /// i.e. the value `r_e` would take on a voxel centered at `y`.
    pub fn rows_at(&self, y: &Point, events: &[usize]) -> Vec<f64> {
        match self.mode {
            Mode::Discrete => {
                let m = self.geom.n_detectors();
                let (resp, _) = point_response_with(&self.geom, &self.offsets, &self.dirs, y, m);
                events
                    .iter()
                    .map(|&e| match self.shape[e] {
                        EventGeometry::Pair { j, k } => resp[j * m + k],
                        _ => 0.0,
                    })
                    .collect()
            }
            Mode::Continuous => {
                let dt = self.geom.dt();
                events
                    .iter()
                    .map(|&e| match &self.shape[e] {
                        EventGeometry::Line { a, theta, g } => {
                            g * self.kernel.line_integral(self.geom.dim, line_distance(y, a, theta)) / dt
                        }
                        _ => 0.0,
                    })
                    .collect()
            }
        }
    }
}
