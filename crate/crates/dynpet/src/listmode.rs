//! Ground truth, Poisson listmode sampling and listmode files.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Poisson, UnitCircle, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::grid::{ravel, GridMeasure, VoxelGrid};
use crate::forward::kernel::PositronKernel;
use crate::forward::Mode;
use crate::geometry::{point2, Point, ScannerGeometry};
use crate::rng::{stream, COUNT_STREAM};
use crate::transport::fill_min_energy_flux;

/// A tracer particle with one knot per time-bin center. Between knots the
/// trajectory is linear; before the first and after the last it is
/// extrapolated linearly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub mass: f64,
    pub knots: Vec<Point>,
}

impl Particle {
    /// Particle at `start` for `t = 0` moving with constant `velocity`.
    pub fn linear(mass: f64, start: Point, velocity: Point, geom: &ScannerGeometry) -> Self {
        let dt = geom.dt();
        let knots = (0..geom.n_bins).map(|i| start + velocity * ((i as f64 + 0.5) * dt)).collect();
        Self { mass, knots }
    }

    pub fn fixed(mass: f64, at: Point, geom: &ScannerGeometry) -> Self {
        Self { mass, knots: vec![at; geom.n_bins] }
    }

    pub fn position(&self, dt: f64, t: f64) -> Point {
        let n = self.knots.len();
        if n == 1 {
            return self.knots[0];
        }
        let s = t / dt - 0.5;
        let i0 = (s.floor().max(0.0) as usize).min(n - 2);
        let f = s - i0 as f64;
        self.knots[i0] * (1.0 - f) + self.knots[i0 + 1] * f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub particles: Vec<Particle>,
    pub t_half: f64,
}

impl GroundTruth {
    pub fn validate(&self, geom: &ScannerGeometry) -> Result<()> {
        if !(self.t_half > 0.0) || !self.t_half.is_finite() {
            return Err(Error::Parameter(format!("T_half must be positive, got {}", self.t_half)));
        }
        for (i, p) in self.particles.iter().enumerate() {
            if !(p.mass > 0.0) || !p.mass.is_finite() {
                return Err(Error::Parameter(format!("particle {i} has mass {}", p.mass)));
            }
            if p.knots.len() != geom.n_bins {
                return Err(Error::Shape(format!("particle {i} has {} knots, need {}", p.knots.len(), geom.n_bins)));
            }
            let ends = [p.position(geom.dt(), 0.0), p.position(geom.dt(), geom.t_end)];
            if let Some(x) = p.knots.iter().chain(ends.iter()).find(|x| !geom.in_d(x)) {
                return Err(Error::OutOfDomain(format!("particle {i} leaves D at {:?}", x.as_slice())));
            }
        }
        Ok(())
    }

    /// `‖ρ†‖ = T Σ m_i`.
    pub fn total_mass(&self, geom: &ScannerGeometry) -> f64 {
        geom.t_end * self.particles.iter().map(|p| p.mass).sum::<f64>()
    }

    /// Expected number of events `(p_s + p_d)‖ρ†‖ / T_half`.
    pub fn expected_count(&self, geom: &ScannerGeometry, p_s: f64, p_d: f64) -> f64 {
        (p_s + p_d) * self.total_mass(geom) / self.t_half
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Splat {
    Nearest,
    Linear,
}

/// Deposit `w` at `p` into `out` (active-voxel indexed).
pub fn splat_point(grid: &VoxelGrid, p: &Point, w: f64, splat: Splat, out: &mut [f64]) {
    if splat == Splat::Nearest {
        out[grid.nearest_voxel(p)] += w;
        return;
    }
    let dim = grid.dim();
    let nx = grid.nx;
    let mut base = [0i64; 3];
    let mut frac = [0.0; 3];
    for k in 0..dim {
        let f = (p[k] - grid.origin[k]) / grid.h - 0.5;
        base[k] = f.floor() as i64;
        frac[k] = f - base[k] as f64;
    }
    let mut nodes = Vec::with_capacity(8);
    for corner in 0..(1usize << dim) {
        let mut idx = [0usize; 3];
        let mut wt = 1.0;
        let mut ok = true;
        for k in 0..dim {
            let bit = (corner >> k) & 1;
            let i = base[k] + bit as i64;
            if i < 0 || i >= nx as i64 {
                ok = false;
                break;
            }
            idx[k] = i as usize;
            wt *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
        }
        if !ok || wt <= 0.0 {
            continue;
        }
        let a = grid.lookup[ravel(&idx, nx, dim)];
        if a != u32::MAX {
            nodes.push((a as usize, wt));
        }
    }
    let total: f64 = nodes.iter().map(|n| n.1).sum();
    if total <= 0.0 {
        out[grid.nearest_voxel(p)] += w;
    } else {
        for (a, wt) in nodes {
            out[a] += w * wt / total;
        }
    }
}

/// Spacetime measure of the ground truth: each particle puts `m·ΔT` into
/// every slice at its bin-center position, and the flux is the least-energy
/// flux between consecutive slices, so the continuity equation holds.
pub fn ground_truth_to_grid(gt: &GroundTruth, grid: &VoxelGrid, splat: Splat) -> Result<GridMeasure> {
    gt.validate(&grid.geom)?;
    let mut m = GridMeasure::zeros(grid);
    let dt = grid.dt();
    let nv = grid.nv();
    for p in &gt.particles {
        for t in 0..grid.nt() {
            splat_point(grid, &p.knots[t], p.mass * dt, splat, &mut m.rho[t * nv..(t + 1) * nv]);
        }
    }
    fill_min_energy_flux(grid, &mut m);
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ListmodeEvent {
    Continuous { t: f64, a: Point, b: Point },
    Discrete { i: usize, j: usize, k: usize },
}

impl ListmodeEvent {
    fn sort_key(&self) -> (f64, [f64; 6]) {
        match self {
            ListmodeEvent::Continuous { t, a, b } => (*t, [a.x, a.y, a.z, b.x, b.y, b.z]),
            ListmodeEvent::Discrete { i, j, k } => (*i as f64, [*j as f64, *k as f64, 0.0, 0.0, 0.0, 0.0]),
        }
    }
}

pub fn cmp_events(x: &ListmodeEvent, y: &ListmodeEvent) -> std::cmp::Ordering {
    let (a, b) = (x.sort_key(), y.sort_key());
    a.0.total_cmp(&b.0).then_with(|| {
        a.1.iter().zip(&b.1).map(|(u, v)| u.total_cmp(v)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Listmode {
    pub mode: Mode,
    pub dim: usize,
    pub t_end: f64,
    pub m: usize,
    pub n_bins: usize,
    pub events: Vec<ListmodeEvent>,
    pub seed: Option<u64>,
}

impl Listmode {
    pub fn empty(geom: &ScannerGeometry, mode: Mode) -> Self {
        Self { mode, dim: geom.dim, t_end: geom.t_end, m: geom.n_detectors(), n_bins: geom.n_bins, events: Vec::new(), seed: None }
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn sort(&mut self) {
        self.events.sort_by(cmp_events);
    }

    /// Check that the list belongs to `geom`.
    pub fn check_geometry(&self, geom: &ScannerGeometry) -> Result<()> {
        let same = self.dim == geom.dim
            && self.m == geom.n_detectors()
            && self.n_bins == geom.n_bins
            && (self.t_end - geom.t_end).abs() <= 1e-12 * geom.t_end;
        if !same {
            return Err(Error::Listmode(format!(
                "listmode (d={}, T={}, M={}, N={}) does not match the geometry (d={}, T={}, M={}, N={})",
                self.dim, self.t_end, self.m, self.n_bins, geom.dim, geom.t_end, geom.n_detectors(), geom.n_bins
            )));
        }
        for (r, e) in self.events.iter().enumerate() {
            if let ListmodeEvent::Continuous { a, b, .. } = e {
                geom.line_of_response(a, b).map_err(|err| Error::Listmode(format!("event {r}: {err}")))?;
            }
        }
        Ok(())
    }

    /// Discrete version of a continuous list: times to bins, points to cells.
    /// Pairs whose points fall in one cell are dropped.
    pub fn binned(&self, geom: &ScannerGeometry) -> Result<Listmode> {
        if self.mode == Mode::Discrete {
            return Ok(self.clone());
        }
        let mut out = Listmode { mode: Mode::Discrete, events: Vec::with_capacity(self.len()), ..self.clone() };
        for e in &self.events {
            if let ListmodeEvent::Continuous { t, a, b } = e {
                let i = geom.time_bin(*t)?;
                let j = geom.detector_index(a)?;
                let k = geom.detector_index(b)?;
                if j != k {
                    out.events.push(ListmodeEvent::Discrete { i, j, k });
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Hidden per-event truth, never read by the reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventLabel {
    pub scattered: bool,
    /// Source particle of an unscattered event.
    pub particle: Option<usize>,
    pub t: f64,
}

pub fn uniform_surface_point<R: Rng + ?Sized>(geom: &ScannerGeometry, rng: &mut R) -> Point {
    let c = geom.center();
    let r = geom.radius_dd;
    if geom.dim == 2 {
        let [x, y]: [f64; 2] = UnitCircle.sample(rng);
        c + point2(r * x, r * y)
    } else {
        let [x, y, z]: [f64; 3] = UnitSphere.sample(rng);
        c + Point::new(r * x, r * y, r * z)
    }
}

pub fn uniform_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Point {
    if dim == 2 {
        let a: f64 = rng.random::<f64>() * 2.0 * PI;
        point2(a.cos(), a.sin())
    } else {
        let [x, y, z]: [f64; 3] = UnitSphere.sample(rng);
        Point::new(x, y, z)
    }
}

/// Simulation inputs besides the geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleParams {
    pub p_s: f64,
    pub p_d: f64,
    pub kernel: PositronKernel,
    pub mode: Mode,
}

/// Draw a listmode realization of the Poisson process with intensity
/// `(p_s A^s + p_d A^d) ρ† / T_half`.
pub fn sample_poisson_listmode(
    gt: &GroundTruth,
    geom: &ScannerGeometry,
    params: &SampleParams,
    seed: u64,
) -> Result<(Listmode, Vec<EventLabel>)> {
    gt.validate(geom)?;
    let (p_s, p_d) = (params.p_s, params.p_d);
    if !(p_s >= 0.0 && p_d >= 0.0 && p_s + p_d <= 1.0 + 1e-12) {
        return Err(Error::Parameter(format!("need p_s, p_d ≥ 0 and p_s + p_d ≤ 1, got {p_s}, {p_d}")));
    }
    let mut lm = Listmode::empty(geom, params.mode);
    lm.seed = Some(seed);
    let lambda = gt.expected_count(geom, p_s, p_d);
    if lambda <= 0.0 {
        return Ok((lm, Vec::new()));
    }
    let count = Poisson::new(lambda)
        .map_err(|e| Error::Parameter(format!("Poisson rate {lambda}: {e}")))?
        .sample(&mut stream(seed, COUNT_STREAM)) as u64;
    let masses: Vec<f64> = gt.particles.iter().map(|p| p.mass).collect();
    let pick = WeightedIndex::new(&masses).map_err(|e| Error::Parameter(e.to_string()))?;
    let p_scatter = p_s / (p_s + p_d);
    let dt = geom.dt();
    let draws: Vec<(ListmodeEvent, EventLabel)> = (0..count)
        .into_par_iter()
        .map(|e| {
            let mut rng = stream(seed, e);
            let t = rng.random::<f64>() * geom.t_end;
            let (a, b, label) = if rng.random::<f64>() < p_scatter {
                let a = uniform_surface_point(geom, &mut rng);
                let b = uniform_surface_point(geom, &mut rng);
                (a, b, EventLabel { scattered: true, particle: None, t })
            } else {
                let i = pick.sample(&mut rng);
                let x = gt.particles[i].position(dt, t) + params.kernel.sample(geom.dim, &mut rng);
                let v = uniform_direction(geom.dim, &mut rng);
                let (a, b) = geom.detect_ray_unchecked(&x, &v);
                (a, b, EventLabel { scattered: false, particle: Some(i), t })
            };
            let ev = match params.mode {
                Mode::Continuous => ListmodeEvent::Continuous { t, a, b },
                Mode::Discrete => ListmodeEvent::Discrete {
                    i: ((t / dt) as usize).min(geom.n_bins - 1),
                    j: geom.detector_index_unchecked(&a),
                    k: geom.detector_index_unchecked(&b),
                },
            };
            (ev, label)
        })
        .collect();
    let mut draws: Vec<(ListmodeEvent, EventLabel)> = draws
        .into_iter()
        .filter(|(ev, _)| !matches!(ev, ListmodeEvent::Discrete { j, k, .. } if j == k))
        .collect();
    draws.sort_by(|x, y| cmp_events(&x.0, &y.0).then(x.1.t.total_cmp(&y.1.t)));
    let (events, labels) = draws.into_iter().unzip();
    lm.events = events;
    Ok((lm, labels))
}

pub fn write_labels(path: &Path, labels: &[EventLabel]) -> Result<()> {
    let mut s = String::new();
    for l in labels {
        s.push_str(&serde_json::to_string(l)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// CSV with a header line `# dynpet-listmode v1 mode=<c|d> T=.. M=.. N=.. d=..`
/// and rows `t,ax,ay[,az],bx,by[,bz]` or `i,j,k`.
pub fn write_listmode(lm: &Listmode, path: &Path) -> Result<()> {
    let mut s = String::new();
    let mode = if lm.mode == Mode::Continuous { "c" } else { "d" };
    writeln!(s, "# dynpet-listmode v1 mode={mode} T={} M={} N={} d={}", lm.t_end, lm.m, lm.n_bins, lm.dim).unwrap();
    for e in &lm.events {
        match e {
            ListmodeEvent::Continuous { t, a, b } => {
                if lm.dim == 2 {
                    writeln!(s, "{t},{},{},{},{}", a.x, a.y, b.x, b.y).unwrap();
                } else {
                    writeln!(s, "{t},{},{},{},{},{},{}", a.x, a.y, a.z, b.x, b.y, b.z).unwrap();
                }
            }
            ListmodeEvent::Discrete { i, j, k } => writeln!(s, "{i},{j},{k}").unwrap(),
        }
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn header_field<'a>(tokens: &'a [&'a str], key: &str) -> Result<&'a str> {
    tokens
        .iter()
        .find_map(|t| t.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .ok_or_else(|| Error::Listmode(format!("header is missing `{key}=`")))
}

fn parse<T: std::str::FromStr>(s: &str, row: usize, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Listmode(format!("row {row}: cannot parse {what} `{s}`")))
}

pub fn read_listmode(path: &Path) -> Result<Listmode> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::Listmode("empty listmode file".into()))?;
    let tokens: Vec<&str> = head.split_whitespace().collect();
    if tokens.len() < 3 || tokens[0] != "#" || tokens[1] != "dynpet-listmode" || tokens[2] != "v1" {
        return Err(Error::Listmode(format!("row 1: bad header `{head}`")));
    }
    let mode = match header_field(&tokens, "mode")? {
        "c" => Mode::Continuous,
        "d" => Mode::Discrete,
        other => return Err(Error::Listmode(format!("row 1: unknown mode `{other}`"))),
    };
    let t_end: f64 = parse(header_field(&tokens, "T")?, 1, "T")?;
    let m: usize = parse(header_field(&tokens, "M")?, 1, "M")?;
    let n_bins: usize = parse(header_field(&tokens, "N")?, 1, "N")?;
    let dim: usize = parse(header_field(&tokens, "d")?, 1, "d")?;
    if dim != 2 && dim != 3 {
        return Err(Error::Listmode(format!("row 1: dimension {dim}")));
    }
    let mut events = Vec::new();
    for (n, line) in lines.enumerate() {
        let row = n + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        match mode {
            Mode::Continuous => {
                if f.len() != 1 + 2 * dim {
                    return Err(Error::Listmode(format!("row {row}: expected {} fields, got {}", 1 + 2 * dim, f.len())));
                }
                let t: f64 = parse(f[0], row, "time")?;
                if !(t >= 0.0 && t <= t_end) {
                    return Err(Error::Listmode(format!("row {row}: time {t} outside [0, {t_end}]")));
                }
                let mut v = [0.0; 6];
                for c in 0..dim {
                    v[c] = parse(f[1 + c], row, "coordinate")?;
                    v[3 + c] = parse(f[1 + dim + c], row, "coordinate")?;
                }
                let a = Point::new(v[0], v[1], v[2]);
                let b = Point::new(v[3], v[4], v[5]);
                if a == b {
                    return Err(Error::Listmode(format!("row {row}: coincident endpoints")));
                }
                events.push(ListmodeEvent::Continuous { t, a, b });
            }
            Mode::Discrete => {
                if f.len() != 3 {
                    return Err(Error::Listmode(format!("row {row}: expected 3 fields, got {}", f.len())));
                }
                let i: usize = parse(f[0], row, "time bin")?;
                let j: usize = parse(f[1], row, "detector")?;
                let k: usize = parse(f[2], row, "detector")?;
                if i >= n_bins || j >= m || k >= m {
                    return Err(Error::Listmode(format!("row {row}: index out of range ({i},{j},{k})")));
                }
                if j == k {
                    return Err(Error::Listmode(format!("row {row}: diagonal detector pair")));
                }
                events.push(ListmodeEvent::Discrete { i, j, k });
            }
        }
    }
    Ok(Listmode { mode, dim, t_end, m, n_bins, events, seed: None })
}
