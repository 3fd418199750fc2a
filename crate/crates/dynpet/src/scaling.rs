//! Nondimensionalization by a time scale `θ`, a length scale `λ` and a
//! mass scale `μ`, and the resulting choice of the kinetic weight `β`.
//!
//! ```text
//! β̂ = βμλ²/θ    T̂_half = T_half/(μθ)    T̂ = T/θ    D̂ = D/λ
//! ```

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::error::{Error, Result};
use crate::forward::events::EventData;
use crate::forward::grid::{GridMeasure, VoxelGrid};
use crate::forward::kernel::PositronKernel;
use crate::forward::response::Quadrature;
use crate::forward::Mode;
use crate::geometry::ScannerGeometry;
use crate::listmode::{sample_poisson_listmode, GroundTruth, Listmode, ListmodeEvent, Particle, SampleParams};
use crate::objective::{evaluate_j, is_feasible, ModelParams};
use crate::transport::fill_min_energy_flux;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleTriple {
    pub theta: f64,
    pub lambda: f64,
    pub mu: f64,
}

impl ScaleTriple {
    pub fn new(theta: f64, lambda: f64, mu: f64) -> Result<Self> {
        let s = Self { theta, lambda, mu };
        s.validate()?;
        Ok(s)
    }

    pub fn identity() -> Self {
        Self { theta: 1.0, lambda: 1.0, mu: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("theta", self.theta), ("lambda", self.lambda), ("mu", self.mu)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("scale {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Events mapped by `(t, a, b) ↦ (t/θ, a/λ, b/λ)`.
pub fn rescale_measurement(lm: &Listmode, s: &ScaleTriple) -> Result<Listmode> {
    s.validate()?;
    if lm.mode != Mode::Continuous {
        return Err(Error::Listmode(
            "discrete listmode holds detector indices, which do not rescale; use continuous mode".into(),
        ));
    }
    let mut out = lm.clone();
    out.t_end = lm.t_end / s.theta;
    out.events = lm
        .events
        .iter()
        .map(|e| match e {
            ListmodeEvent::Continuous { t, a, b } => ListmodeEvent::Continuous { t: t / s.theta, a: a / s.lambda, b: b / s.lambda },
            other => *other,
        })
        .collect();
    Ok(out)
}

/// `(ρ̂, η̂) = S̄(ρ/μ, θη/(μλ))` on the rescaled grid. Grid cells hold
/// spacetime masses and face fluxes, so `ρ̂ = ρ/(μθ)` and `η̂ = η/(μλ)`
/// cell by cell; the voxel and bin counts are unchanged.
pub fn rescale_solution(grid: &VoxelGrid, m: &GridMeasure, s: &ScaleTriple) -> Result<(VoxelGrid, GridMeasure)> {
    s.validate()?;
    m.check_shape(grid)?;
    let g = grid.rescaled(s.theta, s.lambda);
    let a = 1.0 / (s.mu * s.theta);
    let b = 1.0 / (s.mu * s.lambda);
    if a == 1.0 && b == 1.0 {
        return Ok((g, m.clone()));
    }
    Ok((g, m.scaled(a, b)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RescaledParameters {
    pub beta: f64,
    pub t_half: f64,
    pub t_end: f64,
    pub radius_d: f64,
}

pub fn rescaled_parameters(beta: f64, t_half: f64, t_end: f64, radius_d: f64, s: &ScaleTriple) -> RescaledParameters {
    RescaledParameters {
        beta: beta * s.mu * s.lambda * s.lambda / s.theta,
        t_half: t_half / (s.mu * s.theta),
        t_end: t_end / s.theta,
        radius_d: radius_d / s.lambda,
    }
}

pub fn rescale_kernel(k: &PositronKernel, s: &ScaleTriple) -> PositronKernel {
    match k {
        PositronKernel::None => PositronKernel::None,
        PositronKernel::Gaussian { sigma } => PositronKernel::Gaussian { sigma: sigma / s.lambda },
    }
}

/// `ρ̂† = S̄ρ†/μ` with `T̂_half = T_half/(μθ)`: knots divided by `λ`,
/// slice masses by `μ`.
pub fn rescale_ground_truth(gt: &GroundTruth, s: &ScaleTriple) -> GroundTruth {
    GroundTruth {
        particles: gt
            .particles
            .iter()
            .map(|p| Particle { mass: p.mass / s.mu, knots: p.knots.iter().map(|k| k / s.lambda).collect() })
            .collect(),
        t_half: gt.t_half / (s.mu * s.theta),
    }
}

/// Continuous-mode event densities pick up the Jacobian `θλ^{2(d−1)}` of the
/// event coordinates, so `J − Ĵ = |E| log(θλ^{2(d−1)})`; every other term is
/// invariant.
pub fn likelihood_shift(dim: usize, n_events: f64, s: &ScaleTriple) -> f64 {
    n_events * (s.theta.ln() + 2.0 * (dim as f64 - 1.0) * s.lambda.ln())
}

/// A continuous-mode reconstruction problem with everything needed to
/// evaluate `J` on its grid.
#[derive(Clone, Debug)]
pub struct Problem {
    pub grid: VoxelGrid,
    pub kernel: PositronKernel,
    pub listmode: Listmode,
    pub params: ModelParams,
    pub t_half: f64,
}

impl Problem {
    pub fn event_data(&self, quad: &Quadrature) -> Result<EventData> {
        EventData::continuous(&self.grid, &self.kernel, quad, &self.listmode, self.t_half)
    }

    pub fn rescaled(&self, s: &ScaleTriple) -> Result<Problem> {
        s.validate()?;
        let r = rescaled_parameters(self.params.beta, self.t_half, self.grid.geom.t_end, self.grid.geom.radius_d, s);
        Ok(Problem {
            grid: self.grid.rescaled(s.theta, s.lambda),
            kernel: rescale_kernel(&self.kernel, s),
            listmode: rescale_measurement(&self.listmode, s)?,
            params: ModelParams { beta: r.beta, ..self.params },
            t_half: r.t_half,
        })
    }
}

/// Random positive slices of a common mass `mass·T`, joined by the least
/// energy flux. Feasible by construction.
pub fn random_feasible_measure<R: Rng + ?Sized>(grid: &VoxelGrid, mass: f64, rng: &mut R) -> GridMeasure {
    let mut m = GridMeasure::zeros(grid);
    let nv = grid.nv();
    let per_slice = mass * grid.dt();
    for t in 0..grid.nt() {
        let sl = m.slice_mut(t);
        sl.iter_mut().for_each(|x| *x = 0.05 + rng.random::<f64>());
        let tot: f64 = sl.iter().sum();
        sl.iter_mut().for_each(|x| *x *= per_slice / tot);
    }
    debug_assert_eq!(m.rho.len(), nv * grid.nt());
    fill_min_energy_flux(grid, &mut m);
    m
}

#[derive(Clone, Debug, Serialize)]
pub struct InvarianceRow {
    pub scale: ScaleTriple,
    /// `J − Ĵ` per pair.
    pub differences: Vec<f64>,
    pub expected: f64,
    /// `max |d_i − d_0| / max |J_i|`.
    pub spread: f64,
    /// `max |d_i − expected| / max |J_i|`.
    pub offset_error: f64,
}

/// Evaluate `J` on every pair and `Ĵ` on its rescaled image for each scale.
pub fn functional_invariance(problem: &Problem, quad: &Quadrature, pairs: &[GridMeasure], scales: &[ScaleTriple]) -> Result<Vec<InvarianceRow>> {
    let data = problem.event_data(quad)?;
    let mut js = Vec::with_capacity(pairs.len());
    for m in pairs {
        if !is_feasible(&problem.grid, m) {
            return Err(Error::Parameter("invariance check needs feasible pairs".into()));
        }
        js.push(evaluate_j(&problem.grid, m, &data, &problem.params).total);
    }
    let scale_j = js.iter().fold(0.0f64, |a, j| a.max(j.abs())).max(1.0);
    let mut rows = Vec::with_capacity(scales.len());
    for s in scales {
        let hat = problem.rescaled(s)?;
        let hat_data = hat.event_data(quad)?;
        let mut differences = Vec::with_capacity(pairs.len());
        for (m, j) in pairs.iter().zip(&js) {
            let (_, mh) = rescale_solution(&problem.grid, m, s)?;
            differences.push(j - evaluate_j(&hat.grid, &mh, &hat_data, &hat.params).total);
        }
        let expected = likelihood_shift(problem.grid.dim(), data.total_weight(), s);
        let d0 = differences.first().copied().unwrap_or(0.0);
        let spread = differences.iter().map(|d| (d - d0).abs()).fold(0.0, f64::max) / scale_j;
        let offset_error = differences.iter().map(|d| (d - expected).abs()).fold(0.0, f64::max) / scale_j;
        rows.push(InvarianceRow { scale: *s, differences, expected, spread, offset_error });
    }
    Ok(rows)
}

/// Per-bin count statistics of two samplers over disjoint seed ranges.
#[derive(Clone, Debug, Serialize)]
pub struct LawComparison {
    pub seeds: u64,
    /// `(time bin, detector j, detector k)` with `j < k`.
    pub bins: Vec<(usize, usize, usize)>,
    pub mean_original: Vec<f64>,
    pub mean_rescaled: Vec<f64>,
    /// Two-sample z statistic per bin.
    pub z: Vec<f64>,
}

impl LawComparison {
    pub fn max_abs_z(&self) -> f64 {
        self.z.iter().fold(0.0, |a, z| a.max(z.abs()))
    }
}

/// Compare `S_{θ,λ}` applied to samples of the original problem with samples
/// drawn directly from the rescaled one. Events are binned on the rescaled
/// geometry into time bins × unordered detector pairs.
pub fn measurement_law(gt: &GroundTruth, geom: &ScannerGeometry, sp: &SampleParams, s: &ScaleTriple, seeds: u64, seed0: u64) -> Result<LawComparison> {
    let geom_hat = geom.rescaled(s.theta, s.lambda);
    let gt_hat = rescale_ground_truth(gt, s);
    let sp_cont = SampleParams { mode: Mode::Continuous, kernel: sp.kernel, ..*sp };
    let sp_hat = SampleParams { kernel: rescale_kernel(&sp.kernel, s), ..sp_cont };
    let m = geom.n_detectors();
    let nb = geom.n_bins;
    let index = |i: usize, j: usize, k: usize| (i * m + j.min(k)) * m + j.max(k);
    let mut sums = [vec![0.0; nb * m * m], vec![0.0; nb * m * m]];
    let mut squares = sums.clone();
    for r in 0..seeds {
        let (lm, _) = sample_poisson_listmode(gt, geom, &sp_cont, seed0 + r)?;
        let mapped = rescale_measurement(&lm, s)?.binned(&geom_hat)?;
        let (lm_hat, _) = sample_poisson_listmode(&gt_hat, &geom_hat, &sp_hat, seed0 + seeds + r)?;
        let direct = lm_hat.binned(&geom_hat)?;
        for (side, list) in [mapped, direct].iter().enumerate() {
            let mut counts = vec![0.0; nb * m * m];
            for e in &list.events {
                if let ListmodeEvent::Discrete { i, j, k } = e {
                    counts[index(*i, *j, *k)] += 1.0;
                }
            }
            for (b, c) in counts.iter().enumerate() {
                sums[side][b] += c;
                squares[side][b] += c * c;
            }
        }
    }
    let n = seeds as f64;
    let mut out = LawComparison { seeds, bins: Vec::new(), mean_original: Vec::new(), mean_rescaled: Vec::new(), z: Vec::new() };
    for i in 0..nb {
        for j in 0..m {
            for k in j + 1..m {
                let b = index(i, j, k);
                let mean = [sums[0][b] / n, sums[1][b] / n];
                let var: Vec<f64> = (0..2).map(|h| (squares[h][b] / n - mean[h] * mean[h]) * n / (n - 1.0).max(1.0)).collect();
                let se = ((var[0] + var[1]) / n).sqrt();
                let z = if se > 0.0 { (mean[0] - mean[1]) / se } else if mean[0] == mean[1] { 0.0 } else { f64::INFINITY };
                out.bins.push((i, j, k));
                out.mean_original.push(mean[0]);
                out.mean_rescaled.push(mean[1]);
                out.z.push(z);
            }
        }
    }
    Ok(out)
}

/// Monotone piecewise-linear table of `β̂`, clamped outside its range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaTable {
    pub points: Vec<(f64, f64)>,
}

impl BetaTable {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Parameter("beta table is empty".into()));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite() || *y < 0.0) {
            return Err(Error::Parameter("beta table entries must be finite with nonnegative values".into()));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        if points.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Parameter("beta table arguments must be distinct".into()));
        }
        Ok(Self { points })
    }

    pub fn constant(v: f64) -> Self {
        Self { points: vec![(0.0, v)] }
    }

    /// Two columns `argument,value`; a non-numeric first line is a header.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut pts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed = (cols.len() == 2).then(|| (cols[0].parse::<f64>(), cols[1].parse::<f64>()));
            match parsed {
                Some((Ok(x), Ok(y))) => pts.push((x, y)),
                _ if i == 0 => continue,
                _ => {
                    return Err(Error::Config { path: format!("{}:{}", path.display(), i + 1), msg: format!("expected `argument,value`, got `{line}`") })
                }
            }
        }
        Self::new(pts)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let p = &self.points;
        if p.len() == 1 {
            return p[0].1;
        }
        if x <= p[0].0 || x >= p[p.len() - 1].0 {
            let (lo, hi) = (p[0].0, p[p.len() - 1].0);
            if x < lo || x > hi {
                warn!("beta table argument {x} outside [{lo}, {hi}], clamped");
            }
            return if x <= lo { p[0].1 } else { p[p.len() - 1].1 };
        }
        let i = p.partition_point(|q| q.0 <= x) - 1;
        let (x0, y0) = p[i];
        let (x1, y1) = p[i + 1];
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }
}

/// `β = β̂(v T_half/(l‖ρ†_t‖)) / (T_half v²)` for typical speed `v`, length
/// `l` and slice mass `‖ρ†_t‖`.
pub fn beta_heuristic(v: f64, l: f64, mass: f64, t_half: f64, table: &BetaTable) -> Result<f64> {
    for (name, x) in [("speed", v), ("length", l), ("mass", mass), ("half-life", t_half)] {
        if !(x > 0.0) || !x.is_finite() {
            return Err(Error::Parameter(format!("{name} must be positive, got {x}")));
        }
    }
    Ok(table.eval(v * t_half / (l * mass)) / (t_half * v * v))
}
