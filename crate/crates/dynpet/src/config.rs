//! Versioned JSON run configuration. Unknown keys are rejected.
//!
//! ```json
//! {
//!   "version": 1,
//!   "geometry": { "dim": 2, "radius_d": 0.8, "radius_dd": 1.0, "detectors": 16, "time_bins": 10, "t_end": 1.0 },
//!   "model": { "p_s": 0.2, "p_d": 0.6, "q": "heuristic", "beta": 0.01, "sigma": 0.01, "t_half": 1.0, "mode": "continuous" },
//!   "truth": { "particles": [ { "mass": 50.0, "start": [-0.3, 0.0], "velocity": [0.4, 0.0] } ] },
//!   "solver": { "kind": "grid", "nx": 32 }
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::kernel::PositronKernel;
use crate::forward::response::Quadrature;
use crate::forward::Mode;
use crate::geometry::{Point, ScannerGeometry};
use crate::listmode::{GroundTruth, Particle, SampleParams};
use crate::solver_grid::GridSolverConfig;
use crate::solver_particles::ParticleSolverConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub version: u32,
    pub geometry: GeometryConfig,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthConfig>,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingConfig>,
    #[serde(default)]
    pub io: IoConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub dim: usize,
    pub radius_d: f64,
    pub radius_dd: f64,
    pub detectors: usize,
    pub time_bins: usize,
    pub t_end: f64,
}

impl GeometryConfig {
    pub fn build(&self) -> Result<ScannerGeometry> {
        ScannerGeometry::ring(self.dim, self.radius_d, self.radius_dd, self.detectors, self.time_bins, self.t_end)
            .map_err(|e| Error::Config { path: "geometry".into(), msg: e.to_string() })
    }
}

/// A number or the string `"heuristic"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QChoice {
    Value(f64),
    Named(Heuristic),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heuristic {
    Heuristic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaChoice {
    Value(f64),
    Heuristic { heuristic: BetaHeuristicConfig },
}

/// Inputs of the `β̂`-table heuristic. The slice mass is estimated from the
/// event count when absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaHeuristicConfig {
    pub table: PathBuf,
    pub speed: f64,
    pub length: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mass: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub p_s: f64,
    pub p_d: f64,
    pub q: QChoice,
    pub beta: BetaChoice,
    /// Positron range; `null` means no kernel (discrete mode only).
    #[serde(default)]
    pub sigma: Option<f64>,
    pub t_half: f64,
    pub mode: Mode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub particles: Vec<ParticleConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum ParticleConfig {
    Linear { mass: f64, start: Vec<f64>, velocity: Vec<f64> },
    Knots { mass: f64, knots: Vec<Vec<f64>> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    #[default]
    Grid,
    Particles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub nx: usize,
    pub seed: u64,
    pub quadrature: Quadrature,
    pub grid: GridSolverConfig,
    pub particles: ParticleSolverConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            kind: SolverKind::Grid,
            nx: 32,
            seed: 0,
            quadrature: Quadrature::default(),
            grid: GridSolverConfig::default(),
            particles: ParticleSolverConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub points: usize,
    /// Top of the sweep; `None` uses the value above which every event is scatter.
    pub q_max: Option<f64>,
    /// Relative band of the scatter classification.
    pub band: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { points: 12, q_max: None, band: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    /// `{"continuous": {"g0": ..}}` or `{"discrete": {"cells": ..}}`.
    pub variant: ToyVariantConfig,
    pub p_s: f64,
    /// Events at the source position.
    pub m: usize,
    /// Scattered event positions.
    pub scattered: Vec<f64>,
    #[serde(default)]
    pub x0: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum ToyVariantConfig {
    Continuous { g0: f64 },
    Discrete { cells: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScalingConfig {
    pub pairs: usize,
    pub triples: usize,
    /// Scales are drawn log-uniformly from `[lo, hi]`.
    pub range: (f64, f64),
    /// Explicit triples `[θ, λ, μ]` checked in addition to the random ones.
    pub extra: Vec<[f64; 3]>,
    /// Seeds of the measurement-law comparison; `0` skips it.
    pub law_seeds: u64,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self { pairs: 20, triples: 5, range: (0.5, 2.0), extra: Vec::new(), law_seeds: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    /// Listmode input of `reconstruct` and `sweep-q`; defaults to `<out>/listmode.csv`.
    pub listmode: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn cfg_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Config { path: path.into(), msg: msg.into() }
}

fn point(v: &[f64], dim: usize, path: &str) -> Result<Point> {
    if v.len() != dim {
        return Err(cfg_err(path, format!("expected {dim} coordinates, got {}", v.len())));
    }
    let mut p = Point::zeros();
    p.as_mut_slice()[..dim].copy_from_slice(v);
    Ok(p)
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(text).map_err(|e| cfg_err("<root>", e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(&path.display().to_string(), e.to_string()))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config { path: p, msg } => Error::Config { path: format!("{}: {p}", path.display()), msg },
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(cfg_err("version", format!("unsupported version {}, expected {CONFIG_VERSION}", self.version)));
        }
        self.geometry.build()?;
        let m = &self.model;
        for (name, v) in [("model.p_s", m.p_s), ("model.p_d", m.p_d)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(cfg_err(name, format!("must lie in (0, 1], got {v}")));
            }
        }
        if m.p_s + m.p_d > 1.0 + 1e-12 {
            return Err(cfg_err("model", format!("p_s + p_d = {} exceeds 1", m.p_s + m.p_d)));
        }
        if let QChoice::Value(q) = m.q {
            if !(q > 0.0) || !q.is_finite() {
                return Err(cfg_err("model.q", format!("must be positive, got {q}")));
            }
        }
        match &m.beta {
            BetaChoice::Value(b) if !(*b > 0.0) || !b.is_finite() => return Err(cfg_err("model.beta", format!("must be positive, got {b}"))),
            BetaChoice::Heuristic { heuristic: h } => {
                for (name, v) in [("speed", h.speed), ("length", h.length), ("mass", h.mass.unwrap_or(1.0))] {
                    if !(v > 0.0) {
                        return Err(cfg_err(&format!("model.beta.heuristic.{name}"), format!("must be positive, got {v}")));
                    }
                }
            }
            _ => {}
        }
        if !(m.t_half > 0.0) {
            return Err(cfg_err("model.t_half", format!("must be positive, got {}", m.t_half)));
        }
        match m.sigma {
            Some(s) if !(s > 0.0) => return Err(cfg_err("model.sigma", format!("must be positive or null, got {s}"))),
            None if m.mode == Mode::Continuous => return Err(cfg_err("model.sigma", "continuous mode needs a positron kernel")),
            _ => {}
        }
        self.kernel()?;
        if let Some(t) = &self.truth {
            self.ground_truth_from(t)?;
        }
        if self.solver.nx < 2 {
            return Err(cfg_err("solver.nx", "must be at least 2"));
        }
        if let Some(s) = &self.sweep {
            if s.points < 2 {
                return Err(cfg_err("sweep.points", "need at least two points"));
            }
            if s.q_max.is_some_and(|q| !(q > 0.0)) {
                return Err(cfg_err("sweep.q_max", "must be positive"));
            }
        }
        if let Some(t) = &self.toy {
            if !(t.q_min >= 0.0 && t.q_max > t.q_min) || t.points < 2 {
                return Err(cfg_err("toy", "need 0 ≤ q_min < q_max and at least two points"));
            }
        }
        if let Some(s) = &self.scaling {
            if !(s.range.0 > 0.0 && s.range.1 >= s.range.0) {
                return Err(cfg_err("scaling.range", "need 0 < lo ≤ hi"));
            }
            if s.extra.iter().flatten().any(|v| !(*v > 0.0)) {
                return Err(cfg_err("scaling.extra", "scales must be positive"));
            }
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<PositronKernel> {
        match self.model.sigma {
            None => Ok(PositronKernel::None),
            Some(s) => PositronKernel::gaussian(s, &self.geometry.build()?).map_err(|e| cfg_err("model.sigma", e.to_string())),
        }
    }

    pub fn sample_params(&self) -> Result<SampleParams> {
        Ok(SampleParams { p_s: self.model.p_s, p_d: self.model.p_d, kernel: self.kernel()?, mode: self.model.mode })
    }

    pub fn ground_truth(&self) -> Result<GroundTruth> {
        let t = self.truth.as_ref().ok_or_else(|| cfg_err("truth", "this command needs a ground-truth block"))?;
        self.ground_truth_from(t)
    }

    fn ground_truth_from(&self, t: &TruthConfig) -> Result<GroundTruth> {
        let g = self.geometry.build()?;
        let dim = g.dim;
        let mut particles = Vec::with_capacity(t.particles.len());
        for (i, p) in t.particles.iter().enumerate() {
            let path = format!("truth.particles[{i}]");
            let part = match p {
                ParticleConfig::Linear { mass, start, velocity } => {
                    Particle::linear(*mass, point(start, dim, &format!("{path}.start"))?, point(velocity, dim, &format!("{path}.velocity"))?, &g)
                }
                ParticleConfig::Knots { mass, knots } => {
                    let k = knots.iter().enumerate().map(|(n, v)| point(v, dim, &format!("{path}.knots[{n}]"))).collect::<Result<Vec<_>>>()?;
                    Particle { mass: *mass, knots: k }
                }
            };
            particles.push(part);
        }
        let gt = GroundTruth { particles, t_half: self.model.t_half };
        gt.validate(&g).map_err(|e| cfg_err("truth", e.to_string()))?;
        Ok(gt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const DEMO: &str = r#"{
        "version": 1,
        "geometry": { "dim": 2, "radius_d": 0.8, "radius_dd": 1.0, "detectors": 16, "time_bins": 10, "t_end": 1.0 },
        "model": { "p_s": 0.2, "p_d": 0.6, "q": "heuristic", "beta": 0.01, "sigma": 0.01, "t_half": 1.0, "mode": "continuous" },
        "truth": { "particles": [ { "mass": 50.0, "start": [-0.3, 0.0], "velocity": [0.4, 0.0] } ] },
        "solver": { "kind": "grid", "nx": 16, "grid": { "max_iters": 500 } }
    }"#;

    #[test]
    fn parse_and_round_trip() {
        let c = Config::from_json(DEMO).unwrap();
        assert_eq!(c.model.q, QChoice::Named(Heuristic::Heuristic));
        assert_eq!(c.solver.grid.max_iters, 500);
        assert_eq!(c.solver.grid.tol, GridSolverConfig::default().tol);
        let again = Config::from_json(&c.to_json()).unwrap();
        assert_eq!(again, c);
        assert_eq!(again.to_json(), c.to_json());
        assert_eq!(c.ground_truth().unwrap().particles[0].knots.len(), 10);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let extra = DEMO.replace("\"t_half\": 1.0,", "\"t_half\": 1.0, \"colour\": 3,");
        assert!(matches!(Config::from_json(&extra), Err(Error::Config { .. })));
        let bad = DEMO.replace("\"p_d\": 0.6", "\"p_d\": 0.9");
        let err = Config::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("model"), "{err}");
        let bad = DEMO.replace("\"version\": 1", "\"version\": 7");
        assert!(Config::from_json(&bad).unwrap_err().to_string().contains("version"));
        let bad = DEMO.replace("[-0.3, 0.0]", "[-0.3]");
        assert!(Config::from_json(&bad).unwrap_err().to_string().contains("truth.particles[0].start"));
    }

    #[test]
    fn beta_heuristic_block() {
        let h = DEMO.replace("\"beta\": 0.01", r#""beta": { "heuristic": { "table": "beta.csv", "speed": 0.4, "length": 0.1 } }"#);
        let c = Config::from_json(&h).unwrap();
        assert!(matches!(c.model.beta, BetaChoice::Heuristic { .. }));
        assert_eq!(Config::from_json(&c.to_json()).unwrap(), c);
    }
}
