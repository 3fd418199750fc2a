//! Positron-range kernel: an isotropic Gaussian truncated at 4σ and
//! renormalized, or no kernel at all.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::geometry::{Point, ScannerGeometry};

/// Truncation radius in units of σ.
pub const TRUNCATION: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PositronKernel {
    None,
    Gaussian { sigma: f64 },
}

/// Mass of the standard normal in `d` dimensions inside radius 4.
fn truncated_mass(dim: usize) -> f64 {
    let r = TRUNCATION;
    match dim {
        1 => erf(r / 2f64.sqrt()),
        2 => 1.0 - (-0.5 * r * r).exp(),
        _ => erf(r / 2f64.sqrt()) - (2.0 / PI).sqrt() * r * (-0.5 * r * r).exp(),
    }
}

impl PositronKernel {
    /// Gaussian kernel checked against the geometry: `4σ ≤ δ/2`.
    pub fn gaussian(sigma: f64, geom: &ScannerGeometry) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Parameter(format!("kernel sigma must be positive, got {sigma}")));
        }
        if TRUNCATION * sigma > 0.5 * geom.delta * (1.0 + 1e-12) {
            return Err(Error::Parameter(format!(
                "kernel support 4σ = {} exceeds δ/2 = {}",
                TRUNCATION * sigma,
                0.5 * geom.delta
            )));
        }
        Ok(PositronKernel::Gaussian { sigma })
    }

    pub fn is_none(&self) -> bool {
        matches!(self, PositronKernel::None)
    }

    pub fn support_radius(&self) -> f64 {
        match self {
            PositronKernel::None => 0.0,
            PositronKernel::Gaussian { sigma } => TRUNCATION * sigma,
        }
    }

    /// Normalization constant `c` with `G(u) = c·exp(-|u|²/2σ²)` on the support.
    fn norm(&self, dim: usize) -> f64 {
        match self {
            PositronKernel::None => f64::INFINITY,
            PositronKernel::Gaussian { sigma } => {
                1.0 / ((2.0 * PI).powf(dim as f64 / 2.0) * sigma.powi(dim as i32) * truncated_mass(dim))
            }
        }
    }

    /// Peak value `G(0)`.
    pub fn peak(&self, dim: usize) -> f64 {
        self.norm(dim)
    }

    /// Kernel value at offset `u`.
    pub fn value(&self, dim: usize, u: &Point) -> f64 {
        match self {
            PositronKernel::None => 0.0,
            PositronKernel::Gaussian { sigma } => {
                let r2 = u.norm_squared();
                if r2 > (TRUNCATION * sigma).powi(2) {
                    0.0
                } else {
                    self.norm(dim) * (-0.5 * r2 / (sigma * sigma)).exp()
                }
            }
        }
    }

    /// Integral of the kernel along a line at distance `dist` from its center.
    pub fn line_integral(&self, dim: usize, dist: f64) -> f64 {
        match self {
            PositronKernel::None => 0.0,
            PositronKernel::Gaussian { sigma } => {
                let rmax = TRUNCATION * sigma;
                if dist >= rmax {
                    return 0.0;
                }
                let half = (rmax * rmax - dist * dist).sqrt();
                self.norm(dim)
                    * (-0.5 * dist * dist / (sigma * sigma)).exp()
                    * (2.0 * PI).sqrt()
                    * sigma
                    * erf(half / (2f64.sqrt() * sigma))
            }
        }
    }

    /// Offsets and weights of a midpoint quadrature over the support,
    /// `k` points per axis, weights summing to one.
    pub fn quadrature(&self, dim: usize, k: usize) -> Vec<(Point, f64)> {
        let sigma = match self {
            PositronKernel::None => return vec![(Point::zeros(), 1.0)],
            PositronKernel::Gaussian { sigma } => *sigma,
        };
        let k = k.max(1);
        let rmax = TRUNCATION * sigma;
        let step = 2.0 * rmax / k as f64;
        let coord = |i: usize| -rmax + (i as f64 + 0.5) * step;
        let mut out = Vec::new();
        let kz = if dim == 3 { k } else { 1 };
        for i in 0..k {
            for j in 0..k {
                for l in 0..kz {
                    let z = if dim == 3 { coord(l) } else { 0.0 };
                    let o = Point::new(coord(i), coord(j), z);
                    let r2 = o.norm_squared();
                    if r2 <= rmax * rmax {
                        out.push((o, (-0.5 * r2 / (sigma * sigma)).exp()));
                    }
                }
            }
        }
        let total: f64 = out.iter().map(|p| p.1).sum();
        for p in &mut out {
            p.1 /= total;
        }
        out
    }

    /// Draw one offset from the truncated kernel by rejection.
    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Point {
        match self {
            PositronKernel::None => Point::zeros(),
            PositronKernel::Gaussian { sigma } => loop {
                let mut o = Point::zeros();
                for c in 0..dim {
                    let z: f64 = StandardNormal.sample(rng);
                    o[c] = z * sigma;
                }
                if o.norm() <= TRUNCATION * sigma {
                    return o;
                }
            },
        }
    }
}
