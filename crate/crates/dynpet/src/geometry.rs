//! Scanner geometry: concentric balls `D ⊂ 𝒟`, detector cells on `∂𝒟`,
//! time bins, and the chord map `R(x, v)`.
//!
//! Points are stored as `Vector3` in both dimensions; in 2D the third
//! coordinate is zero and ignored.

use std::f64::consts::PI;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = Vector3<f64>;

/// Tolerance for "point lies on the detector surface".
pub const SURFACE_TOL: f64 = 1e-9;

/// One latitude zone of the 3D equal-area partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    /// Colatitude range `[theta_lo, theta_hi)`; the last zone is closed at π.
    pub theta_lo: f64,
    pub theta_hi: f64,
    /// Number of equal longitude sectors.
    pub count: usize,
    /// Global index of the first cell in this zone.
    pub first: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Detectors {
    /// `m` equal arcs, arc `j` covering angles `[j·2π/m, (j+1)·2π/m)`.
    Ring { m: usize },
    /// Recursive zonal equal-area partition of the sphere.
    Zonal { m: usize, zones: Vec<Zone> },
}

impl Detectors {
    pub fn count(&self) -> usize {
        match self {
            Detectors::Ring { m } => *m,
            Detectors::Zonal { m, .. } => *m,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScannerGeometry {
    pub dim: usize,
    pub center: [f64; 3],
    /// Radius of the reconstruction ball `D`.
    pub radius_d: f64,
    /// Radius of the detector ball `𝒟`.
    pub radius_dd: f64,
    pub delta: f64,
    pub detectors: Detectors,
    pub t_end: f64,
    pub n_bins: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineOfResponse {
    pub theta: Point,
    /// Foot point relative to the center, orthogonal to `theta`.
    pub s: Point,
    pub a: Point,
    pub b: Point,
}

pub fn point2(x: f64, y: f64) -> Point {
    Vector3::new(x, y, 0.0)
}

fn cap_area(theta: f64) -> f64 {
    2.0 * PI * (1.0 - theta.cos())
}

fn cap_colatitude(area: f64) -> f64 {
    (1.0 - area / (2.0 * PI)).clamp(-1.0, 1.0).acos()
}

/// Equal-area partition of the unit sphere into `m` cells: two polar caps
/// plus collars whose cell counts are rounded with carry.
pub fn zonal_partition(m: usize) -> Vec<Zone> {
    if m == 1 {
        return vec![Zone { theta_lo: 0.0, theta_hi: PI, count: 1, first: 0 }];
    }
    let area = 4.0 * PI / m as f64;
    let theta_c = cap_colatitude(area);
    if m == 2 {
        return vec![
            Zone { theta_lo: 0.0, theta_hi: theta_c, count: 1, first: 0 },
            Zone { theta_lo: theta_c, theta_hi: PI, count: 1, first: 1 },
        ];
    }
    let ideal = area.sqrt();
    let n_collars = (((PI - 2.0 * theta_c) / ideal).round() as usize).max(1);
    let fit = (PI - 2.0 * theta_c) / n_collars as f64;
    let mut counts = Vec::with_capacity(n_collars);
    let mut carry = 0.0;
    for i in 0..n_collars {
        let lo = theta_c + i as f64 * fit;
        let hi = theta_c + (i + 1) as f64 * fit;
        let ideal_count = (cap_area(hi) - cap_area(lo)) / area;
        let n = (ideal_count + carry).round().max(1.0);
        carry += ideal_count - n;
        counts.push(n as usize);
    }
    // Rounding with carry must reproduce m - 2 collar cells; fix any drift on
    // the last collar.
    let total: usize = counts.iter().sum();
    if total != m - 2 {
        let last = counts.last_mut().unwrap();
        *last = (*last as isize + (m as isize - 2 - total as isize)).max(1) as usize;
    }
    let mut zones = vec![Zone { theta_lo: 0.0, theta_hi: theta_c, count: 1, first: 0 }];
    let mut cells = 1usize;
    let mut lo = theta_c;
    for n in counts {
        cells += n;
        let hi = if cells == m - 1 { PI - theta_c } else { cap_colatitude(area * cells as f64) };
        zones.push(Zone { theta_lo: lo, theta_hi: hi, count: n, first: cells - n });
        lo = hi;
    }
    zones.push(Zone { theta_lo: lo, theta_hi: PI, count: 1, first: m - 1 });
    zones
}

impl ScannerGeometry {
    /// Concentric ring (2D) or sphere (3D) scanner with equal detector cells.
    pub fn ring(dim: usize, radius_d: f64, radius_dd: f64, m: usize, n_bins: usize, t_end: f64) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Geometry(format!("dimension must be 2 or 3, got {dim}")));
        }
        if !(radius_d > 0.0) || !(radius_dd > radius_d) || !radius_dd.is_finite() {
            return Err(Error::Geometry(format!(
                "need radius_Dd > radius_D > 0, got radius_D={radius_d}, radius_Dd={radius_dd}"
            )));
        }
        if m < 4 {
            return Err(Error::Geometry(format!("need at least 4 detector cells, got {m}")));
        }
        if n_bins == 0 || !(t_end > 0.0) || !t_end.is_finite() {
            return Err(Error::Geometry(format!("need n_bins >= 1 and T > 0, got {n_bins}, {t_end}")));
        }
        let detectors = if dim == 2 { Detectors::Ring { m } } else { Detectors::Zonal { m, zones: zonal_partition(m) } };
        Ok(Self {
            dim,
            center: [0.0; 3],
            radius_d,
            radius_dd,
            delta: radius_dd - radius_d,
            detectors,
            t_end,
            n_bins,
        })
    }

    pub fn n_detectors(&self) -> usize {
        self.detectors.count()
    }

    pub fn center(&self) -> Point {
        Vector3::new(self.center[0], self.center[1], self.center[2])
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.n_bins as f64
    }

    /// Time bin of `t`, half-open bins with `T` itself in the last bin.
    pub fn time_bin(&self, t: f64) -> Result<usize> {
        if !(t >= 0.0 && t <= self.t_end) {
            return Err(Error::OutOfDomain(format!("time {t} outside [0, {}]", self.t_end)));
        }
        Ok(((t / self.dt()) as usize).min(self.n_bins - 1))
    }

    /// `𝓗^{d-1}(∂𝒟)`: perimeter in 2D, area in 3D.
    pub fn boundary_measure(&self) -> f64 {
        if self.dim == 2 {
            2.0 * PI * self.radius_dd
        } else {
            4.0 * PI * self.radius_dd * self.radius_dd
        }
    }

    /// Surface measure of every detector cell.
    pub fn cell_measures(&self) -> Vec<f64> {
        let r = self.radius_dd;
        match &self.detectors {
            Detectors::Ring { m } => vec![2.0 * PI * r / *m as f64; *m],
            Detectors::Zonal { zones, .. } => {
                let mut out = Vec::new();
                for z in zones {
                    let band = 2.0 * PI * (z.theta_lo.cos() - z.theta_hi.cos()) * r * r;
                    out.extend(std::iter::repeat_n(band / z.count as f64, z.count));
                }
                out
            }
        }
    }

    /// Representative point `z_j` of every cell.
    pub fn cell_points(&self) -> Vec<Point> {
        let c = self.center();
        let r = self.radius_dd;
        match &self.detectors {
            Detectors::Ring { m } => (0..*m)
                .map(|j| {
                    let ang = (j as f64 + 0.5) * 2.0 * PI / *m as f64;
                    c + point2(r * ang.cos(), r * ang.sin())
                })
                .collect(),
            Detectors::Zonal { zones, .. } => {
                let mut out = Vec::new();
                for z in zones {
                    let th = if z.theta_lo == 0.0 && z.count == 1 {
                        0.0
                    } else if z.theta_hi == PI && z.count == 1 {
                        PI
                    } else {
                        0.5 * (z.theta_lo + z.theta_hi)
                    };
                    for i in 0..z.count {
                        let ph = (i as f64 + 0.5) * 2.0 * PI / z.count as f64;
                        out.push(c + Vector3::new(r * th.sin() * ph.cos(), r * th.sin() * ph.sin(), r * th.cos()));
                    }
                }
                out
            }
        }
    }

    /// Chord through `x` in direction `v`: returns `(a, b)` on `∂𝒟` with
    /// `(b - a)/|b - a| = v`.
    pub fn detect_ray(&self, x: &Point, v: &Point) -> Result<(Point, Point)> {
        let u = x - self.center();
        let lim = self.radius_d + 0.5 * self.delta;
        if u.norm() > lim * (1.0 + 1e-12) {
            return Err(Error::OutOfDomain(format!("|x - c| = {} exceeds radius_D + δ/2 = {lim}", u.norm())));
        }
        Ok(self.detect_ray_unchecked(x, v))
    }

    /// As [`detect_ray`](Self::detect_ray) without the domain check; `x` must
    /// lie strictly inside `𝒟` and `v` must be a unit vector.
    #[inline]
    pub fn detect_ray_unchecked(&self, x: &Point, v: &Point) -> (Point, Point) {
        let u = x - self.center();
        let uv = u.dot(v);
        let disc = (uv * uv - (u.norm_squared() - self.radius_dd * self.radius_dd)).max(0.0).sqrt();
        (x + v * (-uv - disc), x + v * (-uv + disc))
    }

    pub fn line_of_response(&self, a: &Point, b: &Point) -> Result<LineOfResponse> {
        self.check_surface(a)?;
        self.check_surface(b)?;
        let d = b - a;
        let len = d.norm();
        if len <= 1e-12 * self.radius_dd {
            return Err(Error::Geometry("coincident line-of-response endpoints".into()));
        }
        let theta = d / len;
        let rel = a - self.center();
        let s = rel - theta * rel.dot(&theta);
        Ok(LineOfResponse { theta, s, a: *a, b: *b })
    }

    fn check_surface(&self, p: &Point) -> Result<()> {
        let r = (p - self.center()).norm();
        if (r - self.radius_dd).abs() > SURFACE_TOL * self.radius_dd.max(1.0) {
            return Err(Error::OutOfDomain(format!(
                "point at radius {r} is not on the detector surface of radius {}",
                self.radius_dd
            )));
        }
        Ok(())
    }

    /// Index of the half-open detector cell containing `p`.
    pub fn detector_index(&self, p: &Point) -> Result<usize> {
        self.check_surface(p)?;
        Ok(self.detector_index_unchecked(p))
    }

    #[inline]
    pub fn detector_index_unchecked(&self, p: &Point) -> usize {
        let u = p - self.center();
        match &self.detectors {
            Detectors::Ring { m } => {
                let mut ang = u.y.atan2(u.x);
                if ang < 0.0 {
                    ang += 2.0 * PI;
                }
                let width = 2.0 * PI / *m as f64;
                ((ang / width) as usize).min(*m - 1)
            }
            Detectors::Zonal { zones, .. } => {
                let r = u.norm();
                let th = (u.z / r).clamp(-1.0, 1.0).acos();
                let zi = zones
                    .iter()
                    .position(|z| th >= z.theta_lo && th < z.theta_hi)
                    .unwrap_or(zones.len() - 1);
                let z = &zones[zi];
                if z.count == 1 {
                    return z.first;
                }
                let mut ph = u.y.atan2(u.x);
                if ph < 0.0 {
                    ph += 2.0 * PI;
                }
                let width = 2.0 * PI / z.count as f64;
                z.first + ((ph / width) as usize).min(z.count - 1)
            }
        }
    }

    /// Whether `x` lies in the closed ball `D`.
    pub fn in_d(&self, x: &Point) -> bool {
        (x - self.center()).norm() <= self.radius_d * (1.0 + 1e-12)
    }

    /// Same geometry with all lengths divided by `lambda` and times by `theta`.
    pub fn rescaled(&self, theta: f64, lambda: f64) -> Self {
        let mut g = self.clone();
        g.center = [self.center[0] / lambda, self.center[1] / lambda, self.center[2] / lambda];
        g.radius_d /= lambda;
        g.radius_dd /= lambda;
        g.delta /= lambda;
        g.t_end /= theta;
        g
    }
}

/// Orthogonal projection of `x` onto the complement of unit vector `theta`.
pub fn project_perp(x: &Point, theta: &Point) -> Point {
    x - theta * x.dot(theta)
}

/// Deterministic, nearly uniform directions on the unit sphere (Fibonacci
/// lattice), or `q` equally spaced angles on the circle in 2D.
pub fn direction_set(dim: usize, q: usize) -> Vec<Point> {
    if dim == 2 {
        return (0..q)
            .map(|i| {
                let a = (i as f64 + 0.5) * 2.0 * PI / q as f64;
                point2(a.cos(), a.sin())
            })
            .collect();
    }
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..q)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / q as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let ph = golden * i as f64;
            Vector3::new(r * ph.cos(), r * ph.sin(), z)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ring8() -> ScannerGeometry {
        ScannerGeometry::ring(2, 0.8, 1.0, 8, 10, 1.0).unwrap()
    }

    #[test]
    fn ring_geometry_basic() {
        let g = ring8();
        assert_relative_eq!(g.delta, 0.2, epsilon = 1e-15);
        let cells = g.cell_measures();
        assert_eq!(cells.len(), 8);
        for c in cells {
            // arc angle π/4 on the unit circle
            assert_relative_eq!(c, PI / 4.0, epsilon = 1e-15);
        }
        assert!((g.n_bins as f64 * g.dt() - g.t_end).abs() <= f64::EPSILON);
    }

    #[test]
    fn ring_geometry_rejects_bad_input() {
        assert!(ScannerGeometry::ring(2, 1.0, 1.0, 8, 10, 1.0).is_err());
        assert!(ScannerGeometry::ring(4, 0.5, 1.0, 8, 10, 1.0).is_err());
        assert!(ScannerGeometry::ring(2, 0.5, 1.0, 3, 10, 1.0).is_err());
        assert!(ScannerGeometry::ring(2, 0.5, 1.0, 8, 0, 1.0).is_err());
        assert!(ScannerGeometry::ring(2, -0.5, 1.0, 8, 1, 1.0).is_err());
    }

    #[test]
    fn zonal_cells_have_equal_area() {
        for m in [4usize, 5, 12, 48, 100, 301] {
            let g = ScannerGeometry::ring(3, 0.8, 1.0, m, 10, 1.0).unwrap();
            let cells = g.cell_measures();
            assert_eq!(cells.len(), m);
            let total: f64 = cells.iter().sum();
            assert_relative_eq!(total, 4.0 * PI, max_relative = 1e-12);
            for c in &cells {
                assert_relative_eq!(*c, 4.0 * PI / m as f64, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn detect_ray_examples() {
        let g = ring8();
        let (a, b) = g.detect_ray(&point2(0.0, 0.0), &point2(1.0, 0.0)).unwrap();
        assert_relative_eq!(a.x, -1.0, epsilon = 1e-15);
        assert_relative_eq!(b.x, 1.0, epsilon = 1e-15);
        let (a, b) = g.detect_ray(&point2(0.0, 0.5), &point2(1.0, 0.0)).unwrap();
        // circle-line intersection: x = ±sqrt(1 - 0.25)
        let xs = (1.0f64 - 0.25).sqrt();
        assert_relative_eq!(a.x, -xs, epsilon = 1e-12);
        assert_relative_eq!(b.x, xs, epsilon = 1e-12);
        assert_relative_eq!(a.y, 0.5, epsilon = 1e-15);
        assert!(g.detect_ray(&point2(0.0, 0.95), &point2(1.0, 0.0)).is_err());
    }

    #[test]
    fn line_of_response_examples() {
        let g = ring8();
        let l = g.line_of_response(&point2(-1.0, 0.0), &point2(1.0, 0.0)).unwrap();
        assert_relative_eq!(l.theta.x, 1.0);
        assert!(l.s.norm() < 1e-15);
        let xs = 0.75f64.sqrt();
        let l = g.line_of_response(&point2(-xs, 0.5), &point2(xs, 0.5)).unwrap();
        assert_relative_eq!(l.theta.x, 1.0, epsilon = 1e-15);
        assert_relative_eq!(l.s.y, 0.5, epsilon = 1e-15);
        assert!(l.s.x.abs() < 1e-15);
        assert!(g.line_of_response(&point2(1.0, 0.0), &point2(1.0, 0.0)).is_err());
        assert!(g.line_of_response(&point2(0.5, 0.0), &point2(1.0, 0.0)).is_err());
    }

    #[test]
    fn detector_index_examples() {
        let g = ring8();
        assert_eq!(g.detector_index(&point2(0.1f64.cos(), 0.1f64.sin())).unwrap(), 0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        // exactly on the boundary angle π/4: half-open cells put it in cell 1
        assert_eq!(g.detector_index(&point2(h, h)).unwrap(), 1);
        assert!(g.detector_index(&point2(0.5, 0.0)).is_err());
        // just below 2π wraps into the last cell
        assert_eq!(g.detector_index(&point2(1.0, -1e-12)).unwrap(), 7);
    }

    #[test]
    fn zonal_index_consistent_with_cell_points() {
        let g = ScannerGeometry::ring(3, 0.8, 1.0, 48, 10, 1.0).unwrap();
        for (j, z) in g.cell_points().iter().enumerate() {
            assert_eq!(g.detector_index(z).unwrap(), j);
        }
    }

    #[test]
    fn rescaled_geometry() {
        let g = ring8().rescaled(2.0, 4.0);
        assert_relative_eq!(g.radius_dd, 0.25);
        assert_relative_eq!(g.delta, 0.05);
        assert_relative_eq!(g.t_end, 0.5);
    }
}
