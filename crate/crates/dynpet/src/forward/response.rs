//! Detection response of a single annihilation point.
//!
//! In 2D the set of emission angles sending the pair into the ordered cell
//! pair `(j, k)` is an interval computed exactly: the exit point `b(φ)`
//! moves monotonically around the ring as the direction angle `φ` turns, and
//! the entry point is `a(φ) = b(φ + π)`. In 3D directions are integrated with
//! a deterministic spherical lattice.

use std::f64::consts::PI;

use crate::forward::kernel::PositronKernel;
use crate::geometry::{direction_set, Point, ScannerGeometry};

/// Quadrature resolution for the detection operator.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Quadrature {
    /// Kernel offsets per axis.
    pub kernel_points: usize,
    /// Directions per point (3D only; 2D is exact).
    pub directions: usize,
}

impl Default for Quadrature {
    fn default() -> Self {
        Self { kernel_points: 11, directions: 4000 }
    }
}

/// Accumulate `weight · P[(a, b) ∈ Γ_j × Γ_k]` for an annihilation at `y`
/// into `out[j·M + k]`. Returns the mass that fell on diagonal pairs.
pub fn accumulate_point(geom: &ScannerGeometry, y: &Point, weight: f64, dirs: &[Point], out: &mut [f64]) -> f64 {
    if geom.dim == 2 {
        ring_pairs(geom, y, weight, out)
    } else {
        let m = geom.n_detectors();
        let w = weight / dirs.len() as f64;
        let mut lost = 0.0;
        for v in dirs {
            let (a, b) = geom.detect_ray_unchecked(y, v);
            let j = geom.detector_index_unchecked(&a);
            let k = geom.detector_index_unchecked(&b);
            if j == k {
                lost += w;
            } else {
                out[j * m + k] += w;
            }
        }
        lost
    }
}

fn ring_pairs(geom: &ScannerGeometry, y: &Point, weight: f64, out: &mut [f64]) -> f64 {
    let m = geom.n_detectors();
    let c = geom.center();
    let r = geom.radius_dd;
    let (ux, uy) = (y.x - c.x, y.y - c.y);
    let width = 2.0 * PI / m as f64;
    // direction angles towards the cell boundaries, unwrapped to increase
    let mut phi = Vec::with_capacity(m + 1);
    for k in 0..m {
        let al = k as f64 * width;
        let raw = (r * al.sin() - uy).atan2(r * al.cos() - ux);
        if k == 0 {
            phi.push(raw);
        } else {
            let prev: f64 = phi[k - 1];
            let mut d = (raw - prev).rem_euclid(2.0 * PI);
            if d == 0.0 {
                d = 0.0;
            }
            phi.push(prev + d);
        }
    }
    let start = phi[0];
    let stop = start + 2.0 * PI;
    phi.push(stop);
    // entry cell j is active on [φ_j - π, φ_{j+1} - π), shifted into [start, stop)
    let mut abreak: Vec<(f64, usize)> = (0..m)
        .map(|j| {
            let mut p = phi[j] - PI;
            while p < start {
                p += 2.0 * PI;
            }
            while p >= stop {
                p -= 2.0 * PI;
            }
            (p, j)
        })
        .collect();
    abreak.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut ia = 0;
    let mut cur_j = abreak[m - 1].1;
    while ia < m && abreak[ia].0 <= start {
        cur_j = abreak[ia].1;
        ia += 1;
    }
    let mut cur_k = 0;
    let mut ib = 1;
    let mut pos = start;
    let scale = weight / (2.0 * PI);
    let mut lost = 0.0;
    while pos < stop {
        let nb = phi[ib];
        let na = if ia < m { abreak[ia].0 } else { f64::INFINITY };
        let next = nb.min(na);
        let len = next - pos;
        if len > 0.0 {
            if cur_j == cur_k {
                lost += len * scale;
            } else {
                out[cur_j * m + cur_k] += len * scale;
            }
        }
        if na <= nb {
            cur_j = abreak[ia].1;
            ia += 1;
        }
        if nb <= na {
            cur_k = ib;
            ib += 1;
            if ib > m {
                break;
            }
        }
        pos = next;
    }
    lost
}

/// Dense `M × M` response of a point source at `y` blurred by `kernel`.
/// Diagonal entries are zero; the second value is the dropped diagonal mass.
pub fn point_response(
    geom: &ScannerGeometry,
    kernel: &PositronKernel,
    quad: &Quadrature,
    y: &Point,
) -> (Vec<f64>, f64) {
    let m = geom.n_detectors();
    let dirs = if geom.dim == 3 { direction_set(3, quad.directions) } else { Vec::new() };
    let offsets = kernel.quadrature(geom.dim, quad.kernel_points);
    point_response_with(geom, &offsets, &dirs, y, m)
}

pub fn point_response_with(
    geom: &ScannerGeometry,
    offsets: &[(Point, f64)],
    dirs: &[Point],
    y: &Point,
    m: usize,
) -> (Vec<f64>, f64) {
    let mut out = vec![0.0; m * m];
    let mut lost = 0.0;
    for (o, w) in offsets {
        lost += accumulate_point(geom, &(y + o), *w, dirs, &mut out);
    }
    (out, lost)
}

/// Density `g(a, b)` relating line measure `dθ ds` (with the uniform
/// direction law) to surface measure on `∂𝒟 × ∂𝒟`:
/// `g = cos ψ_a cos ψ_b / (|S^{d-1}| · |b - a|^{d-1})`, where `ψ` are the
/// angles between the chord and the surface normals.
pub fn pair_density_factor(geom: &ScannerGeometry, a: &Point, b: &Point) -> f64 {
    let c = geom.center();
    let d = b - a;
    let len = d.norm();
    if len == 0.0 {
        return 0.0;
    }
    let th = d / len;
    let na = (a - c).normalize();
    let nb = (b - c).normalize();
    let cos_a = th.dot(&na).abs();
    let cos_b = th.dot(&nb).abs();
    let sphere = if geom.dim == 2 { 2.0 * PI } else { 4.0 * PI };
    cos_a * cos_b / (sphere * len.powi(geom.dim as i32 - 1))
}

/// Supremum of `g` over all pairs on the ball.
pub fn pair_density_sup(geom: &ScannerGeometry) -> f64 {
    let r = geom.radius_dd;
    if geom.dim == 2 {
        // g = |b-a|/(8πR²) ≤ 2R/(8πR²)
        1.0 / (4.0 * PI * r)
    } else {
        1.0 / (16.0 * PI * r * r)
    }
}

/// Distance from `y` to the line through `a` with unit direction `theta`.
pub fn line_distance(y: &Point, a: &Point, theta: &Point) -> f64 {
    let u = y - a;
    (u - theta * u.dot(theta)).norm()
}

/// Continuous detection density at `(a, b)` of a unit point mass at `y`:
/// `g(a, b) · P[G * δ_y](θ(a, b), s(a, b))`.
pub fn point_pair_density(geom: &ScannerGeometry, kernel: &PositronKernel, y: &Point, a: &Point, b: &Point) -> f64 {
    let th = (b - a).normalize();
    pair_density_factor(geom, a, b) * kernel.line_integral(geom.dim, line_distance(y, a, &th))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::point2;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn centered_point_hits_antipodal_pairs() {
        let g = ScannerGeometry::ring(2, 0.8, 1.0, 8, 1, 1.0).unwrap();
        let mut out = vec![0.0; 64];
        let lost = ring_pairs(&g, &point2(0.0, 0.0), 1.0, &mut out);
        assert_eq!(lost, 0.0);
        for j in 0..8 {
            for k in 0..8 {
                let expect = if k == (j + 4) % 8 { 0.125 } else { 0.0 };
                assert!((out[j * 8 + k] - expect).abs() < 1e-12, "{j} {k} {}", out[j * 8 + k]);
            }
        }
    }

    /// Monte Carlo over uniform directions is the independent oracle for the
    /// exact angular intervals.
    #[test]
    fn offset_point_matches_monte_carlo() {
        let g = ScannerGeometry::ring(2, 0.8, 1.0, 8, 1, 1.0).unwrap();
        let y = point2(0.4, 0.0);
        let mut exact = vec![0.0; 64];
        ring_pairs(&g, &y, 1.0, &mut exact);
        let total: f64 = exact.iter().sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let n = 1_000_000;
        let mut mc = vec![0.0; 64];
        for _ in 0..n {
            let ang: f64 = rng.random::<f64>() * 2.0 * PI;
            let v = point2(ang.cos(), ang.sin());
            let (a, b) = g.detect_ray(&y, &v).unwrap();
            let j = g.detector_index_unchecked(&a);
            let k = g.detector_index_unchecked(&b);
            mc[j * 8 + k] += 1.0 / n as f64;
        }
        for i in 0..64 {
            assert!((exact[i] - mc[i]).abs() < 2e-3, "bin {i}: {} vs {}", exact[i], mc[i]);
        }
        // mirror symmetry about the x axis maps arc j to arc 7 - j
        for j in 0..8 {
            for k in 0..8 {
                assert!((exact[j * 8 + k] - exact[(7 - j) * 8 + 7 - k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_points_conserve_mass() {
        let g = ScannerGeometry::ring(2, 0.8, 1.0, 16, 1, 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let r = 0.9 * rng.random::<f64>().sqrt();
            let a = rng.random::<f64>() * 2.0 * PI;
            let y = point2(r * a.cos(), r * a.sin());
            let mut out = vec![0.0; 256];
            let lost = ring_pairs(&g, &y, 1.0, &mut out);
            assert_eq!(lost, 0.0);
            assert_relative_eq!(out.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            assert!(out.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn sphere_response_conserves_mass() {
        let g = ScannerGeometry::ring(3, 0.8, 1.0, 24, 1, 1.0).unwrap();
        let k = PositronKernel::Gaussian { sigma: 0.02 };
        let quad = Quadrature { kernel_points: 3, directions: 2000 };
        let (out, lost) = point_response(&g, &k, &quad, &Point::new(0.2, -0.1, 0.3));
        assert_relative_eq!(out.iter().sum::<f64>() + lost, 1.0, epsilon = 1e-12);
        assert!(lost < 1e-9);
    }

    #[test]
    fn pair_density_closed_form_2d() {
        let g = ScannerGeometry::ring(2, 0.8, 1.0, 8, 1, 1.0).unwrap();
        let a = point2(1.0, 0.0);
        let b = point2(0.3f64.cos(), 0.3f64.sin()) * -1.0;
        let len = (b - a).norm();
        assert_relative_eq!(pair_density_factor(&g, &a, &b), len / (8.0 * PI), epsilon = 1e-15);
        assert!(pair_density_factor(&g, &a, &b) <= pair_density_sup(&g));
    }
}
