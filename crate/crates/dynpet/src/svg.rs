//! Self-contained SVG plots: per-slice mass heatmaps, trajectory overlays
//! and line charts.

use std::fmt::Write;
use std::path::Path;

use crate::error::Result;
use crate::forward::grid::{unravel, GridMeasure, VoxelGrid};
use crate::geometry::ScannerGeometry;
use crate::listmode::Particle;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn open(s: &mut String, w: f64, h: f64) {
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// White to dark red.
fn heat(v: f64) -> String {
    let v = v.clamp(0.0, 1.0);
    let r = (255.0 - 80.0 * v) as u8;
    let g = (255.0 * (1.0 - v).powf(0.8)) as u8;
    let b = (255.0 * (1.0 - v).powf(0.6)) as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

/// One panel per time slice; 3D grids are summed along the last axis.
pub fn slice_heatmaps(grid: &VoxelGrid, m: &GridMeasure) -> String {
    let nx = grid.nx;
    let nt = grid.nt();
    let cell = (160.0 / nx as f64).max(2.0);
    let side = cell * nx as f64;
    let cols = nt.min(5);
    let rows = nt.div_ceil(cols);
    let (w, h) = (cols as f64 * (side + 12.0) + 12.0, rows as f64 * (side + 28.0) + 12.0);
    let mut s = String::new();
    open(&mut s, w, h);
    let mut images = vec![vec![0.0; nx * nx]; nt];
    for (t, img) in images.iter_mut().enumerate() {
        for (a, &lin) in grid.active.iter().enumerate() {
            let idx = unravel(lin, nx, grid.dim());
            img[idx[1] * nx + idx[0]] += m.rho[t * grid.nv() + a];
        }
    }
    let top = images.iter().flatten().cloned().fold(0.0, f64::max);
    for (t, img) in images.iter().enumerate() {
        let x0 = 12.0 + (t % cols) as f64 * (side + 12.0);
        let y0 = 24.0 + (t / cols) as f64 * (side + 28.0);
        writeln!(s, r#"<text x="{x0}" y="{}">t = {t}</text>"#, y0 - 6.0).unwrap();
        writeln!(s, r##"<rect x="{x0}" y="{y0}" width="{side}" height="{side}" fill="none" stroke="#999"/>"##).unwrap();
        for iy in 0..nx {
            for ix in 0..nx {
                let v = img[iy * nx + ix];
                if v <= 0.0 || top <= 0.0 {
                    continue;
                }
                // y axis points up
                let (x, y) = (x0 + ix as f64 * cell, y0 + (nx - 1 - iy) as f64 * cell);
                writeln!(s, r#"<rect x="{x:.2}" y="{y:.2}" width="{cell:.2}" height="{cell:.2}" fill="{}"/>"#, heat(v / top)).unwrap();
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Knot paths in the plane of the first two coordinates; `truth` dashed.
pub fn trajectories(geom: &ScannerGeometry, truth: &[Particle], recon: &[Particle]) -> String {
    let size = 360.0;
    let c = geom.center();
    let r = geom.radius_dd;
    let map = |x: f64, y: f64| (size / 2.0 + (x - c.x) / r * (size / 2.0 - 10.0), size / 2.0 - (y - c.y) / r * (size / 2.0 - 10.0));
    let mut s = String::new();
    open(&mut s, size, size);
    let rad = |q: f64| q / r * (size / 2.0 - 10.0);
    writeln!(s, r##"<circle cx="{0}" cy="{0}" r="{1:.2}" fill="none" stroke="#444"/>"##, size / 2.0, rad(r)).unwrap();
    writeln!(s, r##"<circle cx="{0}" cy="{0}" r="{1:.2}" fill="none" stroke="#aaa" stroke-dasharray="3 3"/>"##, size / 2.0, rad(geom.radius_d)).unwrap();
    for (set, dashed) in [(truth, true), (recon, false)] {
        for (i, p) in set.iter().enumerate() {
            let pts: Vec<String> = p.knots.iter().map(|k| {
                let (x, y) = map(k.x, k.y);
                format!("{x:.2},{y:.2}")
            }).collect();
            let colour = if dashed { "#555" } else { PALETTE[i % PALETTE.len()] };
            let dash = if dashed { r#" stroke-dasharray="5 3""# } else { "" };
            writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="2"{dash}/>"#, pts.join(" ")).unwrap();
            if let Some(k) = p.knots.first() {
                let (x, y) = map(k.x, k.y);
                writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{colour}"/>"#).unwrap();
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

pub struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Line chart; non-finite points are skipped, `log_y` drops values ≤ 0.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> String {
    let (w, h) = (520.0, 340.0);
    let (l, r, t, b) = (64.0, 16.0, 28.0, 40.0);
    let tf = |y: f64| if log_y { y.log10() } else { y };
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().cloned())
        .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
        .map(|(x, y)| (x, tf(y)))
        .collect();
    let mut s = String::new();
    open(&mut s, w, h);
    writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, escape(title)).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, l + (w - l - r) / 2.0, h - 8.0, escape(x_label)).unwrap();
    let ylab = if log_y { format!("{y_label} (log10)") } else { y_label.to_string() };
    writeln!(s, r#"<text x="14" y="{0}" transform="rotate(-90 14 {0})" text-anchor="middle">{1}</text>"#, t + (h - t - b) / 2.0, escape(&ylab)).unwrap();
    writeln!(s, r##"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="#444"/>"##, w - l - r, h - t - b).unwrap();
    if pts.is_empty() {
        s.push_str("</svg>\n");
        return s;
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &pts {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| l + (x - x0) / (x1 - x0) * (w - l - r);
    let py = |y: f64| h - b - (y - y0) / (y1 - y0) * (h - t - b);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{:.3}</text>"#, px(xv), h - b + 14.0, xv).unwrap();
        writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.3}</text>"#, l - 4.0, py(yv) + 4.0, yv).unwrap();
    }
    for (i, se) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let line: Vec<String> = se
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite() && (!log_y || *y > 0.0))
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(tf(*y))))
            .collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#, line.join(" ")).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#, l + 8.0, t + 14.0 + 13.0 * i as f64, escape(se.name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

pub fn write(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg)?;
    Ok(())
}
