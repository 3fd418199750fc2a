//! Grid reconstruction of a moving particle and the invariants of the result.

use dynpet::forward::events::EventData;
use dynpet::forward::response::Quadrature;
use dynpet::geometry::point2;
use dynpet::listmode::{sample_poisson_listmode, GroundTruth, Particle, SampleParams};
use dynpet::objective::{continuity, ModelParams};
use dynpet::solver_grid::{reconstruct_grid, GridSolverConfig};
use dynpet::{Mode, PositronKernel, ScannerGeometry, VoxelGrid};

fn main() -> dynpet::Result<()> {
    env_logger::init();
    let geom = ScannerGeometry::ring(2, 0.8, 1.0, 16, 6, 1.0)?;
    let grid = VoxelGrid::new(&geom, 16)?;
    let kernel = PositronKernel::gaussian(0.02, &geom)?;
    let truth = GroundTruth { particles: vec![Particle::linear(80.0, point2(-0.3, 0.0), point2(0.6, 0.0), &geom)], t_half: 1.0 };
    let sp = SampleParams { p_s: 0.2, p_d: 0.6, kernel, mode: Mode::Continuous };
    let (lm, _) = sample_poisson_listmode(&truth, &geom, &sp, 1)?;
    let data = EventData::continuous(&grid, &kernel, &Quadrature::default(), &lm, 1.0)?;
    let params = ModelParams { q: 20.0, beta: 0.002, p_s: 0.2, p_d: 0.6 };
    let cfg = GridSolverConfig { max_iters: 4000, tol: 1e-5, ..Default::default() };
    let (m, j, diag) = reconstruct_grid(&grid, &data, &params, &cfg)?;
    println!("{} events, {} iterations, residual {:.2e}", lm.len(), diag.iterations, diag.gap_estimate);
    println!("J = {:.6} (mass {:.4}, -log {:.4}, transport {:.4})", j.total, j.fidelity_mass, j.neg_log, j.bb);
    println!("min rho {:.2e}, continuity l1 {:.2e}", m.min_rho(), continuity(&grid, &m).l1);
    for (t, s) in m.slice_masses().iter().enumerate() {
        // heaviest voxel of each slice against the true knot
        let sl = m.slice(t);
        let best = (0..sl.len()).max_by(|a, b| sl[*a].total_cmp(&sl[*b])).unwrap();
        let c = grid.centers[best];
        let k = truth.particles[0].knots[t];
        println!("  t={t}: mass {s:.4}, peak at ({:+.2}, {:+.2}), truth ({:+.2}, {:+.2})", c.x, c.y, k.x, k.y);
    }
    Ok(())
}
