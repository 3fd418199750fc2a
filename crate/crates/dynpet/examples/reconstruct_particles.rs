//! Sparse trajectory reconstruction: the particle solver inserts shortest
//! paths and refines masses and knots.

use dynpet::forward::events::EventData;
use dynpet::forward::response::Quadrature;
use dynpet::geometry::point2;
use dynpet::listmode::{sample_poisson_listmode, GroundTruth, Particle, SampleParams};
use dynpet::objective::ModelParams;
use dynpet::solver_particles::{reconstruct_particles, ParticleSolverConfig};
use dynpet::{Mode, PositronKernel, ScannerGeometry, VoxelGrid};

fn main() -> dynpet::Result<()> {
    env_logger::init();
    let geom = ScannerGeometry::ring(2, 0.8, 1.0, 16, 8, 1.0)?;
    let grid = VoxelGrid::new(&geom, 16)?;
    let kernel = PositronKernel::gaussian(0.02, &geom)?;
    let truth = GroundTruth {
        particles: vec![
            Particle::linear(60.0, point2(-0.45, -0.3), point2(0.4, 0.0), &geom),
            Particle::linear(60.0, point2(0.3, 0.4), point2(0.0, -0.3), &geom),
        ],
        t_half: 1.0,
    };
    let sp = SampleParams { p_s: 0.1, p_d: 0.7, kernel, mode: Mode::Continuous };
    let (lm, _) = sample_poisson_listmode(&truth, &geom, &sp, 5)?;
    let data = EventData::continuous(&grid, &kernel, &Quadrature::default(), &lm, 1.0)?;
    let params = ModelParams { q: 30.0, beta: 0.01, p_s: 0.1, p_d: 0.7 };
    let (set, j) = reconstruct_particles(&grid, &data, &params, &ParticleSolverConfig::default());
    println!("{} events -> {} particles, J = {:.6}", lm.len(), set.len(), j.total);
    for p in &set.particles {
        let (a, b) = (p.knots[0], p.knots[p.knots.len() - 1]);
        println!("  mass {:.2}: ({:+.2}, {:+.2}) -> ({:+.2}, {:+.2})", p.mass, a.x, a.y, b.x, b.y);
    }
    Ok(())
}
