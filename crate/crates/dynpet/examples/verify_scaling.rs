//! Rescaling time, length and mass changes the functional by a constant
//! only: `J − Ĵ = |E| log(θλ^{2(d−1)})`.

use dynpet::forward::response::Quadrature;
use dynpet::geometry::point2;
use dynpet::listmode::{sample_poisson_listmode, GroundTruth, Particle, SampleParams};
use dynpet::objective::ModelParams;
use dynpet::rng::stream;
use dynpet::scaling::{functional_invariance, random_feasible_measure, Problem, ScaleTriple};
use dynpet::{Mode, PositronKernel, ScannerGeometry, VoxelGrid};

fn main() -> dynpet::Result<()> {
    let geom = ScannerGeometry::ring(2, 0.8, 1.0, 12, 4, 1.0)?;
    let grid = VoxelGrid::new(&geom, 10)?;
    let kernel = PositronKernel::gaussian(0.02, &geom)?;
    let truth = GroundTruth { particles: vec![Particle::linear(30.0, point2(-0.2, 0.1), point2(0.3, 0.0), &geom)], t_half: 1.0 };
    let sp = SampleParams { p_s: 0.2, p_d: 0.6, kernel, mode: Mode::Continuous };
    let (lm, _) = sample_poisson_listmode(&truth, &geom, &sp, 2)?;
    let problem = Problem { grid: grid.clone(), kernel, listmode: lm, params: ModelParams { q: 2.0, beta: 0.05, p_s: 0.2, p_d: 0.6 }, t_half: 1.0 };
    let mut rng = stream(0, 0);
    let pairs: Vec<_> = (0..5).map(|_| random_feasible_measure(&grid, 30.0, &mut rng)).collect();
    let scales = [ScaleTriple::new(2.0, 0.5, 3.0)?, ScaleTriple::new(0.7, 1.9, 0.6)?];
    for row in functional_invariance(&problem, &Quadrature::default(), &pairs, &scales)? {
        let s = row.scale;
        println!("theta {} lambda {} mu {}: J - Ĵ = {:.12} (predicted {:.12}), spread {:.1e}", s.theta, s.lambda, s.mu, row.differences[0], row.expected, row.spread);
    }
    Ok(())
}
