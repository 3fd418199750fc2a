//! Number of events the minimizer explains as scatter, as q grows from 0 to
//! the value above which every event is scatter.

use dynpet::debias::{count_scatter_curve, sweep_top_q};
use dynpet::forward::events::EventData;
use dynpet::forward::response::Quadrature;
use dynpet::geometry::point2;
use dynpet::listmode::{sample_poisson_listmode, GroundTruth, Particle, SampleParams};
use dynpet::objective::ModelParams;
use dynpet::solver_grid::GridSolverConfig;
use dynpet::{Mode, PositronKernel, ScannerGeometry, VoxelGrid};

fn main() -> dynpet::Result<()> {
    let geom = ScannerGeometry::ring(2, 0.8, 1.0, 16, 4, 1.0)?;
    let grid = VoxelGrid::new(&geom, 12)?;
    let kernel = PositronKernel::gaussian(0.02, &geom)?;
    let truth = GroundTruth { particles: vec![Particle::fixed(40.0, point2(0.1, -0.2), &geom)], t_half: 1.0 };
    let (lm, labels) = sample_poisson_listmode(&truth, &geom, &SampleParams { p_s: 0.3, p_d: 0.5, kernel, mode: Mode::Continuous }, 9)?;
    let data = EventData::continuous(&grid, &kernel, &Quadrature::default(), &lm, 1.0)?;
    let base = ModelParams { q: 1.0, beta: 0.01, p_s: 0.3, p_d: 0.5 };
    let top = sweep_top_q(&data, &base);
    let qs: Vec<f64> = (0..8).map(|i| top * i as f64 / 7.0).collect();
    let cfg = GridSolverConfig { max_iters: 3000, tol: 1e-5, ..Default::default() };
    println!("{} events, {} truly scattered", lm.len(), labels.iter().filter(|l| l.scattered).count());
    for p in count_scatter_curve(&grid, &data, &base, &qs, &cfg, 1e-3)? {
        println!("q = {:9.3}: N_s in [{:3}, {:3}], J = {:.4}", p.q, p.n_s_lo, p.n_s_hi, p.min_j);
    }
    Ok(())
}
