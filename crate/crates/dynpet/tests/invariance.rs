use dynpet::forward::events::EventData;
use dynpet::forward::response::Quadrature;
use dynpet::geometry::point2;
use dynpet::listmode::{sample_poisson_listmode, GroundTruth, Particle, SampleParams};
use dynpet::objective::{evaluate_j, ModelParams};
use dynpet::rng::stream;
use dynpet::scaling::random_feasible_measure;
use dynpet::{Mode, PositronKernel, ScannerGeometry, VoxelGrid};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn setup(mode: Mode) -> (VoxelGrid, dynpet::listmode::Listmode, PositronKernel) {
    let geom = ScannerGeometry::ring(2, 0.8, 1.0, 10, 4, 1.0).unwrap();
    let grid = VoxelGrid::new(&geom, 8).unwrap();
    let kernel = PositronKernel::gaussian(0.02, &geom).unwrap();
    let truth = GroundTruth { particles: vec![Particle::linear(40.0, point2(-0.3, 0.0), point2(0.5, 0.2), &geom)], t_half: 1.0 };
    let sp = SampleParams { p_s: 0.2, p_d: 0.6, kernel, mode };
    let (lm, _) = sample_poisson_listmode(&truth, &geom, &sp, 5).unwrap();
    (grid, lm, kernel)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    // the objective depends on the events only as a multiset
    #[test]
    fn objective_ignores_event_order(seed in 0u64..1000, continuous in any::<bool>(), q in 0.5f64..50.0) {
        let mode = if continuous { Mode::Continuous } else { Mode::Discrete };
        let (grid, lm, kernel) = setup(mode);
        let quad = Quadrature::default();
        let build = |lm: &dynpet::listmode::Listmode| match mode {
            Mode::Continuous => EventData::continuous(&grid, &kernel, &quad, lm, 1.0).unwrap(),
            Mode::Discrete => {
                let op = dynpet::forward::operator::DetectionOperator::assemble(&grid, &kernel, &quad).unwrap();
                EventData::discrete(&grid, &op, &kernel, &quad, lm, 1.0).unwrap()
            }
        };
        let mut rng = stream(seed, 0);
        let m = random_feasible_measure(&grid, 50.0, &mut rng);
        let p = ModelParams { q, beta: 0.01, p_s: 0.2, p_d: 0.6 };
        let a = evaluate_j(&grid, &m, &build(&lm), &p).total;
        let mut shuffled = lm.clone();
        shuffled.events.shuffle(&mut rng);
        let b = evaluate_j(&grid, &m, &build(&shuffled), &p).total;
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{a} vs {b}");
    }
}
