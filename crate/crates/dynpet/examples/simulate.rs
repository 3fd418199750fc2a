//! Two tracer particles crossing a 2D ring scanner; writes the listmode file
//! and prints how many events were scattered.

use dynpet::geometry::point2;
use dynpet::listmode::{sample_poisson_listmode, write_listmode, GroundTruth, Particle, SampleParams};
use dynpet::{Mode, PositronKernel, ScannerGeometry};

fn main() -> dynpet::Result<()> {
    let geom = ScannerGeometry::ring(2, 0.8, 1.0, 16, 10, 1.0)?;
    let truth = GroundTruth {
        particles: vec![
            Particle::linear(70.0, point2(-0.4, -0.2), point2(0.5, 0.0), &geom),
            Particle::fixed(50.0, point2(0.3, 0.35), &geom),
        ],
        t_half: 1.0,
    };
    let params = SampleParams { p_s: 0.2, p_d: 0.6, kernel: PositronKernel::gaussian(0.02, &geom)?, mode: Mode::Continuous };
    let (lm, labels) = sample_poisson_listmode(&truth, &geom, &params, 42)?;
    let scattered = labels.iter().filter(|l| l.scattered).count();
    println!("expected {:.1} events, drew {} ({} scattered)", truth.expected_count(&geom, 0.2, 0.6), lm.len(), scattered);
    for e in lm.events.iter().take(5) {
        println!("  {e:?}");
    }
    let path = std::env::temp_dir().join("dynpet-simulate.csv");
    write_listmode(&lm, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}
