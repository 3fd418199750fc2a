//! Two-mass toy model: below the threshold the minimizer puts mass on the
//! scattered events, above it that mass vanishes.

use dynpet::debias::{bisect_threshold, brute_force_toy, solve_toy, ToyModel, ToyVariant};

fn main() -> dynpet::Result<()> {
    let toy = ToyModel::new(ToyVariant::Continuous { g0: 2.0 }, 0.5, 0.0, 11, vec![0.2, 0.4, 0.6, 0.8])?;
    println!("analytic threshold q* = {}", toy.threshold()?);
    for q in [0.05, 0.1, 0.15, 0.2, 0.3] {
        let (a, b) = solve_toy(&toy, q);
        let (ba, bb, _) = brute_force_toy(&toy, q, 400, 4);
        println!("q = {q:.2}: alpha = {a:.6}, beta = {b:.6}   (grid search {ba:.4}, {bb:.4})");
    }
    let q = bisect_threshold(0.0, 1.0, 1e-8, |q| solve_toy(&toy, q).1 == 0.0);
    println!("bisected threshold {q:.8}");
    Ok(())
}
