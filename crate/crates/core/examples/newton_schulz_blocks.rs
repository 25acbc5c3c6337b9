//! Newton-Schulz keeps duplicated row and column blocks duplicated.
//!
//! `cargo run --example newton_schulz_blocks`

use widegrow::diagnostics::{gram_block_check, DuplicatedAxis};
use widegrow::numerics::{sample_gaussian, Rng};
use widegrow::optim::newton_schulz;

fn main() -> widegrow::Result<()> {
    let mut rng = Rng::new(2);
    let a = sample_gaussian(&mut rng, &[16, 48], 0.0, 1.0)?;
    let stacked = a.concat(&a, 0)?;
    let x = stacked.scale(1.0 / stacked.frobenius());
    let coeffs = [3.4445, -4.7750, 2.0315];
    for iters in [1, 2, 5, 10] {
        let y = newton_schulz(&x, iters, coeffs)?;
        let gap = gram_block_check(&y, DuplicatedAxis::Rows)?;
        let top = y.slice2(0, 0, 16)?;
        let bottom = y.slice2(0, 16, 32)?;
        println!(
            "{iters:>2} iterations: block gap {gap:.1e}, halves equal: {}",
            top == bottom
        );
    }
    let side = a.concat(&a.scale(1.0 + 1e-3), 0)?;
    let y = newton_schulz(&side.scale(1.0 / side.frobenius()), 5, coeffs)?;
    println!("perturbed copy: block gap {:.1e}", gram_block_check(&y, DuplicatedAxis::Rows)?);
    Ok(())
}
