//! How fan-in growth changes output RMS, with and without the rescale.
//!
//! `cargo run --example rms_scaling`

use widegrow::expansion::{fan_in_expand, fan_in_scale_factor, fan_out_expand, InitRegime};
use widegrow::numerics::{rms_of, sample_gaussian, Rng};

fn main() -> widegrow::Result<()> {
    let (d_in, d_out, samples) = (256, 32, 4000);
    let mut rng = Rng::new(1);
    let w = sample_gaussian(&mut rng, &[d_out, d_in], 0.0, 1.0 / (d_in as f64).sqrt())?;
    let x = sample_gaussian(&mut rng, &[d_in, samples], 0.0, 1.0)?;
    let base = rms_of(w.matmul(&x)?.data());

    println!("factors for d -> 2d: independent {:.4}, both copied {:.4}",
        fan_in_scale_factor(false, d_in, 2 * d_in)?,
        fan_in_scale_factor(true, d_in, 2 * d_in)?);
    println!("{:<8} {:<8} {:>10} {:>10}", "inputs", "weights", "unscaled", "scaled");
    for upstream in [InitRegime::Copy, InitRegime::Random] {
        let xg = fan_out_expand(&x, 2.0, upstream, &mut rng)?;
        for regime in [InitRegime::Copy, InitRegime::Random, InitRegime::Zero] {
            let copied = upstream == InitRegime::Copy;
            let raw = fan_in_expand(&w, 2.0, regime, copied, &mut rng, false)?;
            let scaled = fan_in_expand(&w, 2.0, regime, copied, &mut rng, true)?;
            println!(
                "{:<8} {:<8} {:>10.4} {:>10.4}",
                upstream.to_string(),
                regime.to_string(),
                rms_of(raw.matmul(&xg)?.data()) / base,
                rms_of(scaled.matmul(&xg)?.data()) / base
            );
        }
    }
    Ok(())
}
