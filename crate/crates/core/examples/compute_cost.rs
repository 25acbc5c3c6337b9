//! Training compute saved by growing a model halfway through.
//!
//! `cargo run --example compute_cost`

use widegrow::diagnostics::{active_parameter_count, compute_cost};
use widegrow::model::ModelConfig;

fn main() -> widegrow::Result<()> {
    let (tokens, grow_at) = (200e9, 100e9);
    println!("{:<10} {:>12} {:>12} {:>8}", "target", "scratch", "grown", "saved");
    for (name, n_large) in [("inner", 751e6), ("hidden", 900e6), ("joint", 1.5e9)] {
        let r = compute_cost(450e6, n_large, tokens, grow_at)?;
        println!(
            "{name:<10} {:>12.3e} {:>12.3e} {:>7.1}%",
            r.c_scratch,
            r.c_star,
            100.0 * r.flops_saved
        );
    }

    let small = ModelConfig::default();
    let large = ModelConfig {
        d_ffn: 2 * small.d_ffn,
        ..small.clone()
    };
    let (ns, nl) = (active_parameter_count(&small), active_parameter_count(&large));
    let r = compute_cost(ns as f64, nl as f64, 2000.0 * 1024.0, 1000.0 * 1024.0)?;
    println!("desk model {ns} -> {nl} active parameters: {:.1}% saved", 100.0 * r.flops_saved);
    Ok(())
}
