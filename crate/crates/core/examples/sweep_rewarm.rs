//! Grid over re-warmup length and peak ratio on a short run.
//! Results go to `runs/sweep_rewarm/sweep.csv`.
//!
//! `cargo run --release --example sweep_rewarm`

use widegrow::harness::{parse_grid, run_sweep, RunConfig};

fn main() -> widegrow::Result<()> {
    let base = RunConfig::parse(
        "steps = 200
batch.sequences = 4
batch.length = 64
expansion.step = 100
expansion.inner_ratio = 2
expansion.rewarm = true
output.dir = runs/sweep_rewarm
",
    )?;
    let axes = parse_grid("expansion.rewarm.steps = 10 | 40\nexpansion.rewarm.ratio = 1.0 | 1.3 | 2.0\n")?;
    for row in run_sweep(&base, &axes)? {
        println!("{:<48} {:.5} {}", row.overrides, row.final_eval_loss, row.status);
    }
    Ok(())
}
