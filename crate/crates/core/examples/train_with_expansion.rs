//! Trains the desk model, grows its experts 2x halfway and prints the
//! metrics. Outputs go to `runs/example`.
//!
//! `cargo run --release --example train_with_expansion [steps]`

use widegrow::harness::{run_training, RunConfig};

fn main() -> widegrow::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(400);
    let cfg = RunConfig::parse(&format!(
        "steps = {steps}
expansion.step = {}
expansion.inner_ratio = 2
expansion.state_policy = asymmetric_reset
expansion.rewarm = true
output.dir = runs/example
",
        steps / 2
    ))?;
    let out = run_training(&cfg)?;
    println!("step  train_loss  eval_loss  lr_original  lr_new  symmetry");
    for r in &out.records {
        println!(
            "{:>4}  {:>10.4}  {:>9.4}  {:>11.3e}  {:>6.3e}  {:.3e}",
            r.step, r.train_loss, r.eval_loss, r.lr_original, r.lr_new, r.max_symmetry_distance
        );
    }
    if let Some(e) = &out.summary.expansion {
        println!(
            "grown at step {}: {} -> {} parameters, eval {:.10} -> {:.10}",
            e.step, e.params_before, e.params_after, e.eval_before, e.eval_after
        );
    }
    Ok(())
}
