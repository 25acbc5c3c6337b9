//! Copied experts stay identical under symmetric optimizer state and
//! drift apart once new regions get fresh state.
//!
//! `cargo run --example symmetry_lock`

use widegrow::diagnostics::symmetry_distance;
use widegrow::expansion::ExpansionPlan;
use widegrow::harness::{ExpansionEvent, RunConfig, Trainer};
use widegrow::optim::{OptimizerKind, StatePolicy};

fn main() -> widegrow::Result<()> {
    println!("{:<8} {:<18} {:>14}", "optim", "state policy", "max |w - donor|");
    for optimizer in [OptimizerKind::AdamW, OptimizerKind::Muon] {
        for policy in [StatePolicy::CopyStates, StatePolicy::DropAll, StatePolicy::AsymmetricReset] {
            let mut plan = ExpansionPlan::inner(2.0);
            plan.state_policy = policy;
            plan.rewarm = None;
            let cfg = RunConfig {
                steps: 80,
                batch_sequences: 4,
                batch_length: 64,
                probe_interval: 1000,
                eval_sequences: 2,
                optimizer,
                expansion: Some(ExpansionEvent { step: 20, plan }),
                ..RunConfig::default()
            };
            let mut t = Trainer::new(&cfg)?;
            t.run()?;
            let div = symmetry_distance(t.model(), t.regions())?.max_abs();
            println!("{:<8} {:<18} {div:>14.3e}", optimizer.to_string(), policy.to_string());
        }
    }
    Ok(())
}
