//! Grows a model 2x on the expert, hidden and both axes with copied,
//! rescaled weights and compares logits before and after.
//!
//! `cargo run --example function_preserving_expansion`

use widegrow::expansion::{expand_model, ExpansionPlan};
use widegrow::harness::{Corpus, CorpusSpec};
use widegrow::model::{forward, Model, ModelConfig};

fn main() -> widegrow::Result<()> {
    let model = Model::init(ModelConfig::default(), 0)?;
    let batch = Corpus::new(&CorpusSpec::default(), model.config().vocab)?.batch(3, 4, 64)?;
    let before = forward(&model, &batch)?;
    println!("original: {} parameters, loss {:.12}", model.parameter_count(), before.loss);

    for (name, plan) in [
        ("inner 2x", ExpansionPlan::inner(2.0)),
        ("hidden 2x", ExpansionPlan::hidden(2.0)),
        ("joint 2x", ExpansionPlan::joint(2.0, 2.0)),
    ] {
        let (big, map) = expand_model(&model, &plan)?;
        map.check_covers(&big)?;
        let after = forward(&big, &batch)?;
        let diff = before
            .logits
            .iter()
            .zip(&after.logits)
            .map(|(a, b)| a.max_abs_diff(b))
            .collect::<widegrow::Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        println!(
            "{name:<10} {:>7} parameters, loss {:.12}, max |logit diff| {diff:.2e}",
            big.parameter_count(),
            after.loss
        );
    }

    let mut unscaled = ExpansionPlan::inner(2.0);
    unscaled.expert.scale = false;
    let (big, _) = expand_model(&model, &unscaled)?;
    println!("inner 2x without rescale: loss {:.12}", forward(&big, &batch)?.loss);
    Ok(())
}
