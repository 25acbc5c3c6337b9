//! Saves a grown model with Muon state, reloads it and saves it again.
//!
//! `cargo run --example checkpoint_roundtrip`

use widegrow::expansion::{expand_model, ExpansionPlan};
use widegrow::harness::Checkpoint;
use widegrow::model::{Model, ModelConfig};
use widegrow::optim::{expand_states, OptimizerKind, OptimizerState, StatePolicy};

fn main() -> widegrow::Result<()> {
    let model = Model::init(ModelConfig::default(), 0)?;
    let state = OptimizerState::new(OptimizerKind::Muon, model.params());
    let (big, regions) = expand_model(&model, &ExpansionPlan::joint(2.0, 1.5))?;
    let state = expand_states(&state, &regions, StatePolicy::AsymmetricReset)?;
    let ck = Checkpoint {
        step: 10,
        config_text: String::new(),
        model: big,
        regions,
        optimizer: Some(state),
    };
    let dir = std::env::temp_dir().join("widegrow-checkpoint-example");
    let (a, b) = (dir.join("first"), dir.join("second"));
    ck.save(&a)?;
    Checkpoint::load(&a)?.save(&b)?;
    for f in ["manifest.json", "tensors.bin"] {
        let same = std::fs::read(a.join(f))? == std::fs::read(b.join(f))?;
        println!("{f}: {} bytes, identical after reload: {same}", std::fs::metadata(a.join(f))?.len());
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
