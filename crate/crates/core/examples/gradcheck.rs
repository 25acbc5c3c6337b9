//! Central-difference check of every parameter gradient on a micro model.
//!
//! `cargo run --example gradcheck`

use widegrow::harness::{Corpus, CorpusSpec};
use widegrow::model::{gradcheck, Model, ModelConfig};

fn main() -> widegrow::Result<()> {
    let cfg = ModelConfig {
        layers: 1,
        d_model: 8,
        d_ffn: 6,
        n_heads: 2,
        n_kv: 1,
        d_head: 4,
        experts: 4,
        top_k: 2,
        vocab: 10,
        tie_embeddings: false,
        pos_base: 8,
        ..ModelConfig::default()
    };
    let model = Model::init(cfg, 3)?;
    let batch = Corpus::new(&CorpusSpec::default(), 10)?.batch(5, 2, 6)?;
    let report = gradcheck(&model, &batch, 1e-5, 1e-5)?;
    for p in &report.params {
        println!("{:<28} {:.2e} {}", p.name, p.max_rel_error, if p.passed { "ok" } else { "FAIL" });
    }
    println!("all passed: {}", report.passed());
    Ok(())
}
