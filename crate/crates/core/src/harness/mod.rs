//! Experiment harness: run configs, synthetic corpora, checkpoints, the
//! training loop, grid sweeps and the command-line interface.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod metrics;
pub mod sweep;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{parse_plan, plan_to_text, CorpusKind, CorpusSpec, ExpansionEvent, RunConfig, ScheduleConfig};
pub use corpus::{generate_corpus, Corpus};
pub use metrics::{MetricsRecord, Table};
pub use sweep::{parse_grid, run_sweep, SweepRow};
pub use train::{run_training, train_in_memory, ExpansionRecord, RunOutcome, RunSummary, Trainer};
