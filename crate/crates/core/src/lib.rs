//! Width expansion of mixture-of-experts transformers during training.

pub mod diagnostics;
pub mod error;
pub mod expansion;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod schedule;

pub use error::{Error, Result};
