pub mod checkpoint;
pub mod cli;
pub mod concepts;
pub mod config;
pub mod data;
pub mod decoder;
pub mod distill;
pub mod error;
pub mod fusion;
pub mod head;
pub mod lten;
pub mod metrics;
pub mod model;
pub mod modulator;
pub mod objectives;
mod plain;
pub mod profiler;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
