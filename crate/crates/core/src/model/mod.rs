//! Shallow encoder-decoder Transformer shared by both task directions.

mod checkpoint;
mod config;
mod params;
mod transformer;

pub use checkpoint::{Checkpoint, CheckpointMeta, OptimizerMeta, FORMAT_VERSION, MAGIC};
pub use config::{ModelConfig, Residual};
pub use params::{ParamVars, ParameterSet};
pub use transformer::{positional_encoding, AttentionMap, AttentionSite, Batch, EncoderMemory, Seq2Seq};
