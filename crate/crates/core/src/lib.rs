//! Chunked, attention-free byte-level language model.
//!
//! A sequence is processed in fixed-size chunks. Inside a chunk, a diagonal
//! state-space block and a set of dilated causal convolutions mix tokens; a
//! GRU supervisor and a per-sequence retrieval memory carry information
//! across chunks, so compute and memory grow linearly with length.

pub mod attention;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod memory;
pub mod model;
pub mod multires;
pub mod numerics;
pub mod ssm;
pub mod supervisor;
pub mod trainer;

pub use config::{Ablations, ModelConfig, TrainConfig, CONFIG_KEYS, VOCAB};
pub use data::{ChunkBatch, RecallSample, TokenSeq};
pub use error::{Error, Result};
pub use memory::{IndexMode, MemoryEntry, MemoryStore, Provenance};
pub use model::{ChunkInput, ChunkState, Model, ModelParams, Sampling};
pub use numerics::{Graph, Tensor, Var};
