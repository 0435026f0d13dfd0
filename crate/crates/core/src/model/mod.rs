//! A small byte-level decoder-only transformer hosting the cache policies.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod forward;
pub mod weights;

pub use checkpoint::{Checkpoint, ConvHeadSet};
pub use config::{ModelConfig, VOCAB_SIZE};
pub use eval::{evaluate, perplexity, EvalConfig, EvalSummary};
pub use forward::{block_forward, forward_full, forward_segmented, generate, LayerStep, PositionMode, Session};
pub use weights::{LayerVars, LayerWeights, ModelWeights, WeightVars};
