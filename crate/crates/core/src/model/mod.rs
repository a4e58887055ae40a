//! Decoder-only transformer: configuration, weights, forward passes, and
//! greedy generation over parallel window caches.

mod config;
mod container;
mod forward;
mod generate;
mod parallel;
mod rotary;
mod weights;

pub use config::{ModelConfig, PositionalKind};
pub use container::{Tensor, TensorContainer, MAGIC};
pub use forward::{CacheSegment, LayerKv, Model};
pub use generate::{argmax, argmax_among, greedy_generate, NextTokens, Session, StopAfter, TokenConstraint};
pub use parallel::{flatten, joint_task_logits, ParallelContext};
pub use rotary::{apply_rotary, apply_rotary_in_place};
pub use weights::{load_weights, LayerWeights, Weights};
