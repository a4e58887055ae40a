//! Parallel context windows for decoder-only transformers.
//!
//! Context is split into `B` windows that reuse the same position ids and
//! cannot see each other; the task tokens that follow attend to all of them.
//! The crate provides the layout geometry ([`layout`]), a small f32
//! transformer that runs under arbitrary masks and merged KV caches
//! ([`model`]), a GPT-2 compatible tokenizer ([`tokenizer`]), example packing
//! ([`packer`]) and an in-context-learning evaluation harness ([`harness`]).

pub mod error;
pub mod harness;
pub mod layout;
pub mod model;
pub mod packer;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use layout::{
    allowed_pair_count, assign_positions, build_mask, BlockCausalMask, PositionAssignment, TokenRole, WindowLayout,
};
pub use model::{CacheSegment, Model, ModelConfig, PositionalKind};
pub use tensor::Matrix;
