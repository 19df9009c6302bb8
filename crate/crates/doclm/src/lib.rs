//! Layout-aware document understanding with a fused causal language model.
//!
//! The crate wires a small layout-aware transformer encoder (text bytes,
//! bounding-box buckets, image patches) through a single linear adapter into a
//! byte-level causal decoder, trains the pair jointly on document tasks and
//! plain instruction data, and evaluates with accuracy, entity-level F1, and
//! ANLS. Everything runs on a hand-built f64 reverse-mode tensor core so runs
//! are deterministic and gradient-checkable end to end.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod metrics;
pub mod model;
pub mod prompts;
pub mod tensor;
pub mod train;
pub(crate) mod transformer;
