//! Multi-task reinforcement learning with context-attention representations.
//!
//! The crate bundles:
//! - a minimal f64 reverse-mode autodiff tape ([`tensor`]),
//! - the network architectures and squashed-Gaussian policy head ([`nets`]),
//! - a synthetic compositional task family with shared object dynamics
//!   ([`env`]),
//! - frozen metadata embeddings plus a trainable context encoder
//!   ([`context`]),
//! - the mixture-of-encoders representation with context-conditioned
//!   attention and its ablation variants ([`repr`]),
//! - soft actor-critic with per-task temperatures ([`sac`]),
//! - the training loop with checkpointing ([`trainer`]) and
//! - the evaluation protocol and statistics ([`evalkit`], [`stats`]).

pub mod config;
pub mod context;
pub mod env;
pub mod error;
pub mod evalkit;
pub mod nets;
pub mod params;
pub mod repr;
pub mod rng;
pub mod sac;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use error::{CoreError, Result};
pub use tensor::{AdamState, Graph, Tensor, Var};
