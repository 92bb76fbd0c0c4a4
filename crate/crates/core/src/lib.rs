//! Desk-scale compositional meta-reinforcement-learning laboratory.
//!
//! Tasks are identified by one label per *degree of variation* (DoV), e.g.
//! a goal label and a physics label. A separate context encoder per DoV maps
//! observed transitions to a diagonal-Gaussian latent block; the concatenated
//! blocks condition a soft actor-critic policy. Per-(DoV, label) target
//! distributions maintained by exponential moving average serve both as
//! anchors for a disentanglement regularizer during meta-training and as
//! building blocks for zero-shot policy composition on unseen label
//! combinations.
//!
//! The crate is self-contained: it ships its own differentiable MLP kernel,
//! two toy compositional task families, the meta-training loop, baselines,
//! and embedding diagnostics. Everything is seeded and deterministic in
//! single-threaded mode.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod envs;
pub mod error;
pub mod numerics;
pub mod rollout;
pub mod sac;
pub mod targets;
pub mod trainer;
pub mod zeroshot;

pub use error::{Error, Result};
