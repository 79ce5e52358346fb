//! Token pruning for Vision Transformers with multi-agent PPO.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod game;
pub mod numerics;
pub mod pruning;
pub mod rl_train;
pub mod rng;
pub mod vit;

pub use error::{Error, Result};
pub use numerics::{AdamState, Graph, ParamSet, Scalar, Tensor, Var};
