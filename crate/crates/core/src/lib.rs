//! Learned optimizers for reinforcement learning.
//!
//! A small reverse-mode autodiff tape, recurrent and convolutional networks
//! on top of it, gridworld environments, an A2C agent, classical and learned
//! update rules, and pipeline meta-training of the learned rules.

pub mod agent;
pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod gridworld;
pub mod meta;
pub mod nets;
pub mod optimizers;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamTree, VarTree};
pub use tensor::Tensor;
