//! Invalid action masking for policy-gradient reinforcement learning.
//!
//! The crate is layered bottom-up:
//!
//! - [`numerics`]: dense tensors, a reverse-mode tape, Adam, gradient clipping
//!   and orthogonal initialization.
//! - [`maskdist`]: masked and composite categorical distributions.
//! - [`env`]: a gridworld RTS harvest environment with validity masks.
//! - [`model`]: the convolutional policy/value networks.
//! - [`ppo`]: rollouts, GAE, normalization and the clipped PPO update.
//! - [`harness`]: invalid-action strategies, metrics and experiment runs.

pub mod numerics;
pub mod maskdist;
pub mod env;
pub mod model;
pub mod ppo;
pub mod harness;
