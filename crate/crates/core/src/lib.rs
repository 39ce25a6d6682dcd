//! Tabular maximum causal entropy inverse reinforcement learning.
//!
//! - [`mdp`]: tabular MDPs, feature maps, exact planning and evaluation.
//! - [`gridworld`]: slippery terrain gridworlds and their tasks.
//! - [`soft`]: soft value iteration, occupancy measures, causal entropy.
//! - [`demos`]: expert demonstrations and empirical feature counts.
//! - [`irl`]: single-task, shared-mean multi-task and joint IRL fits.
//! - [`meta`]: Reptile meta-initialization with an exact IRL inner loop.
//! - [`harness`]: config-driven experiments, result tables, aggregation.

// `!(x > 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod demos;
pub mod error;
pub mod gridworld;
pub mod harness;
pub mod irl;
pub mod mdp;
pub mod meta;
pub mod soft;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
