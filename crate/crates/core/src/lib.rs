//! Self-cascade diffusion at desk scale.
//!
//! A single low-resolution denoiser is re-used across resolution stages:
//! each stage starts from the previous stage's clean output (the pivot),
//! upsampled and re-noised to an intermediate step, and optionally receives
//! pivot skip features through small trainable time-aware upsamplers.

pub mod baselines;
pub mod cascade;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod numerics;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod upsampler;

pub use error::{Error, Result};
