//! Planar push-recovery reinforcement learning testbed.
//!
//! A pinned 3-link balance environment with wall contact and pivot-transfer
//! stepping, a causal-transformer policy with a discrete latent recovery mode
//! and a contact-affordance head, PPO training on top of a small tape-based
//! reverse-mode autodiff engine, and a deterministic evaluation harness
//! (recovery-success sweeps, dynamics-mismatch suites, mode-vector export).

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod env;
pub mod eval;
pub mod features;
pub mod learn;
pub mod policy;
pub mod tape;
