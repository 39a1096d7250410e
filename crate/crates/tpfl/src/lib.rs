//! Desk-scale simulator of federated prompt learning over frozen dual
//! encoders.
//!
//! Clients never touch the encoder weights: all trainable capacity lives in
//! a textual context prompt and a masked pixel-space visual prompt, trained
//! locally against a CLIP-style matching loss and optionally regularized by
//! an InfoNCE term that pulls each client toward the aggregated global
//! prompts and away from its own previous ones. The server combines client
//! prompts by sample-weighted averaging.
//!
//! The crate is organized bottom-up:
//!
//! - [`diffgraph`]: dense `f64` tensors and a reverse-mode autodiff graph.
//! - [`rng`]: one master seed, split into named independent streams.
//! - [`encoders`]: the frozen towers and both prompt types.
//! - [`losses`]: matching loss, contrastive augmentation, combined batch
//!   objective with gradients.
//! - [`data`]: synthetic image generation, label-skew partitioning,
//!   persistence.
//! - [`optim`]: SGD/Adam and the cosine schedule.
//! - [`federation`]: client updates, aggregation, evaluation, round loop.
//! - [`config`] and [`harness`]: experiment description, orchestration,
//!   ablations, artifacts.
//!
//! Runs are deterministic: a config plus a seed reproduces every metric bit
//! for bit.

pub mod config;
pub mod data;
pub mod diffgraph;
pub mod encoders;
pub mod error;
pub mod federation;
pub mod harness;
pub mod losses;
pub mod optim;
pub mod rng;

pub use error::{Error, Result};
