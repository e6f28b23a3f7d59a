//! Montage pretext training: a single-batch self-supervised task.
//!
//! A batch of `n` images is split into `m × m` (optionally overlapping) patches,
//! the `n·m·m` patches are shuffled across the whole batch and stitched back
//! into `n` montage images. A backbone runs on the montages, a parameter-free
//! decouple stage turns each feature map into one vector per montage slot, and
//! two heads are trained on those vectors: a clustering head (which patches came
//! from the same source image) and a location head (where in its source image a
//! patch came from).
//!
//! Layout:
//!
//! * [`pipeline`] builds montage batches and their labels.
//! * [`model`] holds the backbone contract, the decouple stage and both heads.
//! * [`losses`] implements the clustering and location objectives plus diagnostics.
//! * [`trainer`] runs SGD with a cosine schedule, checkpoints and resumes.
//! * [`evaluation`] provides linear probing, fine-tuning and class-balanced subsets.
//! * [`data`], [`config`] and [`commands`] bind everything into reproducible runs.

// validation compares with `!(x > 0.0)` on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
