//! Training, evaluation and dataset tooling around `laneid-core`.
//!
//! Everything with a side effect lives here: the on-disk corpus format
//! (P6 PPM frames + JSONL labels + manifest), binary checkpoints, the
//! training loop with augmentations, the evaluation/sweep harness and the
//! `laneid` CLI.

pub mod augment;
pub mod checkpoint;
pub mod dataset;
mod error;
pub mod evaluator;
pub mod ppm;
pub mod runconfig;
pub mod threads;
pub mod trainer;

pub use error::{Error, Result};
