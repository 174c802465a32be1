//! laneid-core — lane ID estimation from monocular road image sequences.
//!
//! Estimates which lane the ego vehicle drives in, counted from both road
//! borders at once (dual left/right convention), plus the total lane count.
//! The two IDs and the count are tied by `delta_r = lane_count - delta_l + 1`.
//!
//! The crate is organized as:
//!
//! - [`tensor`] / [`graph`] — dense f64 tensors and a reverse-mode tape with
//!   the handful of ops the model family needs.
//! - [`optim`] — Adam with decoupled weight decay, the step-halving learning
//!   rate schedule, and a central-difference gradient verifier.
//! - [`conventions`] — lane label arithmetic and validity.
//! - [`model`] — the Moka encoder/decoder family (basic, std-LSTM, conv-LSTM)
//!   with long-range dense links and three classification heads.
//! - [`objective`] — the composite training loss: weighted cross-entropies
//!   plus a triangular consistency constraint.
//! - [`brightness`] — streamwise perceived-brightness tracking and the
//!   clamped linear adjustment applied to dark frames.
//! - [`decision`] — convention fusion: confidence criteria and the temporal
//!   jump penalty that pick a single final lane ID per frame.
//! - [`synth`] — procedural multi-lane road scene rendering with exact labels.
//!
//! Everything here is pure computation over `alloc`; IO, file formats and the
//! CLI live in the companion `laneid-tools` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod brightness;
pub mod conventions;
pub mod decision;
mod error;
pub mod graph;
mod math;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
