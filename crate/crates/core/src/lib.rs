//! Allocation-only core for segment-level spatio-temporal prediction.
//!
//! Everything here is pure computation: a small reverse-mode tensor engine,
//! AdamW, the micro/macro segmentation of frame sequences, the gated
//! segment-recurrent predictor with its two single-paradigm baselines, a
//! deterministic bouncing-shapes generator and frame quality metrics.
//! File formats, training loops and the command line live in the `ustep`
//! crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

mod conv;
mod error;
mod math;

pub mod autodiff;
pub mod data;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod segmentation;
pub mod tensor;

pub use autodiff::{backward, Grads, Tape, Var};
pub use error::{Error, Result};
pub use optim::{AdamState, AdamW};
pub use tensor::{ParamStore, Tensor};
