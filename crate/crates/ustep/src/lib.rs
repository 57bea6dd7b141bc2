//! File formats, training and evaluation loops, reports and the command
//! line for the segment-recurrent predictor in `ustep-core`.

mod bytes;

pub mod checkpoint;
pub mod cli;
pub mod dataset_io;
pub mod error;
pub mod kv;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
