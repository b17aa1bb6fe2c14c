//! Super-resolution toolkit: a small reverse-mode tensor engine, the
//! HQS-unrolled network built on it, a classical HQS solver over an explicit
//! degradation operator, bicubic degradation, and image quality metrics.

pub mod arch;
pub mod error;
pub mod fsutil;
pub mod gradcheck;
pub mod hqs;
pub mod imaging;
pub mod metrics;
pub mod tensor;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
