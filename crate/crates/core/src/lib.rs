//! Knowledge-distilled learned image compression.
//!
//! A scale-hyperprior codec at configurable width, teacher/student
//! distillation losses, a training loop, and the evaluation harness used to
//! compare models: rate/quality metrics, Bjøntegaard deltas, FLOP counting,
//! throughput and energy measurement.

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod profiler;
pub mod trainer;

pub use error::{Error, Result};
