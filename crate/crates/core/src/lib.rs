//! Token pruning for vision transformers driven by a trained noise allocator.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`rng`]: dense `f64` tensors, a define-by-run
//!   reverse-mode tape, counter-based random streams.
//! * [`vit`]: the toy backbone.
//! * [`allocator`]: per-layer relevance heads, training-time noise injection.
//! * [`pruning`]: keep-sets, similarity pruning, schedules and baselines.
//! * [`cost`]: analytic MAC counting and throughput measurement.
//! * [`data`], [`container`]: synthetic datasets and the "TNTC" file format.

pub mod allocator;
pub mod autodiff;
pub mod container;
pub mod cost;
pub mod data;
pub mod error;
pub mod pruning;
pub mod rng;
pub mod tensor;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
