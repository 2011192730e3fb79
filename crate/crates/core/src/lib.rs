//! Multi-modal-query detection transformer with dual-stream cross-attention,
//! built on a small `f64` reverse-mode tensor library and a synthetic
//! polygon-scene benchmark.

pub mod error;
pub mod eval;
pub mod experiment;
pub mod geometry;
pub mod loss;
pub mod matching;
pub mod model;
pub mod nn;
pub mod query;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
