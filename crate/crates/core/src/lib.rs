//! musegraph-core: a desk-scale sarcasm-explanation pipeline.
//!
//! A post's caption, the object metadata detected in its image, and
//! concepts retrieved from a commonsense store are assembled into one
//! token sequence, wired into a multi-source semantic graph, reasoned
//! over with a GCN, and decoded into an explanation by a small
//! trainable encoder-decoder. Text-overlap metrics and a CLI-facing
//! pipeline live here too.
//!
//! Numeric code is generic over the [`num::Real`] scalar; the pipeline
//! and checkpoints use the `f64` aliases below.

pub mod assembly;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod detector;
pub mod error;
pub mod graph;
pub mod knowledge;
pub mod metrics;
pub mod num;
pub mod pipeline;
pub mod reasoner;
pub mod tensor;

pub use error::{Error, Result};

/// Scalar used by the shipped pipeline and checkpoints.
pub type Scalar = f64;
/// Matrix in pipeline precision.
pub type Mat = tensor::Matrix<Scalar>;
/// Matrix in single precision, for callers that opt down.
pub type Mat32 = tensor::Matrix<f32>;
