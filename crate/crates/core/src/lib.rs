//! Open-world detection decision layer.
//!
//! Region features from a frozen detector are classified against text
//! embeddings on the unit sphere. Text embeddings come from a small encoder
//! calibrated with LoRA adapters and are precomputed before inference. Two
//! wildcard embeddings handle objects outside the vocabulary: an "object"
//! wildcard trained on every annotated box, and an "unknown" wildcard taught
//! by it through pseudo-labels. New categories are appended task by task while
//! earlier embeddings stay frozen.

pub mod assign;
pub mod cli;
pub mod config;
mod binio;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod infer;
pub mod rng;
pub mod textenc;
pub mod train;
pub mod types;
pub mod worldstate;

pub use binio::write_atomic;
pub use error::{Error, Result};
