//! Self-supervised space-time correspondence by contrastive random walks.
//!
//! Frames are cut into a grid of patches, each patch is embedded by a small
//! encoder, and consecutive frames are linked by softmax affinities. A walker
//! sent forward and then backward along a palindrome of frames should return
//! to its starting patch; the cross-entropy of that return is the training
//! signal. Learned embeddings are evaluated by walk accuracy against exact
//! synthetic ground truth and by k-nearest-neighbour label propagation.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph_builder;
mod io_util;
pub mod label_prop;
pub mod rng;
pub mod synth_data;
pub mod trainer;
pub mod walk_core;

pub use error::{Error, Result};

/// Version string embedded in every output artifact.
pub fn version_string() -> String {
    match option_env!("CYCLEWALK_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => format!("{} ({d})", env!("CARGO_PKG_VERSION")),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    }
}
