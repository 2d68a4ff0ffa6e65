//! Audio-visual segmentation on a small reverse-mode autodiff core.
//!
//! The pipeline turns class-agnostic mask proposals into colour-coded prior images, encodes
//! frames and priors with twin convolutional encoders fused by channel gating, decodes per-pixel
//! embeddings, mixes them with per-frame audio through one shared similarity matrix applied in
//! both directions, and predicts masks with a query-based transformer decoder trained through
//! bipartite matching plus an adaptive inter-frame consistency penalty.

pub mod bfm;
pub mod checks;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod inference;
pub mod losses;
pub mod maskige;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod params;
pub mod pixel_decoder;
pub mod query_decoder;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
