//! Multi-temporal lip-audio memory.
//!
//! Paired visual/audio temporal convolution stacks with receptive-field
//! aligned layers, per-layer key/value memories that learn a visual-to-audio
//! mapping during joint training, and visual-only inference that recalls
//! audio features from memory.

pub mod config;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod mtlam;
pub mod params;
pub mod pipeline;
pub mod temporal;
pub mod toytask;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
