//! Cross-modal embedding framework for multimodal trait regression.
//!
//! Modality encoders feed a fused regression head; a shared-weight Siamese
//! projector is trained with a trait-wise multi-similarity loss on extreme
//! anchors, and its embeddings are fused back into the final predictor.

pub mod cli;
pub mod datamodel;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod model;
pub mod nncore;
pub mod trainer;

pub use error::{Error, Result};
