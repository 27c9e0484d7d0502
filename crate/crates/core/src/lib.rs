//! Multimodal transformer for image captioning.
//!
//! A self-attentive image encoder (single-view, aligned multi-view or
//! unaligned multi-view) feeds a caption decoder built from masked
//! self-attention, image-guided attention and feed-forward blocks. The crate
//! also carries the training loop (cross-entropy then self-critical),
//! decoding strategies, caption metrics and a synthetic scene dataset.

pub mod attention;
pub mod data;
pub mod decoder;
pub mod decoding;
pub mod encoder;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
