//! Cross-lingual self-training of frame-level speech representations.
//!
//! A supervised model trained on one annotated language becomes the target
//! network. A main network with the same architecture learns to reproduce the
//! target's frame embeddings on un-annotated multilingual data under masking,
//! while the target tracks the main network as an exponential moving average.
//! Downstream quality is measured by CTC fine-tuning and phone error rate.

pub mod augment;
pub mod data;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod head;
pub mod io;
pub mod losses;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
