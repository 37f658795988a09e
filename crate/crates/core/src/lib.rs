//! Volume-tokenized representation learning for synthetic radiology
//! cohorts: cohort generation, subvolume tokenization, a vector-quantized
//! volume autoencoder, text encoders, hierarchical study encoders,
//! contrastive alignment, frozen-feature transfer heads, and an analysis
//! suite (attribution, retrieval diagnostics, fairness checks, reporting).

pub mod ckpt;
pub mod clip;
pub mod heads;
pub mod cohort;
pub mod error;
pub mod hier;
pub mod log;
pub mod nn;
pub mod rng;
pub mod text;
pub mod tokenizer;
pub mod vq;

pub use error::{Error, Result};
