//! Speech-to-image generation toolkit.
//!
//! Two stages: a speech embedding network ([`sen`]) co-embeds utterances and
//! pictures, then a relation-supervised densely-stacked GAN ([`rdg`]) renders
//! pictures conditioned on those embeddings. [`eval`] scores generations with
//! Inception Score, Fréchet distance and class-query retrieval mAP.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod rdg;
pub mod sen;

pub use error::{Error, Result};
