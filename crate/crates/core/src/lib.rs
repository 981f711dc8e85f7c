//! Skip-Clip: self-supervised video representation learning by ranking
//! sparsely sampled future frames against a dense context clip.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, a reverse-mode tape, and finite-difference checks.
//! - [`videoio`]: the video model, SKT1 files, manifests, and the synthetic
//!   moving-sprite corpus.
//! - [`sampling`]: context/target/negative sampling and augmentation.
//! - [`encoders`]: the context encoder, target encoder, and linear heads.
//! - [`objectives`]: the cell-cosine score and the three loss terms.
//! - [`training`]: Adam, step schedules, pre-training, and checkpoints.
//! - [`evaluation`]: ranking metrics, probing, sliding-window inference, heatmaps.

pub mod config;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod numerics;
pub mod objectives;
pub mod rng;
pub mod sampling;
pub mod training;
pub mod videoio;

pub use error::{Error, ErrorClass, Result};
pub use numerics::{Real, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/scoring.md")]
    mod scoring {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
}
