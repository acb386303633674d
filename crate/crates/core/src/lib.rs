//! Desk-scale prompt-conditioned segmenter.
//!
//! The model synthesizes its own prompts instead of waiting for external
//! points or boxes: a self-prompt generator distills the image embedding
//! into complementary dense/sparse prompts, a strictly frozen prompt
//! encoder projects them into the prompt embedding space, prompt-space
//! gating suppresses background-correlated activations with an asymmetric
//! gate, and a from-scratch mask decoder produces the final mask. Training
//! losses, LoRA adaptation, evaluation metrics, a synthetic-camouflage
//! data generator, and the CLI-facing harness live alongside the model.
//!
//! Everything runs on a small `f64` reverse-mode autodiff tape
//! ([`tensor`]), single threaded and bit-deterministic for a fixed seed.

pub mod ablate;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod inspect;
pub mod lora;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod prompt_encoder;
pub mod psg;
pub mod spg;
pub mod tensor;
pub mod train;
pub mod twoway;

pub use error::{Error, Result};
pub use tensor::Tensor;
