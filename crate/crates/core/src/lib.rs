//! srdiag-core: 4x single-image super-resolution with a two-stage training
//! protocol (pixel pretraining, then adversarial fine-tuning with a relativistic
//! average discriminator and a perceptual feature loss), plus a multi-label
//! diagnosis classifier used to measure how much restoration recovers
//! classification accuracy lost to downsampling.
//!
//! Everything is CPU-only, deterministic under a single global seed, and
//! generic over `f32`/`f64` so gradient checks can run in double precision.

pub mod container;
pub mod datasets;
pub mod diagnosis;
pub mod evaluation;
pub mod imaging;
pub mod losses;
pub mod rng;
pub mod sr_models;
pub mod tensor;
pub mod training;

use std::path::PathBuf;

#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("loss became non-finite at step {step}{}", checkpoint.as_ref().map(|p| format!(", state saved to {}", p.display())).unwrap_or_default())]
    NonFinite {
        step: usize,
        checkpoint: Option<PathBuf>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn load(msg: impl Into<String>) -> Self {
        Error::Load(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
