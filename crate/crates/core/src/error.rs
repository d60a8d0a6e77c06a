use std::io;

use thiserror::Error;

/// Unified error type for the upscaling engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad ranges, incompatible dimensions, missing backends.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid argument to an operation (out-of-range timestep, oversized region, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Tensor or matrix shape mismatch; the message names the offending operand.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Violated internal invariant, e.g. a canvas cell left uncovered during merge.
    #[error("internal error: {0}")]
    Internal(String),

    /// Captioner backend failure. Callers degrade to the global prompt.
    #[error("captioner error: {0}")]
    Captioner(String),

    /// Denoiser backend failure. Fatal for a run.
    #[error("denoiser error: {0}")]
    Denoiser(String),

    /// Latent codec failure.
    #[error("codec error: {0}")]
    Codec(String),

    /// Image decode or encode failure.
    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for errors caused by user-provided configuration rather than backends.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Argument(_))
    }

    /// True for failures of an external backend (denoiser, captioner, codec).
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            Error::Captioner(_) | Error::Denoiser(_) | Error::Codec(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
