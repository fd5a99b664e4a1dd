use std::io;

use thiserror::Error;

/// Errors produced by the stainforge core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("not enough tissue: {found} pixels above the OD threshold, need {required}")]
    NotEnoughTissue { found: usize, required: usize },

    #[error("degenerate stain: {0}")]
    DegenerateStain(String),

    #[error("no positive concentrations in the map")]
    EmptyTissue,

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("non-finite gradient in parameter `{param}` at epoch {epoch}")]
    NonFiniteGradient { param: String, epoch: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("domain head needs at least two distinct center ids, found {0}")]
    SingleDomain(usize),

    #[error("image {width}x{height} is smaller than the {patch}px grid patch")]
    ImageTooSmall { width: usize, height: usize, patch: usize },

    #[error("at least 3 centers are required (with 1+ held out), got {0}")]
    InsufficientCenters(usize),

    #[error("kappa is undefined: expected disagreement is zero")]
    UndefinedKappa,

    #[error("each sample needs at least {required} values, got {a} and {b}")]
    SampleTooSmall { a: usize, b: usize, required: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
