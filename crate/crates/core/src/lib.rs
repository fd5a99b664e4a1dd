//! Core algorithms for H&E stain handling and stain-adversarial training.

pub mod augment;
pub mod color;
pub mod deconv;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod train;

pub use color::{od_to_rgb, rgb_to_od, OdConfig, OdImage, Rgb, RgbPatch};
pub use deconv::{
    compute_concentrations, estimate_from_od, estimate_he_matrix, normalize_to_target,
    robust_max_concentration, ConcentrationMap, MacenkoParams, StainMatrix, StainTarget,
};
pub use error::{Error, Result};
