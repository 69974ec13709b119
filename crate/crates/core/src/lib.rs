//! Preprocessing, cohort labeling, models, training and evaluation for
//! FDG-PET Alzheimer's classification.

pub mod cohort;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod occlusion;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
