//! Out-of-distribution benchmark for linear encoding models of visual neurons.
//!
//! A session pairs per-image feature vectors with per-trial neural responses.
//! The crate splits images into train and test sets (random, attribute
//! percentile, and feature-space distance hold-outs), measures how far each
//! test set sits from its train set, fits ceiling-normalized ridge encoding
//! models per neuron, and relates the loss in predictivity to the size of the
//! shift.

pub mod analysis;
pub mod attributes;
pub mod data;
pub mod encoder;
pub mod error;
pub mod pipeline;
pub mod seed;
pub mod shift;
pub mod splits;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
