//! Self-supervised disturbance mapping for SAR backscatter time series.
//!
//! A forecaster (spatiotemporal transformer or GRU) is trained on nominal
//! image sequences to predict a per-pixel Gaussian for the next acquisition.
//! Disturbances are then scored as the number of predicted standard
//! deviations the real acquisition deviates from the forecast.

pub mod autograd;
pub mod cli;
pub mod disturbance;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod model;
pub mod preprocess;
pub mod protocol;
pub mod raster;
pub mod selftest;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
