//! Simulation and machine-learning toolkit for vector vortex beams.
//!
//! The pipeline renders Laguerre-Gauss superpositions on a pixel grid,
//! measures their Stokes parameters, optionally degrades them with
//! experimental-like noise, and classifies or reconstructs the underlying
//! states with PCA, linear SVMs and a small convolutional network.

pub mod cnn;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod model_io;
pub mod noise;
pub mod optics;
pub mod pca;
pub mod reconstruct;
pub mod rng;
pub mod sphere;
pub mod svm;

pub use error::{Error, Result};
