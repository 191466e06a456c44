//! Random-effect Gaussian process models of multi-biomarker progression.
//!
//! The fixed-effect trajectory of each biomarker is a zero-mean GP with a
//! squared-exponential kernel. Individuals contribute random effects and a
//! time shift that places them on the common disease timeline. Monotone
//! trajectories are encouraged with probit likelihoods on virtual derivative
//! observations, handled by expectation propagation. Fitted models predict
//! trajectories and stage unseen individuals with missing biomarkers.

pub mod data;
pub mod ep;
pub mod error;
pub mod fit;
pub mod kernels;
pub mod normal;
pub mod persist;
pub mod predict;
pub mod synth;

pub use error::{Error, Result};
