//! Saliency maps for small image classifiers by coalition-guided mask
//! perturbation.
//!
//! Pixels are first grouped into coalitions by clustering the classifier's
//! own convolutional features ([`coalition`]). A deletion mask is then
//! optimized to remove as much of the image as possible while the predicted
//! class survives, with a smoothness term that keeps each coalition's mask
//! consistent ([`perturbation`]). [`evaluation`] scores the result and
//! [`harness`] wires everything into a reproducible command-line pipeline.

pub mod autodiff;
pub mod coalition;
mod error;
pub mod evaluation;
pub mod harness;
pub mod nn;
pub mod perturbation;

pub use error::{Error, Result};
