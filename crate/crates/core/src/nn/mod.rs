//! Small convolutional classifiers and their feature-extraction variant.

pub mod checkpoint;
mod extraction;
mod layer;
mod network;
mod train;

pub use extraction::{reconfigure_for_extraction, ExtractionNet};
pub use layer::{apply_layer, Layer, LayerKind, LayerSpec, NormMode, BATCH_NORM_EPS};
pub use network::{build_classifier, predict, prediction_from_logits, Architecture, Network, Prediction};
pub use train::{accuracy, calibrate_batch_norm, stack, train_classifier, Sample, TrainConfig, TrainReport};
