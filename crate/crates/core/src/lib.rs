//! Convolutional network engine with data-dependent initialization.
//!
//! The crate measures how fast each layer's weights would move under a random
//! linear loss, normalizes activations within each layer, equalizes learning
//! rates between layers, and provides PCA and spherical k-means filter
//! initializers.

pub mod calibrate;
pub mod error;
pub mod graph;
pub mod init;
pub mod io;
pub mod network;
pub mod ops;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use calibrate::{
    between_layer, calibrate, rescale_layer, within_layer, Calibration, CalibrationConfig, CalibrationTrace,
    FoldPolicy, RescaleOutcome,
};
pub use error::{Error, Result};
pub use graph::{Dims, LayerKind, LayerSpec, NetworkGraph};
pub use init::{initialize, InitConfig, InitMethod};
pub use io::Dataset;
pub use network::{
    backward, draw_random_loss, forward, predict, ActivationCache, AffineParams, Gradients, Mode, WeightStore,
};
pub use stats::{change_rates, ChangeRateReport, ChannelStats, LayerRates, RateConfig, RateMode};
pub use tensor::{Scalar, Tensor};
pub use train::{evaluate, sgd_train, LossKind, TrainConfig, TrainHistory};
