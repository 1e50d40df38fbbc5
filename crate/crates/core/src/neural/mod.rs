//! From-scratch tensor core, reverse-mode layers, the encoder-decoder and its
//! training loop.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod network;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

use thiserror::Error;

pub use layers::{Activation, ActivationKind, Conv2d, ConvTranspose2d, Layer, Param, ResBlock};
pub use network::{Network, NetworkConfig, SPATIAL_MULTIPLE};
pub use tensor::{Scalar, Tensor};
pub use train::{infer, train, TrainConfig};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backward called without a recorded forward pass")]
    MissingForward,
    #[error("mask selects no valid pixels")]
    EmptyMask,
    #[error("value {value} outside [0, {max}]")]
    OutOfRange { value: f64, max: f64 },
    #[error("crop {crop} larger than {width}×{height} frame")]
    CropTooLarge { crop: usize, width: usize, height: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
