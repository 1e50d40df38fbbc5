//! Time-of-flight depth imaging: signal model, scene simulation, classical
//! reconstruction, a convolutional depth estimator, datasets and metrics.

pub mod classic;
pub mod dataset;
pub mod metrics;
pub mod neural;
pub mod scene;
pub mod signal;
