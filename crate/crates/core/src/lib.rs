//! Siamese self-supervised learning on paired brain graphs and mean
//! volumes: data containers, graph construction, augmentation, the
//! graph-image encoder, pretraining, downstream evaluation and analysis.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`).

pub mod analysis;
pub mod augment;
pub mod config;
pub mod data;
pub mod downstream;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod ssl;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type TaskInstance32 = data::TaskInstance<f32>;
pub type TaskInstance64 = data::TaskInstance<f64>;
pub type Encoder32 = nn::Encoder<f32>;
pub type Encoder64 = nn::Encoder<f64>;
pub type Predictor32 = nn::Predictor<f32>;
pub type Predictor64 = nn::Predictor<f64>;
pub type TaskHead32 = nn::TaskHead<f32>;
pub type TaskHead64 = nn::TaskHead<f64>;
pub type Checkpoint32 = nn::checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = nn::checkpoint::Checkpoint<f64>;
