//! Neural network components with hand-written backward passes.

pub mod checkpoint;
pub mod cnn;
pub mod gat;
pub mod gradcheck;
pub mod layers;
pub mod mlp;
pub mod model;
pub mod params;

pub use layers::Mode;
pub use model::{Encoder, HeadKind, InputGrad, ModelConfig, Predictor, TaskHead, View};
pub use params::{Module, TensorRole};
