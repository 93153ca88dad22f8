//! Block-structured neural network engine.

pub mod engine;
pub mod graph;
pub mod layer;
pub mod loss;
pub mod optim;
pub mod tensor;
pub mod weights;

pub use engine::{forward, predict, Activation, Gradients, Owner, Params, Stage, Tape};
pub use graph::{width_scale, Block, BlockGraph};
pub use layer::LayerSpec;
pub use loss::LossOutput;
pub use optim::{cosine_lr, Sgd, SgdConfig};
pub use tensor::{DType, Scalar, Shape, Tensor};
pub use weights::ModelWeights;
