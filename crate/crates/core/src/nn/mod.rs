//! Learned operators, their training graph, and checkpoint serialization.

pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod models;
pub mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use models::{Arch, Encoder, FusionModel, Generator, WeightNet};
pub use tensor::{Scalar, Tensor};
