//! Dense CPU tensors with define-by-run reverse-mode automatic
//! differentiation, plus the convolutional, normalization and dense layers
//! the generative models are assembled from.

pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Activation, BatchStats, Graph, NormStats, Var};
pub use nn::{BatchNorm, Block, Conv2d, ConvTranspose2d, Dense, Layer, Mode};
pub use params::{normal_tensor, EntryKind, ParamEntry, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
