//! Small reverse-mode differentiation engine for the projection and
//! classification networks.
//!
//! Values are `f64` so that finite-difference checks stay meaningful at
//! tight tolerances. The engine is single-threaded and every kernel uses a
//! fixed accumulation order, so results are bit-reproducible.

pub mod check;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{sigmoid, BatchStats, Gradients, Graph, ReluRule, Var};
pub use kernels::{PoolKind, ResampleMap};
pub use optim::Adam;
pub use params::{ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, Error>;
