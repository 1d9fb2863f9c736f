//! Projection, ensemble classification, attribution-driven slice selection
//! and fusion for ordinal grading of OCTA volumes.

pub mod attribution;
pub mod config;
pub mod dataset;
pub mod ensemble;
pub mod error;
pub mod evaluate;
pub mod fusion_train;
pub mod octa_store;
pub mod preprocess;
pub mod projector;
pub mod report;
pub mod synthgen;

pub use error::{Error, Result};
