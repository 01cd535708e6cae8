//! Low-dimensional spectral adapters: a frozen residual weight plus a
//! small trainable core `S` sandwiched between a frozen spectral
//! down-projection and a gradually frozen up-projection.

pub mod accounting;
pub mod adapter;
pub mod allocator;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod freezing;
pub mod graph;
pub mod model;
pub mod optim;
pub mod spectral;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
