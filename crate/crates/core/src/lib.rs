//! Attention-weight embeddings for univariate and channel-independent
//! time-series forecasting.
//!
//! Windows of a normalized lookback series are passed through a small
//! self-attention stack; the last rows of its attention matrices (or
//! kernel similarity scores) become each window's token embedding for a
//! transformer encoder. The crate also ships the verification tooling
//! around that model: a Monte Carlo check of representation separation
//! under noise and a rank-collapse diagnostic.

pub mod data;
pub mod diagnostics;
pub mod embed;
pub mod error;
pub mod exec;
mod layers;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
pub use exec::Execution;
pub use layers::Dropout;
pub use tensor::{Graph, ParamStore, Tensor, Var};
