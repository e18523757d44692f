//! Star-graph sequential recommendation.
//!
//! The crate bundles a small reverse-mode autodiff engine, the star-graph
//! attention recommender with a causal self-attention baseline, the data
//! pipeline that feeds them, a training loop, ranking metrics and the
//! analytical probes (over-smoothing, attention entropy, op counts and
//! runtime scaling).

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod probes;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Activation, Graph, Gradients, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
