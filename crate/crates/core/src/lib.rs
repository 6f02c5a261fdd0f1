//! Numerical laboratory for factual recall in one-layer transformers with
//! random embeddings: task generation, Attention-only and Attention-MLP
//! models, three-step gradient descent and Adam training, score
//! decompositions, and the `(V, d)` sweep harness.

pub mod activation;
pub mod diagnostics;
pub mod embed;
pub mod error;
pub mod harness;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod taskgen;
pub mod trainer;

pub use error::{Error, Result};
