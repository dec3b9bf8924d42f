//! Deep equilibrium layers built from nonnegative weights and concave
//! activations, where the forward pass is a plain fixed-point iteration with
//! a unique solution and the backward pass solves the adjoint system by the
//! same iteration.
//!
//! The crate is organized around the lifecycle of such a layer:
//!
//! - [`numeric`]: dense matrices, seeded randomness, power-iteration spectral
//!   norms, and im2col unfolding for convolution.
//! - [`activations`]: the scalar activation zoo with derivatives and the
//!   nonnegative-concave / positive-concave classification.
//! - [`equilibrium`]: the layer itself — forward solve, implicit backward
//!   solve, weight normalization, nonnegativity projection, and convergence
//!   diagnostics.
//! - [`verifier`]: numerical certification of monotonicity, scalability,
//!   concavity, fixed-point uniqueness, and Lipschitz bounds.
//! - [`model`]: full network assembly, AdamW training, evaluation, and
//!   checkpointing.
//! - [`data`]: MNIST IDX ingestion and synthetic datasets.
//!
//! Batch-level work is data-parallel via rayon when the `parallel` feature
//! (default) is enabled; every kernel also has a sequential form so the two
//! can be benchmarked against each other.

pub mod activations;
pub mod data;
pub mod equilibrium;
pub mod error;
pub mod model;
pub mod numeric;
pub mod verifier;

pub use error::{Error, Result};
