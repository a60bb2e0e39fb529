//! EAPCR: a feature extractor for data whose features carry no explicit
//! relation pattern (no pixel adjacency, word order or graph edges).
//!
//! Each sample is turned into a vector of category indices, embedded, and
//! expanded into an `N x N` bilinear attention matrix `A = tanh(E Eᵀ)`.
//! Two small convolution stacks read `A` and a two-sided permutation of it,
//! so each kernel window sees both originally-near and originally-far
//! feature pairs. A residual MLP on the row means of `E` is added to the
//! convolutional head.
//!
//! Module map:
//! - [`autodiff`]: tensors, the tape, optimizers, finite-difference checks
//! - [`permutation`]: designed and random permutations
//! - [`encoding`]: schemas, discretization and the index dictionary
//! - [`model`]: EAPCR, EACR, MLP and plain-CNN models
//! - [`datasets`]: MNIST IDX, tabular CSV, synthesis and splits
//! - [`harness`]: training, metrics, experiment configs and run records
//! - [`analysis`]: distance/correlation study, information gain, pattern recovery

pub mod analysis;
pub mod autodiff;
pub mod datasets;
pub mod encoding;
pub mod error;
pub mod harness;
pub mod model;
pub mod permutation;

pub use error::{Error, Result};
