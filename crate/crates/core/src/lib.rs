//! Quantum variational activation functions and the Kolmogorov-Arnold
//! networks built from them.
//!
//! Each network edge is a single-qubit data re-uploading circuit read out
//! through Pauli-Z ([`daruan`]). Edges sum into nodes and layers stack into
//! networks, optionally wrapped by linear compressor/expander layers
//! ([`qkan`]). Around that sit the spectrum checker ([`spectrum`]), B-spline
//! distillation ([`distill`]), optimizers and the training loop ([`train`]),
//! benchmark data ([`data`]) and the command-line front end ([`cli`]).

pub mod cli;
pub mod daruan;
pub mod data;
pub mod distill;
pub mod error;
pub mod fsio;
pub mod qkan;
pub mod rng;
pub mod spectrum;
pub mod statevector;
pub mod train;

pub use error::{QkanError, Result};
