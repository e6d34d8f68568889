//! Desk-scale differentiable architecture search with an auxiliary skip
//! connection whose coefficient decays to zero over the search.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tape`]) over dense `f64` tensors ([`tensor`]), a cell-based supernet
//! with softmax-mixed edges and the auxiliary skip branch ([`supernet`]),
//! decay schedules for the auxiliary coefficient ([`schedules`]), the
//! first-order bi-level search loop ([`search`]), discretization into
//! genotypes ([`genotype`]), collapse diagnostics ([`diagnostics`]), and an
//! exhaustively trained tabular mini-benchmark ([`minibench`]).
//!
//! Everything is seeded and deterministic: identical configuration and seed
//! produce bit-identical results.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod genotype;
pub mod minibench;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod schedules;
pub mod search;
pub mod supernet;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{GradMap, Tape, Var};
pub use tensor::Tensor;
