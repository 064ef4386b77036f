//! Graph-based neural acceleration of nonnegative matrix factorization.
//!
//! A nonnegative matrix `V ≈ W Hᵀ` is viewed as a bipartite graph whose
//! nodes carry the rows of the factors. A graph transformer (the
//! N-Factormer) refines factor iterates, interleaved with an ADMM
//! nonnegative least-squares solver, either to produce a better starting
//! point or to accelerate the solver's early iterations.

pub mod admm;
pub mod data;
pub mod error;
pub mod eval;
pub mod factormer;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod matrix;
pub mod models;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
pub use matrix::DenseMatrix;
