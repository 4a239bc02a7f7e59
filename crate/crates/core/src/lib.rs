//! Layer-wise N:M sparsity for a small vision transformer: a weight-sharing
//! supernet trained over every per-module sparsity choice, plus the search
//! machinery that picks configurations on the accuracy/FLOPs frontier.

pub mod baselines;
pub mod cost;
pub mod data;
pub mod encoding;
pub mod evo;
pub mod filter;
pub mod harness;
pub mod matrix;
pub mod model;
pub mod nm;
pub mod real;
pub mod sampling;
pub mod space;
pub mod supernet;
pub mod train;
