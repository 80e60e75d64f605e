//! Structural causal models and Rubin causal models on a shared, seedable
//! probability space.

pub mod equivalence;
pub mod error;
pub mod estimands;
pub mod expr;
pub mod infer;
pub mod law;
mod linear;
pub mod probability_space;
pub mod program;
pub mod rcm;
pub mod scenario;
pub mod scm;
pub mod stats;

pub use error::{Error, Result};
pub use infer::{Budget, Engine};
