//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node sweeps the tape once in reverse and
//! returns the gradient of that scalar with respect to each leaf created with
//! [`Graph::param`]. Graphs are single-owner and cheap to build, so each
//! gradient step or Monte Carlo draw uses a fresh one.

mod array;
mod graph;

pub use array::Array;
pub use graph::{Gradients, Graph, Var};
