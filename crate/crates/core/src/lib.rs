//! Desk-scale vertical federated learning simulator.
//!
//! Parties hold disjoint feature columns of the same samples; one active
//! party owns the labels and the global head. The crate provides the
//! training protocol (plain, with a variational information bottleneck at
//! the active party, or at a passive party), gradient-transform baseline
//! defenses, the label-inference / backdoor / reconstruction attack suite,
//! the information-theoretic analysis helpers, and the experiment harness
//! driving the `midvfl` command-line tool.

pub mod analysis;
pub mod attacks;
pub mod defenses;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod models;
pub mod protocol;

pub use diffcore::{Graph, Rng, Tensor, Var};
pub use error::{Error, Result};
