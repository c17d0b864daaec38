//! Bilevel optimization with an equilibrium-constrained lower level.
//!
//! The lower level is a congestion game solved by entropic mirror descent on a
//! product of simplices; its solution map is differentiated by unrolling the
//! solver dynamics, giving a hypergradient for a projected-gradient upper
//! loop. A diagnostics module checks the stability structure of the unrolled
//! dynamics (spectral envelopes, a robust-stability linear matrix inequality,
//! and convergence-rate fits), and concrete applications cover transport
//! network design plus a small quadratic game used throughout the tests.

pub mod applications;
pub mod bilevel;
pub mod diagnostics;
pub mod error;
pub mod jacobian;
pub mod lower_solver;
pub mod network;
pub mod routing_game;
pub mod simplex;

pub use error::{Error, Result};
pub use simplex::{kl_divergence, BlockLayout, BlockSimplexVector};
