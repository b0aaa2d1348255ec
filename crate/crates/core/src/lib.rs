//! Unit-wise Bayesian recurrent units: per hidden unit, an exact Bayesian
//! filter for an independent two-state Markov chain, two equivalent backward
//! smoothing recursions, analytic gradients for training, and the oracles
//! (brute-force enumeration, classical forward-backward) everything is
//! verified against.

pub mod check;
pub mod error;
pub mod grad;
pub mod layer;
pub mod numerics;
pub mod oracle;
pub mod train;

pub use error::{Result, UbruError};
