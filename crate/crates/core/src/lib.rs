//! Linear stability of SGD near the zero-loss manifold of overparameterized
//! regression: step factors, Lyapunov and moment exponents, regularity checks,
//! projective drift certificates and trajectory simulation.

pub mod cli;
pub mod cocycle;
pub mod error;
pub mod linalg;
pub mod lyapunov;
pub mod projective;
pub mod regularity;
pub mod simulate;
pub mod task;

pub use error::{Error, Result};
