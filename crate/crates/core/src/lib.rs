//! Joint recovery of a PDE state and a symbolic physical law from indirect,
//! noisy measurements.
//!
//! The law `u_t = f(u, u_x)` is represented by a symbolic network of
//! pole-free rational layers and fixed sine/exponential activations. State and
//! network parameters are fitted together by minimizing a scheduled
//! PDE-residual + data-misfit + regularization objective.

pub mod error;
pub mod extract;
pub mod field;
pub mod harness;
pub mod measure;
pub mod optim;
pub mod ratfunc;
pub mod symnet;

pub use error::{Error, Result};
