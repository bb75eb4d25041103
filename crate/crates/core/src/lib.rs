// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod dual;
pub mod error;
pub mod flow;
pub mod hamiltonian;
pub mod nn;
pub mod error_bounds;
pub mod evolution;
pub mod optim;
pub mod oracle;
pub mod variational;

pub use error::{Error, Result};
