//! Reference solvers the flows are checked against.

pub mod grid;
pub mod pimc;
