//! Comparison methods.

pub mod greedy;
pub mod mpc;
pub mod offline;
pub mod simple;

pub use offline::{solve_opi, OfflineSolution, DEFAULT_EPSILON};
