pub mod benchmarks;
pub mod dispatch;
pub mod error;
pub mod harness;
pub mod online;
pub mod qp;
pub mod queues;
pub mod scenario;

pub use error::{Error, Result};
