//! Simulation driver, metrics, configuration and parameter sweeps.

mod config;
mod export;
mod metrics;
mod run;
mod sim;
mod sweep;
mod timing;

pub use config::*;
pub use export::*;
pub use metrics::*;
pub use run::*;
pub use sim::*;
pub use sweep::*;
pub use timing::*;
