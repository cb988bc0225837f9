use crate::benchmarks::{self, OfflineSolution};
use crate::error::{Error, Result};
use crate::scenario::Scenario;

use super::config::RunConfig;
use super::metrics::{compute_metrics, RunMetrics};
use super::sim::{run_method, run_opi, Method, Trajectories};

/// Everything `run_simulation` produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: RunConfig,
    pub scenario: Scenario,
    pub gammas: Vec<f64>,
    pub trajectories: Trajectories,
    pub metrics: RunMetrics,
    /// The OPI solution, when it was computed.
    pub opi: Option<OfflineSolution>,
}

impl RunOutput {
    /// Runtime invariants every completed run must satisfy.
    pub fn check_invariants(&self) -> Result<()> {
        if let Some(d) = &self.trajectories.delays {
            let v = d.violations();
            if !v.is_empty() {
                return Err(Error::Invariant(format!(
                    "FIFO delay exceeds its bound in groups {v:?}"
                )));
            }
        }
        let tol = 1e-6;
        for (iv, d) in self.trajectories.intervals.iter().zip(&self.trajectories.dispatch) {
            if iv.lower_sum < -tol || iv.lower_sum > iv.upper_sum + tol {
                return Err(Error::Invariant(format!("slot {}: interval out of order", iv.slot)));
            }
            if d.total < iv.lower_sum - tol || d.total > iv.upper_sum + tol {
                return Err(Error::Invariant(format!("slot {}: dispatch outside interval", iv.slot)));
            }
        }
        Ok(())
    }
}

/// Runs the configured method and computes its metrics.
pub fn run_simulation(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    let scenario = config.build_scenario()?;
    let gammas = config.gamma_trace()?;
    let settings = config.method_settings()?;
    let rate_cap = settings.online.rate_cap_kg_per_h;
    let dt = scenario.clock.slot_duration_h;
    let (trajectories, opi) = if config.method == Method::Opi {
        let (t, sol) = run_opi(&scenario, rate_cap, config.offline_epsilon, &gammas)?;
        (t, Some(sol))
    } else {
        let t = run_method(&scenario, config.method, &settings, &gammas)?;
        let sol = if config.performance_ratio {
            Some(benchmarks::solve_opi(&scenario, rate_cap, config.offline_epsilon)?)
        } else {
            None
        };
        (t, sol)
    };
    let reference = opi.as_ref().map(|s| s.total_flexibility(dt));
    let metrics = compute_metrics(&trajectories, &scenario, config.seed, reference)?;
    Ok(RunOutput {
        config: config.clone(),
        scenario,
        gammas,
        trajectories,
        metrics,
        opi,
    })
}
