use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::benchmarks;
use crate::error::{Error, Result};

use super::config::RunConfig;
use super::metrics::SolveTimeStats;
use super::sim::{run_online, OnlinePolicy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub fleet_size: usize,
    /// Per-slot decision time of the proposed method.
    pub decision: SolveTimeStats,
    /// Wall time of one OPI solve, when requested.
    pub opi_seconds: Option<f64>,
}

/// Times the proposed method's per-slot decisions at each fleet size.
pub fn benchmark_timing(base: &RunConfig, sizes: &[usize], with_opi: bool) -> Result<Vec<TimingRow>> {
    if sizes.is_empty() {
        return Err(Error::invalid("sizes", "must not be empty"));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let mut cfg = base.clone();
        cfg.scenario.fleet.fleet_size = n;
        cfg.validate()?;
        let scenario = cfg.build_scenario()?;
        let gammas = cfg.gamma_trace()?;
        let params = cfg.online_params()?;
        let traj = run_online(&scenario, &params, OnlinePolicy::Quadratic, cfg.feedback_enabled, &gammas)?;
        let samples: Vec<f64> = traj.intervals.iter().map(|iv| iv.solve_seconds).collect();
        let opi_seconds = if with_opi {
            let start = Instant::now();
            benchmarks::solve_opi(&scenario, params.rate_cap_kg_per_h, cfg.offline_epsilon)?;
            Some(start.elapsed().as_secs_f64())
        } else {
            None
        };
        rows.push(TimingRow {
            fleet_size: n,
            decision: SolveTimeStats::from_samples(&samples),
            opi_seconds,
        });
    }
    Ok(rows)
}

/// True when mean decision time grows at most linearly in fleet size,
/// allowing a factor `noise` over the smallest size.
pub fn growth_is_at_most_linear(rows: &[TimingRow], noise: f64) -> bool {
    let Some(base) = rows.iter().filter(|r| r.fleet_size > 0).min_by_key(|r| r.fleet_size) else {
        return true;
    };
    rows.iter().filter(|r| r.fleet_size > 0).all(|r| {
        let scale = r.fleet_size as f64 / base.fleet_size as f64;
        r.decision.mean_s <= noise * scale * base.decision.mean_s
    })
}

/// Writes `fleet_size,mean_decision_s,p95_decision_s,max_decision_s,opi_s`.
pub fn write_timing_table<W: std::io::Write>(rows: &[TimingRow], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["fleet_size", "mean_decision_s", "p95_decision_s", "max_decision_s", "opi_s"])?;
    for r in rows {
        wtr.write_record([
            r.fleet_size.to_string(),
            r.decision.mean_s.to_string(),
            r.decision.p95_s.to_string(),
            r.decision.max_s.to_string(),
            r.opi_seconds.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
