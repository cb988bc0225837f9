use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::Scenario;

use super::sim::{Method, Trajectories};

/// Energy below which a task counts as met, kWh.
const ENERGY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveTimeStats {
    pub slots: usize,
    pub mean_s: f64,
    pub p95_s: f64,
    pub max_s: f64,
}

impl SolveTimeStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let idx = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
        Self {
            slots: sorted.len(),
            mean_s: sorted.iter().sum::<f64>() / sorted.len() as f64,
            p95_s: sorted[idx],
            max_s: sorted[sorted.len() - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub method: Method,
    pub seed: u64,
    /// `Σ_t (p̂_{s,t} − p̌_{s,t}) Δt`
    pub total_flexibility_kwh: f64,
    /// `Σ_t w_t p_t / T` with `p_t` the emission power of the method.
    pub time_avg_emission_rate_kg_per_h: f64,
    /// `Σ_i max(e_req − e_final, 0)`
    pub unfulfilled_energy_kwh: f64,
    /// Total flexibility relative to OPI's; `None` without a reference.
    pub performance_ratio: Option<f64>,
    /// Delivered task energy over total task energy.
    pub fulfillment_ratio: f64,
    pub max_delay_slots: Vec<usize>,
    pub delay_bound_slots: Vec<f64>,
    /// Dispatched power no EV could absorb, summed over slots, kW.
    pub undeliverable_kw: f64,
    pub solve_time: SolveTimeStats,
}

impl RunMetrics {
    pub fn performance_ratio(&self) -> Result<f64> {
        self.performance_ratio.ok_or_else(|| {
            Error::MissingReference(format!(
                "{} run has no OPI total flexibility to compare against",
                self.method
            ))
        })
    }
}

/// Metrics of one run. `opi_total_flexibility` enables the performance ratio.
pub fn compute_metrics(
    traj: &Trajectories,
    scenario: &Scenario,
    seed: u64,
    opi_total_flexibility: Option<f64>,
) -> Result<RunMetrics> {
    let t_len = scenario.clock.horizon_slots;
    if traj.intervals.len() != t_len || traj.emission_power.len() != t_len {
        return Err(Error::Dimension(format!(
            "trajectories cover {} slots, horizon has {t_len}",
            traj.intervals.len()
        )));
    }
    if traj.final_sessions.len() != scenario.sessions.len() {
        return Err(Error::Dimension("final EV states missing".into()));
    }
    let dt = scenario.clock.slot_duration_h;
    let total_flexibility_kwh: f64 = traj.intervals.iter().map(|iv| iv.width() * dt).sum();
    let emitted: f64 = traj
        .emission_power
        .iter()
        .enumerate()
        .map(|(t, p)| scenario.carbon.at(t) * p)
        .sum();
    let mut unfulfilled = 0.0;
    let mut delivered = 0.0;
    let mut task = 0.0;
    for (init, fin) in scenario.sessions.iter().zip(&traj.final_sessions) {
        let need = init.task_energy_kwh().max(0.0);
        let got = (fin.current_energy_kwh - init.initial_energy_kwh).max(0.0);
        let short = init.required_energy_kwh - fin.current_energy_kwh;
        if short > ENERGY_TOL {
            unfulfilled += short;
        }
        delivered += got.min(need);
        task += need;
    }
    let fulfillment_ratio = if task > 0.0 { (delivered / task).clamp(0.0, 1.0) } else { 1.0 };
    let performance_ratio = match opi_total_flexibility {
        Some(opi) if opi > 0.0 => Some(total_flexibility_kwh / opi),
        Some(_) => None,
        None => None,
    };
    let (max_delay_slots, delay_bound_slots) = match &traj.delays {
        Some(d) => (d.max_delay_slots.clone(), d.bound_slots.clone()),
        None => (Vec::new(), Vec::new()),
    };
    let samples: Vec<f64> = traj.intervals.iter().map(|iv| iv.solve_seconds).collect();
    Ok(RunMetrics {
        method: traj.method,
        seed,
        total_flexibility_kwh,
        time_avg_emission_rate_kg_per_h: emitted / t_len as f64,
        unfulfilled_energy_kwh: unfulfilled,
        performance_ratio,
        fulfillment_ratio,
        max_delay_slots,
        delay_bound_slots,
        undeliverable_kw: traj.dispatch.iter().map(|d| d.undeliverable).sum(),
        solve_time: SolveTimeStats::from_samples(&samples),
    })
}

pub const METRICS_HEADER: [&str; 7] = [
    "method",
    "seed",
    "total_flexibility",
    "emission_rate",
    "unfulfilled",
    "perf_ratio",
    "fulfillment_ratio",
];

/// Writes the metrics table. A missing performance ratio is an empty field.
pub fn write_metrics_csv<W: std::io::Write>(rows: &[RunMetrics], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(METRICS_HEADER)?;
    for m in rows {
        wtr.write_record([
            m.method.name().to_string(),
            m.seed.to_string(),
            m.total_flexibility_kwh.to_string(),
            m.time_avg_emission_rate_kg_per_h.to_string(),
            m.unfulfilled_energy_kwh.to_string(),
            m.performance_ratio.map_or(String::new(), |v| v.to_string()),
            m.fulfillment_ratio.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// One row of a metrics table as read back from CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub seed: u64,
    pub total_flexibility: f64,
    pub emission_rate: f64,
    pub unfulfilled: f64,
    pub perf_ratio: Option<f64>,
    pub fulfillment_ratio: f64,
}

pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::Format(format!("unexpected metrics header {header:?}")));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
