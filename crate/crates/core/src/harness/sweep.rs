use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::{derive_seed, RunConfig};
use super::metrics::RunMetrics;
use super::run::run_simulation;

/// Seed stream offset for replications, kept apart from the run streams.
const REPLICATION_STREAM: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SweepParam {
    #[serde(rename = "gamma")]
    Gamma,
    #[serde(rename = "beta")]
    Beta,
    #[serde(rename = "V")]
    V,
    #[serde(rename = "r")]
    R,
    #[serde(rename = "fleet_size")]
    FleetSize,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::Beta => "beta",
            SweepParam::V => "V",
            SweepParam::R => "r",
            SweepParam::FleetSize => "fleet_size",
        }
    }

    /// Sets the parameter on a config. `r` moves the queue cap and every
    /// benchmark budget together since both read the same field.
    pub fn apply(self, config: &mut RunConfig, value: f64) -> Result<()> {
        if self == SweepParam::FleetSize && (value < 0.0 || value.fract() != 0.0) {
            return Err(Error::invalid("fleet_size", format!("{value} is not a whole number")));
        }
        config.apply_override(&format!("{}={}", self.name(), value))
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepParam::Gamma),
            "beta" => Ok(SweepParam::Beta),
            "V" | "v" => Ok(SweepParam::V),
            "r" => Ok(SweepParam::R),
            "fleet_size" => Ok(SweepParam::FleetSize),
            _ => Err(Error::invalid(
                "param",
                format!("`{s}` is not one of gamma, beta, V, r, fleet_size"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub replications: usize,
    pub base: RunConfig,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::invalid("values", "must not be empty"));
        }
        if self.replications == 0 {
            return Err(Error::invalid("reps", "must be at least 1"));
        }
        self.base.validate()?;
        for &v in &self.values {
            let mut c = self.base.clone();
            self.param.apply(&mut c, v)?;
        }
        Ok(())
    }

    /// Master seed of replication `rep`; the same for every value.
    pub fn replication_seed(&self, rep: usize) -> u64 {
        derive_seed(self.base.seed, REPLICATION_STREAM + rep as u64)
    }

    pub fn cell_config(&self, value: f64, rep: usize) -> Result<RunConfig> {
        let mut c = self.base.clone();
        self.param.apply(&mut c, value)?;
        c.seed = self.replication_seed(rep);
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub value: f64,
    pub replication: usize,
    pub seed: u64,
    /// The run's metrics, or the error that aborted it.
    pub outcome: std::result::Result<RunMetrics, String>,
}

/// Means over a value's successful replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub runs: usize,
    pub failures: usize,
    pub total_flexibility_kwh: f64,
    pub emission_rate_kg_per_h: f64,
    pub unfulfilled_energy_kwh: f64,
    pub fulfillment_ratio: f64,
    pub performance_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub param: SweepParam,
    pub cells: Vec<SweepCell>,
    pub points: Vec<SweepPoint>,
}

/// Runs every (value, replication) cell in parallel. A failing cell is
/// recorded and the sweep continues.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let jobs: Vec<(f64, usize)> = spec
        .values
        .iter()
        .flat_map(|&v| (0..spec.replications).map(move |r| (v, r)))
        .collect();
    let cells: Vec<SweepCell> = jobs
        .par_iter()
        .map(|&(value, rep)| {
            let seed = spec.replication_seed(rep);
            let outcome = spec
                .cell_config(value, rep)
                .and_then(|c| run_simulation(&c))
                .map(|o| o.metrics)
                .map_err(|e| e.to_string());
            SweepCell {
                value,
                replication: rep,
                seed,
                outcome,
            }
        })
        .collect();
    let points = spec
        .values
        .iter()
        .map(|&v| aggregate(v, cells.iter().filter(|c| c.value == v)))
        .collect();
    Ok(SweepResult {
        param: spec.param,
        cells,
        points,
    })
}

fn aggregate<'a>(value: f64, cells: impl Iterator<Item = &'a SweepCell>) -> SweepPoint {
    let mut ok = Vec::new();
    let mut failures = 0;
    for c in cells {
        match &c.outcome {
            Ok(m) => ok.push(m),
            Err(_) => failures += 1,
        }
    }
    let n = ok.len();
    let mean = |f: &dyn Fn(&RunMetrics) -> f64| {
        if n == 0 {
            f64::NAN
        } else {
            ok.iter().map(|m| f(m)).sum::<f64>() / n as f64
        }
    };
    let ratios: Option<Vec<f64>> = ok.iter().map(|m| m.performance_ratio).collect();
    SweepPoint {
        value,
        runs: n,
        failures,
        total_flexibility_kwh: mean(&|m| m.total_flexibility_kwh),
        emission_rate_kg_per_h: mean(&|m| m.time_avg_emission_rate_kg_per_h),
        unfulfilled_energy_kwh: mean(&|m| m.unfulfilled_energy_kwh),
        fulfillment_ratio: mean(&|m| m.fulfillment_ratio),
        performance_ratio: ratios
            .filter(|r| !r.is_empty())
            .map(|r| r.iter().sum::<f64>() / r.len() as f64),
    }
}

/// Writes one row per cell:
/// `param,value,replication,seed,method,total_flexibility,emission_rate,unfulfilled,perf_ratio,fulfillment_ratio,error`.
pub fn write_sweep_cells_csv<W: std::io::Write>(result: &SweepResult, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "param",
        "value",
        "replication",
        "seed",
        "method",
        "total_flexibility",
        "emission_rate",
        "unfulfilled",
        "perf_ratio",
        "fulfillment_ratio",
        "error",
    ])?;
    for c in &result.cells {
        let head = [
            result.param.name().to_string(),
            c.value.to_string(),
            c.replication.to_string(),
            c.seed.to_string(),
        ];
        let tail = match &c.outcome {
            Ok(m) => [
                m.method.name().to_string(),
                m.total_flexibility_kwh.to_string(),
                m.time_avg_emission_rate_kg_per_h.to_string(),
                m.unfulfilled_energy_kwh.to_string(),
                m.performance_ratio.map_or(String::new(), |v| v.to_string()),
                m.fulfillment_ratio.to_string(),
                String::new(),
            ],
            Err(e) => {
                let mut t: [String; 7] = Default::default();
                t[6] = e.clone();
                t
            }
        };
        let rec: Vec<String> = head.into_iter().chain(tail).collect();
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes the per-value means:
/// `param,value,runs,failures,total_flexibility,emission_rate,unfulfilled,fulfillment_ratio,perf_ratio`.
pub fn write_sweep_summary_csv<W: std::io::Write>(result: &SweepResult, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "param",
        "value",
        "runs",
        "failures",
        "total_flexibility",
        "emission_rate",
        "unfulfilled",
        "fulfillment_ratio",
        "perf_ratio",
    ])?;
    for p in &result.points {
        wtr.write_record([
            result.param.name().to_string(),
            p.value.to_string(),
            p.runs.to_string(),
            p.failures.to_string(),
            p.total_flexibility_kwh.to_string(),
            p.emission_rate_kg_per_h.to_string(),
            p.unfulfilled_energy_kwh.to_string(),
            p.fulfillment_ratio.to_string(),
            p.performance_ratio.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
