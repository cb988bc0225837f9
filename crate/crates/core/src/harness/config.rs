use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::benchmarks::DEFAULT_EPSILON;
use crate::dispatch::DispatchPolicy;
use crate::error::{Error, Result};
use crate::online::OnlineParams;
use crate::scenario::{
    hourly_groups, load_carbon_trace, load_fleet, BatteryType, CarbonSource, FleetDistribution,
    Scenario, SimClock,
};

use super::sim::{Method, MethodSettings};

pub const SCHEMA_VERSION: u32 = 1;

/// Seed streams split off a run's master seed.
const FLEET_STREAM: u64 = 0;
const DISPATCH_STREAM: u64 = 1;

/// Counter-based seed split: `splitmix64(master + (stream + 1)·φ)`.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fleet distribution without its seed, which comes from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetConfig {
    pub fleet_size: usize,
    pub arrival_mean_h: f64,
    pub arrival_std_h: f64,
    pub departure_mean_h: f64,
    pub departure_std_h: f64,
    pub initial_soc_mean: f64,
    pub initial_soc_std: f64,
    pub required_soc: f64,
    pub max_soc: f64,
    pub min_soc: f64,
    pub charging_efficiency: f64,
    pub battery_menu: Vec<BatteryType>,
}

impl Default for FleetConfig {
    fn default() -> Self {
        let d = FleetDistribution::default();
        Self {
            fleet_size: d.fleet_size,
            arrival_mean_h: d.arrival_mean_h,
            arrival_std_h: d.arrival_std_h,
            departure_mean_h: d.departure_mean_h,
            departure_std_h: d.departure_std_h,
            initial_soc_mean: d.initial_soc_mean,
            initial_soc_std: d.initial_soc_std,
            required_soc: d.required_soc,
            max_soc: d.max_soc,
            min_soc: d.min_soc,
            charging_efficiency: d.charging_efficiency,
            battery_menu: d.battery_menu,
        }
    }
}

impl FleetConfig {
    pub fn distribution(&self, rng_seed: u64) -> FleetDistribution {
        FleetDistribution {
            arrival_mean_h: self.arrival_mean_h,
            arrival_std_h: self.arrival_std_h,
            departure_mean_h: self.departure_mean_h,
            departure_std_h: self.departure_std_h,
            initial_soc_mean: self.initial_soc_mean,
            initial_soc_std: self.initial_soc_std,
            required_soc: self.required_soc,
            max_soc: self.max_soc,
            min_soc: self.min_soc,
            charging_efficiency: self.charging_efficiency,
            battery_menu: self.battery_menu.clone(),
            fleet_size: self.fleet_size,
            rng_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub horizon_slots: usize,
    pub slot_duration_min: f64,
    pub group_min_duration_h: usize,
    pub group_max_duration_h: usize,
    pub fleet: FleetConfig,
    /// Fleet CSV used instead of sampling `fleet`. Its efficiency is
    /// `fleet.charging_efficiency`.
    pub fleet_csv: Option<PathBuf>,
    pub carbon: CarbonSource,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            horizon_slots: 288,
            slot_duration_min: 5.0,
            group_min_duration_h: 4,
            group_max_duration_h: 12,
            fleet: FleetConfig::default(),
            fleet_csv: None,
            carbon: CarbonSource::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn clock(&self) -> Result<SimClock> {
        if !(self.slot_duration_min > 0.0 && self.slot_duration_min.is_finite()) {
            return Err(Error::invalid("slot_duration_min", "must be positive"));
        }
        SimClock::new(self.horizon_slots, self.slot_duration_min / 60.0)
    }

    /// Builds the scenario; `fleet_seed` drives sampling.
    pub fn build(&self, fleet_seed: u64) -> Result<Scenario> {
        let clock = self.clock()?;
        let groups = hourly_groups(self.group_min_duration_h, self.group_max_duration_h, &clock)?;
        match &self.fleet_csv {
            Some(path) => {
                let sessions = load_fleet(path)?;
                let trace = load_carbon_trace(&self.carbon, &clock)?;
                Scenario::from_parts(clock, self.fleet.charging_efficiency, sessions, groups, trace)
            }
            None => Scenario::generate(&self.fleet.distribution(fleet_seed), clock, groups, &self.carbon),
        }
    }
}

/// Weights of the per-slot problem and the carbon rate cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlConfig {
    pub flexibility_weight: f64,
    pub carbon_queue_weight: f64,
    pub delay_weight: f64,
    pub rate_cap_kg_per_h: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        let p = OnlineParams::default();
        Self {
            flexibility_weight: p.flexibility_weight,
            carbon_queue_weight: p.carbon_queue_weight,
            delay_weight: p.delay_weight,
            rate_cap_kg_per_h: p.rate_cap_kg_per_h,
        }
    }
}

/// How the operator picks `γ_t`. Random draws use the dispatch seed stream.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DispatchConfig {
    #[default]
    UniformRandom,
    FixedRatio {
        gamma: f64,
    },
    Replay {
        trace: Vec<f64>,
    },
}

impl DispatchConfig {
    pub fn policy(&self, rng_seed: u64) -> DispatchPolicy {
        match self {
            DispatchConfig::UniformRandom => DispatchPolicy::UniformRandom { rng_seed },
            DispatchConfig::FixedRatio { gamma } => DispatchPolicy::FixedRatio { gamma: *gamma },
            DispatchConfig::Replay { trace } => DispatchPolicy::Replay {
                trace: trace.clone(),
            },
        }
    }
}

/// A complete, versioned run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub dispatch: DispatchConfig,
    #[serde(default = "default_true")]
    pub feedback_enabled: bool,
    /// Master seed; the fleet and the dispatch ratios use streams split from it.
    #[serde(default)]
    pub seed: u64,
    /// Uniqueness weight of the offline problem (OPI, MPC).
    #[serde(default = "default_epsilon")]
    pub offline_epsilon: f64,
    /// Solve OPI alongside the run to report the performance ratio.
    #[serde(default = "default_true")]
    pub performance_ratio: bool,
}

fn default_method() -> Method {
    Method::Proposed
}

fn default_true() -> bool {
    true
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scenario: ScenarioConfig::default(),
            method: Method::Proposed,
            control: ControlConfig::default(),
            dispatch: DispatchConfig::default(),
            feedback_enabled: true,
            seed: 0,
            offline_epsilon: DEFAULT_EPSILON,
            performance_ratio: true,
        }
    }
}

/// Short override names and the config paths they stand for.
const ALIASES: [(&str, &str); 9] = [
    ("V", "control.flexibility_weight"),
    ("beta", "control.carbon_queue_weight"),
    ("lambda", "control.delay_weight"),
    ("r", "control.rate_cap_kg_per_h"),
    ("fleet_size", "scenario.fleet.fleet_size"),
    ("seed", "seed"),
    ("method", "method"),
    ("feedback", "feedback_enabled"),
    ("epsilon", "offline_epsilon"),
];

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative CSV paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Joins relative CSV paths onto `dir`.
    pub fn resolve_paths(&mut self, dir: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        if let Some(p) = &mut self.scenario.fleet_csv {
            join(p);
        }
        if let CarbonSource::Csv { path, .. } = &mut self.scenario.carbon {
            join(path);
        }
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        let clock = self.scenario.clock()?;
        hourly_groups(
            self.scenario.group_min_duration_h,
            self.scenario.group_max_duration_h,
            &clock,
        )?;
        self.online_params()?.validate()?;
        let fleet = self.scenario.fleet.distribution(0);
        fleet.validate()?;
        self.dispatch.policy(0).validate()?;
        if !(self.offline_epsilon > 0.0 && self.offline_epsilon.is_finite()) {
            return Err(Error::invalid("offline_epsilon", "must be positive"));
        }
        if let Some(path) = &self.scenario.fleet_csv {
            if !path.is_file() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("fleet_csv {} does not exist", path.display()),
                )));
            }
        }
        if let CarbonSource::Csv { path, .. } = &self.scenario.carbon {
            if !path.is_file() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("carbon csv {} does not exist", path.display()),
                )));
            }
        }
        Ok(())
    }

    pub fn online_params(&self) -> Result<OnlineParams> {
        let c = &self.control;
        let p = OnlineParams {
            flexibility_weight: c.flexibility_weight,
            carbon_queue_weight: c.carbon_queue_weight,
            delay_weight: c.delay_weight,
            rate_cap_kg_per_h: c.rate_cap_kg_per_h,
            slot_duration_h: self.scenario.clock()?.slot_duration_h,
        };
        Ok(p)
    }

    pub fn method_settings(&self) -> Result<MethodSettings> {
        Ok(MethodSettings {
            online: self.online_params()?,
            feedback: self.feedback_enabled,
            epsilon: self.offline_epsilon,
        })
    }

    pub fn fleet_seed(&self) -> u64 {
        derive_seed(self.seed, FLEET_STREAM)
    }

    pub fn dispatch_seed(&self) -> u64 {
        derive_seed(self.seed, DISPATCH_STREAM)
    }

    pub fn build_scenario(&self) -> Result<Scenario> {
        self.scenario.build(self.fleet_seed())
    }

    pub fn gamma_trace(&self) -> Result<Vec<f64>> {
        self.dispatch
            .policy(self.dispatch_seed())
            .gamma_trace(self.scenario.horizon_slots)
    }

    /// Applies `key=value`. Keys are dotted config paths or one of the
    /// aliases `V`, `beta`, `lambda`, `r`, `gamma`, `fleet_size`, `seed`,
    /// `method`, `feedback`, `epsilon`. Values are JSON, or bare strings.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::invalid("override", format!("`{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        if key == "gamma" {
            tree["dispatch"] = serde_json::json!({ "mode": "fixed_ratio", "gamma": value });
        } else {
            let path = ALIASES
                .iter()
                .find(|(alias, _)| *alias == key)
                .map_or(key, |(_, p)| *p);
            let mut node = &mut tree;
            for part in path.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|o| o.get_mut(part))
                    .ok_or_else(|| Error::Format(format!("unknown field `{key}` in override")))?;
            }
            *node = value;
        }
        let cfg: RunConfig = serde_json::from_value(tree)?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_json_str(r#"{"schema_version": 1}"#).unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::from_json_str(r#"{"schema_version": 1, "contrl": {}}"#).unwrap_err();
        assert!(err.to_string().contains("unknown field"), "{err}");
        let err = RunConfig::from_json_str(
            r#"{"schema_version": 1, "control": {"rate_cap": 30}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("rate_cap"), "{err}");
    }

    #[test]
    fn overrides_and_aliases() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("V=12000").unwrap();
        assert_eq!(cfg.control.flexibility_weight, 12000.0);
        cfg.apply_override("gamma=0.35").unwrap();
        assert_eq!(cfg.dispatch, DispatchConfig::FixedRatio { gamma: 0.35 });
        cfg.apply_override("method=b3").unwrap();
        assert_eq!(cfg.method, Method::B3);
        cfg.apply_override("scenario.fleet.arrival_mean_h=8.5").unwrap();
        assert_eq!(cfg.scenario.fleet.arrival_mean_h, 8.5);
        assert!(cfg.apply_override("nope=1").is_err());
        let before = cfg.clone();
        let err = cfg.apply_override("r=-5").unwrap_err();
        assert!(err.to_string().contains("rate_cap_kg_per_h"), "{err}");
        assert_eq!(cfg, before);
    }

    #[test]
    fn seed_streams_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }
}
