//! Stochastic EV fleets, duration groups, task packetization and carbon traces.

use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum redraws per session before sampling gives up.
pub const MAX_RESAMPLES: usize = 100;

/// Snap tolerance for task lengths that are integral up to rounding.
const ETA_SNAP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimClock {
    pub horizon_slots: usize,
    pub slot_duration_h: f64,
}

impl SimClock {
    pub fn new(horizon_slots: usize, slot_duration_h: f64) -> Result<Self> {
        let c = Self {
            horizon_slots,
            slot_duration_h,
        };
        c.validate()?;
        Ok(c)
    }

    /// 24 hours of 5-minute slots.
    pub fn day_5min() -> Self {
        Self {
            horizon_slots: 288,
            slot_duration_h: 1.0 / 12.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon_slots == 0 {
            return Err(Error::invalid("horizon_slots", "must be at least 1"));
        }
        if !(self.slot_duration_h > 0.0 && self.slot_duration_h.is_finite()) {
            return Err(Error::invalid("slot_duration_h", "must be positive"));
        }
        Ok(())
    }

    /// Slot index nearest to an hour-of-day time.
    pub fn hours_to_slot(&self, hours: f64) -> i64 {
        (hours / self.slot_duration_h).round() as i64
    }

    pub fn slots_per_hour(&self) -> f64 {
        1.0 / self.slot_duration_h
    }
}

/// One vehicle's charging contract and its evolving battery state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvSession {
    pub id: usize,
    pub arrival_slot: usize,
    /// First slot the vehicle is no longer present.
    pub departure_slot: usize,
    pub initial_energy_kwh: f64,
    pub required_energy_kwh: f64,
    pub min_energy_kwh: f64,
    pub max_energy_kwh: f64,
    pub max_power_kw: f64,
    pub capacity_kwh: f64,
    pub group_index: usize,
    pub current_energy_kwh: f64,
}

impl EvSession {
    pub fn duration_slots(&self) -> usize {
        self.departure_slot - self.arrival_slot
    }

    pub fn in_station(&self, slot: usize) -> bool {
        self.arrival_slot <= slot && slot < self.departure_slot
    }

    pub fn task_energy_kwh(&self) -> f64 {
        self.required_energy_kwh - self.initial_energy_kwh
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| Error::InfeasibleSession {
            id: self.id,
            reason: reason.to_string(),
        };
        if self.arrival_slot >= self.departure_slot {
            return Err(bad("arrival must precede departure"));
        }
        let chain = [
            self.min_energy_kwh,
            self.initial_energy_kwh,
            self.required_energy_kwh,
            self.max_energy_kwh,
            self.capacity_kwh,
        ];
        if chain.iter().any(|v| !v.is_finite()) || chain.windows(2).any(|w| w[0] > w[1]) {
            return Err(bad("need e_min <= e_ini <= e_req <= e_max <= capacity"));
        }
        if !(self.max_power_kw > 0.0 && self.max_power_kw.is_finite()) {
            return Err(bad("max power must be positive"));
        }
        let tol = 1e-9;
        if self.current_energy_kwh < self.min_energy_kwh - tol
            || self.current_energy_kwh > self.max_energy_kwh + tol
        {
            return Err(bad("current energy outside [e_min, e_max]"));
        }
        Ok(())
    }
}

/// Duration groups sorted by strictly increasing duration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub index: usize,
    pub duration_slots: usize,
    pub member_ids: Vec<usize>,
}

/// Builds one group per whole hour in `[min_h, max_h]`.
pub fn hourly_groups(min_h: usize, max_h: usize, clock: &SimClock) -> Result<Vec<GroupSpec>> {
    if min_h == 0 || min_h > max_h {
        return Err(Error::invalid("group_hours", "need 1 <= min <= max"));
    }
    let per_h = clock.slots_per_hour();
    if (per_h - per_h.round()).abs() > 1e-9 {
        return Err(Error::invalid(
            "slot_duration",
            "hourly groups need an integral number of slots per hour",
        ));
    }
    let per_h = per_h.round() as usize;
    Ok((min_h..=max_h)
        .enumerate()
        .map(|(k, h)| GroupSpec {
            index: k,
            duration_slots: h * per_h,
            member_ids: Vec::new(),
        })
        .collect())
}

fn check_groups(groups: &[GroupSpec]) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::invalid("groups", "at least one group is required"));
    }
    if groups.windows(2).any(|w| w[0].duration_slots >= w[1].duration_slots) {
        return Err(Error::invalid("groups", "durations must increase strictly"));
    }
    if groups[0].duration_slots == 0 {
        return Err(Error::invalid("groups", "durations must be positive"));
    }
    Ok(())
}

/// Group whose duration is nearest to `duration_slots`; ties go to the shorter group.
pub fn assign_group_by_duration(duration_slots: usize, groups: &[GroupSpec]) -> Result<usize> {
    check_groups(groups)?;
    let lo = groups[0].duration_slots;
    let hi = groups[groups.len() - 1].duration_slots;
    if duration_slots < lo || duration_slots > hi {
        return Err(Error::Scenario(format!(
            "duration {duration_slots} slots outside group span [{lo}, {hi}]"
        )));
    }
    let mut best = 0;
    let mut best_gap = usize::MAX;
    for (k, g) in groups.iter().enumerate() {
        let gap = g.duration_slots.abs_diff(duration_slots);
        if gap < best_gap {
            best = k;
            best_gap = gap;
        }
    }
    Ok(best)
}

pub fn assign_group(session: &EvSession, groups: &[GroupSpec]) -> Result<usize> {
    assign_group_by_duration(session.duration_slots(), groups)
}

/// Fills `member_ids` from the sessions' group indices.
pub fn populate_groups(groups: &mut [GroupSpec], sessions: &[EvSession]) -> Result<()> {
    for g in groups.iter_mut() {
        g.member_ids.clear();
    }
    for s in sessions {
        let g = groups.get_mut(s.group_index).ok_or_else(|| {
            Error::Scenario(format!("EV {} references missing group {}", s.id, s.group_index))
        })?;
        g.member_ids.push(s.id);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatteryType {
    pub capacity_kwh: f64,
    pub max_power_kw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetDistribution {
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
    pub fleet_size: usize,
    pub rng_seed: u64,
}

impl Default for FleetDistribution {
    fn default() -> Self {
        Self {
            arrival_mean_h: 9.0,
            arrival_std_h: 1.2,
            departure_mean_h: 18.0,
            departure_std_h: 1.2,
            initial_soc_mean: 0.4,
            initial_soc_std: 0.1,
            required_soc: 0.7,
            max_soc: 0.9,
            min_soc: 0.0,
            charging_efficiency: 0.95,
            battery_menu: vec![
                BatteryType {
                    capacity_kwh: 60.0,
                    max_power_kw: 10.0,
                },
                BatteryType {
                    capacity_kwh: 40.0,
                    max_power_kw: 6.6,
                },
                BatteryType {
                    capacity_kwh: 24.0,
                    max_power_kw: 3.3,
                },
            ],
            fleet_size: 100,
            rng_seed: 0,
        }
    }
}

impl FleetDistribution {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("arrival_mean_h", self.arrival_mean_h),
            ("departure_mean_h", self.departure_mean_h),
            ("initial_soc_mean", self.initial_soc_mean),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(Error::invalid(name, "must be finite"));
            }
        }
        let stds = [
            ("arrival_std_h", self.arrival_std_h),
            ("departure_std_h", self.departure_std_h),
            ("initial_soc_std", self.initial_soc_std),
        ];
        for (name, v) in stds {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be non-negative"));
            }
        }
        if !(self.required_soc > 0.0 && self.required_soc <= self.max_soc && self.max_soc <= 1.0) {
            return Err(Error::invalid(
                "required_soc",
                "need 0 < required_soc <= max_soc <= 1",
            ));
        }
        if !(self.min_soc >= 0.0 && self.min_soc < self.required_soc) {
            return Err(Error::invalid("min_soc", "need 0 <= min_soc < required_soc"));
        }
        if !(self.charging_efficiency > 0.0 && self.charging_efficiency <= 1.0) {
            return Err(Error::invalid("charging_efficiency", "must lie in (0, 1]"));
        }
        if self.battery_menu.is_empty() {
            return Err(Error::invalid("battery_menu", "must not be empty"));
        }
        for b in &self.battery_menu {
            if !(b.capacity_kwh > 0.0 && b.max_power_kw > 0.0)
                || !b.capacity_kwh.is_finite()
                || !b.max_power_kw.is_finite()
            {
                return Err(Error::invalid("battery_menu", "capacity and power must be positive"));
            }
        }
        Ok(())
    }

    fn soc_bounds(&self) -> (f64, f64) {
        let lo = (self.min_soc + 0.05).max(0.05);
        let hi = (self.required_soc - 0.05).max(lo);
        (lo, hi)
    }
}

/// Draws a fleet; sessions violating the stay window, group span or charging
/// feasibility are redrawn.
pub fn sample_fleet(
    dist: &FleetDistribution,
    clock: &SimClock,
    groups: &[GroupSpec],
) -> Result<Vec<EvSession>> {
    dist.validate()?;
    clock.validate()?;
    check_groups(groups)?;
    let normal = |m: f64, s: f64| Normal::new(m, s).map_err(|e| Error::Scenario(e.to_string()));
    let arr = normal(dist.arrival_mean_h, dist.arrival_std_h)?;
    let dep = normal(dist.departure_mean_h, dist.departure_std_h)?;
    let soc = normal(dist.initial_soc_mean, dist.initial_soc_std)?;
    let (soc_lo, soc_hi) = dist.soc_bounds();
    let min_d = groups[0].duration_slots;
    let max_d = groups[groups.len() - 1].duration_slots;
    let horizon = clock.horizon_slots as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(dist.rng_seed);

    let mut fleet = Vec::with_capacity(dist.fleet_size);
    for id in 0..dist.fleet_size {
        let mut accepted = None;
        for _ in 0..MAX_RESAMPLES {
            let ta = clock.hours_to_slot(arr.sample(&mut rng));
            let td = clock.hours_to_slot(dep.sample(&mut rng));
            let s0 = soc.sample(&mut rng).clamp(soc_lo, soc_hi);
            let b = dist.battery_menu[rng.random_range(0..dist.battery_menu.len())];
            if ta < 0 || td > horizon || ta >= td {
                continue;
            }
            let dur = (td - ta) as usize;
            if dur < min_d || dur > max_d {
                continue;
            }
            let mut s = EvSession {
                id,
                arrival_slot: ta as usize,
                departure_slot: td as usize,
                initial_energy_kwh: s0 * b.capacity_kwh,
                required_energy_kwh: dist.required_soc * b.capacity_kwh,
                min_energy_kwh: dist.min_soc * b.capacity_kwh,
                max_energy_kwh: dist.max_soc * b.capacity_kwh,
                max_power_kw: b.max_power_kw,
                capacity_kwh: b.capacity_kwh,
                group_index: 0,
                current_energy_kwh: s0 * b.capacity_kwh,
            };
            if required_slots(&s, dist.charging_efficiency, clock) > dur {
                continue;
            }
            s.group_index = assign_group(&s, groups)?;
            accepted = Some(s);
            break;
        }
        match accepted {
            Some(s) => fleet.push(s),
            None => {
                return Err(Error::Scenario(format!(
                    "EV {id}: no feasible session after {MAX_RESAMPLES} draws; \
                     distribution is incompatible with the group span"
                )))
            }
        }
    }
    Ok(fleet)
}

/// `η = e_task / (δ_c · p_max · Δt)`, snapped to an integer when within rounding.
pub fn task_length(session: &EvSession, efficiency: f64, clock: &SimClock) -> f64 {
    let eta = session.task_energy_kwh() / (efficiency * session.max_power_kw * clock.slot_duration_h);
    if (eta - eta.round()).abs() < ETA_SNAP {
        eta.round()
    } else {
        eta
    }
}

/// Slots needed to deliver the task at full power.
pub fn required_slots(session: &EvSession, efficiency: f64, clock: &SimClock) -> usize {
    task_length(session, efficiency, clock).ceil().max(0.0) as usize
}

/// Per-slot task power of one EV over the horizon.
pub fn packetize(session: &EvSession, clock: &SimClock, efficiency: f64) -> Result<Vec<f64>> {
    if !(efficiency > 0.0 && efficiency <= 1.0) {
        return Err(Error::invalid("charging_efficiency", "must lie in (0, 1]"));
    }
    let task = session.task_energy_kwh();
    if task < 0.0 {
        return Err(Error::InfeasibleSession {
            id: session.id,
            reason: format!("negative task energy {task}"),
        });
    }
    let eta = task_length(session, efficiency, clock);
    let full = eta.floor() as usize;
    let needed = eta.ceil() as usize;
    if session.arrival_slot + needed > session.departure_slot {
        return Err(Error::InfeasibleSession {
            id: session.id,
            reason: format!(
                "needs {needed} slots at full power but stays {}",
                session.duration_slots()
            ),
        });
    }
    let mut a = vec![0.0; clock.horizon_slots];
    let p = session.max_power_kw;
    for t in session.arrival_slot..session.arrival_slot + full {
        a[t] = p;
    }
    if needed > full {
        let rem = task / (efficiency * clock.slot_duration_h) - full as f64 * p;
        a[session.arrival_slot + full] = rem.clamp(0.0, p);
    }
    Ok(a)
}

/// Task arrival powers per EV, group and slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskArrivalStream {
    /// `per_ev[i][t]`
    pub per_ev: Vec<Vec<f64>>,
    /// `per_group[k][t]`
    pub per_group: Vec<Vec<f64>>,
    pub total: Vec<f64>,
}

impl TaskArrivalStream {
    pub fn build(
        sessions: &[EvSession],
        num_groups: usize,
        clock: &SimClock,
        efficiency: f64,
    ) -> Result<Self> {
        let t_len = clock.horizon_slots;
        let mut per_ev = Vec::with_capacity(sessions.len());
        let mut per_group = vec![vec![0.0; t_len]; num_groups];
        for s in sessions {
            if s.departure_slot > t_len {
                return Err(Error::InfeasibleSession {
                    id: s.id,
                    reason: "departure beyond horizon".into(),
                });
            }
            if s.group_index >= num_groups {
                return Err(Error::Scenario(format!(
                    "EV {} in group {} but only {num_groups} groups",
                    s.id, s.group_index
                )));
            }
            let a = packetize(s, clock, efficiency)?;
            for (t, v) in a.iter().enumerate() {
                per_group[s.group_index][t] += v;
            }
            per_ev.push(a);
        }
        let total = (0..t_len)
            .map(|t| per_group.iter().map(|g| g[t]).sum())
            .collect();
        Ok(Self {
            per_ev,
            per_group,
            total,
        })
    }
}

/// Source of the grid carbon-intensity trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CarbonSource {
    /// CSV with header `hour,intensity_kg_per_kwh`.
    Csv {
        path: std::path::PathBuf,
        /// Repeat the file cyclically when it is shorter than the horizon.
        #[serde(default)]
        cyclic: bool,
    },
    Constant {
        intensity_kg_per_kwh: f64,
    },
    /// `base + amp · sin(2π (t·Δt − phase) / 24)`
    Sinusoid {
        base_kg_per_kwh: f64,
        amplitude_kg_per_kwh: f64,
        phase_h: f64,
    },
}

impl Default for CarbonSource {
    /// Diurnal profile with its minimum at 13:00.
    fn default() -> Self {
        CarbonSource::Sinusoid {
            base_kg_per_kwh: 0.25,
            amplitude_kg_per_kwh: 0.15,
            phase_h: 19.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarbonTrace {
    pub intensity: Vec<f64>,
}

impl CarbonTrace {
    pub fn len(&self) -> usize {
        self.intensity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensity.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.intensity.iter().copied().fold(0.0, f64::max)
    }

    pub fn at(&self, slot: usize) -> f64 {
        self.intensity[slot]
    }

    fn checked(intensity: Vec<f64>) -> Result<Self> {
        for (t, &w) in intensity.iter().enumerate() {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::CarbonTrace(format!(
                    "intensity at slot {t} must be positive, got {w}"
                )));
            }
        }
        Ok(Self { intensity })
    }
}

#[derive(Debug, Deserialize)]
struct CarbonRow {
    hour: f64,
    intensity_kg_per_kwh: f64,
}

pub fn load_carbon_trace(source: &CarbonSource, clock: &SimClock) -> Result<CarbonTrace> {
    clock.validate()?;
    let t_len = clock.horizon_slots;
    match source {
        CarbonSource::Constant {
            intensity_kg_per_kwh,
        } => CarbonTrace::checked(vec![*intensity_kg_per_kwh; t_len]),
        CarbonSource::Sinusoid {
            base_kg_per_kwh,
            amplitude_kg_per_kwh,
            phase_h,
        } => {
            let w = (0..t_len)
                .map(|t| {
                    let h = t as f64 * clock.slot_duration_h;
                    base_kg_per_kwh
                        + amplitude_kg_per_kwh
                            * (2.0 * std::f64::consts::PI * (h - phase_h) / 24.0).sin()
                })
                .collect();
            CarbonTrace::checked(w)
        }
        CarbonSource::Csv { path, cyclic } => {
            let file = std::fs::File::open(path).map_err(|e| {
                Error::CarbonTrace(format!("cannot open {}: {e}", path.display()))
            })?;
            carbon_trace_from_reader(file, clock, *cyclic)
        }
    }
}

/// Parses an hourly-or-finer carbon CSV and step-interpolates it onto the clock.
pub fn carbon_trace_from_reader<R: std::io::Read>(
    reader: R,
    clock: &SimClock,
    cyclic: bool,
) -> Result<CarbonTrace> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["hour", "intensity_kg_per_kwh"] {
        return Err(Error::CarbonTrace(format!(
            "expected header `hour,intensity_kg_per_kwh`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.deserialize::<CarbonRow>().enumerate() {
        let row = rec.map_err(|e| Error::CarbonTrace(format!("row {}: {e}", line + 2)))?;
        if !(row.intensity_kg_per_kwh > 0.0 && row.intensity_kg_per_kwh.is_finite()) {
            return Err(Error::CarbonTrace(format!(
                "row {}: intensity must be positive, got {}",
                line + 2,
                row.intensity_kg_per_kwh
            )));
        }
        if !row.hour.is_finite() {
            return Err(Error::CarbonTrace(format!("row {}: hour must be finite", line + 2)));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::CarbonTrace("no data rows".into()));
    }
    if rows.windows(2).any(|w| w[1].hour <= w[0].hour) {
        return Err(Error::CarbonTrace("hours must increase strictly".into()));
    }
    let step = if rows.len() >= 2 {
        rows[1].hour - rows[0].hour
    } else {
        1.0
    };
    if rows.windows(2).any(|w| ((w[1].hour - w[0].hour) - step).abs() > 1e-9) {
        return Err(Error::CarbonTrace("rows must be evenly spaced".into()));
    }
    let start = rows[0].hour;
    let span = step * rows.len() as f64;
    let mut w = Vec::with_capacity(clock.horizon_slots);
    for t in 0..clock.horizon_slots {
        let mut h = t as f64 * clock.slot_duration_h - start;
        if h < -1e-9 {
            return Err(Error::CarbonTrace(format!(
                "trace starts at hour {start}, after slot {t}"
            )));
        }
        if h >= span - 1e-9 {
            if !cyclic {
                return Err(Error::CarbonTrace(format!(
                    "trace covers {span} h but the horizon needs {} h; enable cyclic extension",
                    clock.horizon_slots as f64 * clock.slot_duration_h
                )));
            }
            h = h.rem_euclid(span);
        }
        let idx = ((h + 1e-9) / step).floor() as usize;
        w.push(rows[idx.min(rows.len() - 1)].intensity_kg_per_kwh);
    }
    CarbonTrace::checked(w)
}

#[derive(Debug, Serialize, Deserialize)]
struct FleetRow {
    id: usize,
    arrival_slot: usize,
    departure_slot: usize,
    e_ini: f64,
    e_req: f64,
    e_min: f64,
    e_max: f64,
    p_max: f64,
    capacity: f64,
    group: usize,
}

pub fn write_fleet_csv<W: std::io::Write>(sessions: &[EvSession], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for s in sessions {
        wtr.serialize(FleetRow {
            id: s.id,
            arrival_slot: s.arrival_slot,
            departure_slot: s.departure_slot,
            e_ini: s.initial_energy_kwh,
            e_req: s.required_energy_kwh,
            e_min: s.min_energy_kwh,
            e_max: s.max_energy_kwh,
            p_max: s.max_power_kw,
            capacity: s.capacity_kwh,
            group: s.group_index,
        })?;
    }
    if sessions.is_empty() {
        wtr.write_record([
            "id",
            "arrival_slot",
            "departure_slot",
            "e_ini",
            "e_req",
            "e_min",
            "e_max",
            "p_max",
            "capacity",
            "group",
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_fleet_csv<R: std::io::Read>(r: R) -> Result<Vec<EvSession>> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rdr.deserialize::<FleetRow>() {
        let row = rec?;
        let s = EvSession {
            id: row.id,
            arrival_slot: row.arrival_slot,
            departure_slot: row.departure_slot,
            initial_energy_kwh: row.e_ini,
            required_energy_kwh: row.e_req,
            min_energy_kwh: row.e_min,
            max_energy_kwh: row.e_max,
            max_power_kw: row.p_max,
            capacity_kwh: row.capacity,
            group_index: row.group,
            current_energy_kwh: row.e_ini,
        };
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

pub fn save_fleet(sessions: &[EvSession], path: &Path) -> Result<()> {
    write_fleet_csv(sessions, std::fs::File::create(path)?)
}

pub fn load_fleet(path: &Path) -> Result<Vec<EvSession>> {
    read_fleet_csv(std::fs::File::open(path)?)
}

/// A complete simulation input: fleet, groups, task stream and carbon trace.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub clock: SimClock,
    pub efficiency: f64,
    pub sessions: Vec<EvSession>,
    pub groups: Vec<GroupSpec>,
    pub arrivals: TaskArrivalStream,
    pub carbon: CarbonTrace,
}

impl Scenario {
    /// Assembles and validates a scenario from explicit sessions. Ids must be
    /// `0..n` in order.
    pub fn from_parts(
        clock: SimClock,
        efficiency: f64,
        sessions: Vec<EvSession>,
        mut groups: Vec<GroupSpec>,
        carbon: CarbonTrace,
    ) -> Result<Self> {
        clock.validate()?;
        check_groups(&groups)?;
        if carbon.len() != clock.horizon_slots {
            return Err(Error::CarbonTrace(format!(
                "trace has {} slots, horizon has {}",
                carbon.len(),
                clock.horizon_slots
            )));
        }
        for (i, s) in sessions.iter().enumerate() {
            if s.id != i {
                return Err(Error::Scenario(format!("EV at position {i} has id {}", s.id)));
            }
            s.validate()?;
        }
        populate_groups(&mut groups, &sessions)?;
        let arrivals = TaskArrivalStream::build(&sessions, groups.len(), &clock, efficiency)?;
        Ok(Self {
            clock,
            efficiency,
            sessions,
            groups,
            arrivals,
            carbon,
        })
    }

    pub fn generate(
        dist: &FleetDistribution,
        clock: SimClock,
        groups: Vec<GroupSpec>,
        carbon: &CarbonSource,
    ) -> Result<Self> {
        let sessions = sample_fleet(dist, &clock, &groups)?;
        let trace = load_carbon_trace(carbon, &clock)?;
        Self::from_parts(clock, dist.charging_efficiency, sessions, groups, trace)
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn group_durations(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.duration_slots).collect()
    }
}
