//! Operator dispatch, group split, two-stage disaggregation and charging.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::online::FlexibilityInterval;
use crate::queues::{Completion, FifoLedger};
use crate::scenario::EvSession;

/// Slack allowed between a dispatch signal and the deliverable power, kW.
pub const DELIVERY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DispatchPolicy {
    UniformRandom { rng_seed: u64 },
    FixedRatio { gamma: f64 },
    Replay { trace: Vec<f64> },
}

impl Default for DispatchPolicy {
    fn default() -> Self {
        DispatchPolicy::UniformRandom { rng_seed: 0 }
    }
}

impl DispatchPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = |g: f64| (0.0..=1.0).contains(&g);
        match self {
            DispatchPolicy::UniformRandom { .. } => Ok(()),
            DispatchPolicy::FixedRatio { gamma } if ok(*gamma) => Ok(()),
            DispatchPolicy::FixedRatio { .. } => Err(Error::invalid("gamma", "must lie in [0, 1]")),
            DispatchPolicy::Replay { trace } if trace.iter().all(|&g| ok(g)) => Ok(()),
            DispatchPolicy::Replay { .. } => {
                Err(Error::invalid("gamma trace", "every ratio must lie in [0, 1]"))
            }
        }
    }

    /// The ratio sequence for a horizon. Every method run with the same
    /// policy sees the same sequence.
    pub fn gamma_trace(&self, horizon: usize) -> Result<Vec<f64>> {
        self.validate()?;
        match self {
            DispatchPolicy::UniformRandom { rng_seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*rng_seed);
                Ok((0..horizon).map(|_| rng.random::<f64>()).collect())
            }
            DispatchPolicy::FixedRatio { gamma } => Ok(vec![*gamma; horizon]),
            DispatchPolicy::Replay { trace } => {
                if trace.len() < horizon {
                    return Err(Error::invalid(
                        "gamma trace",
                        format!("has {} entries, horizon needs {horizon}", trace.len()),
                    ));
                }
                Ok(trace[..horizon].to_vec())
            }
        }
    }
}

/// `p^d = p̌ + γ(p̂ − p̌)`. A degenerate interval reports `γ = 0`.
pub fn draw_dispatch(interval: &FlexibilityInterval, gamma: f64) -> (f64, f64) {
    let width = interval.upper_sum - interval.lower_sum;
    if width <= 0.0 {
        return (0.0, interval.lower_sum);
    }
    (gamma, interval.lower_sum + gamma * width)
}

/// `p^d_k = (1 − γ)p̌_k + γ p̂_k`
pub fn split_to_groups(interval: &FlexibilityInterval, gamma: f64) -> Vec<f64> {
    interval
        .lower
        .iter()
        .zip(&interval.upper)
        .map(|(lo, up)| (1.0 - gamma) * lo + gamma * up)
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupAllocation {
    pub stage1: f64,
    pub stage2: f64,
    /// Power left over after every member reached its cap.
    pub undeliverable: f64,
    pub completions: Vec<Completion>,
}

/// Serves `dispatch` kW to a group: first its ledger FIFO, then members in
/// the given order (ascending arrival). Allocations are added to `alloc`
/// and subtracted from `residual_cap`, both indexed by EV id.
pub fn disaggregate_two_stage(
    group: usize,
    dispatch: f64,
    ledger: &mut FifoLedger,
    members_by_arrival: &[usize],
    residual_cap: &mut [f64],
    alloc: &mut [f64],
    slot: usize,
) -> Result<GroupAllocation> {
    if dispatch < 0.0 || dispatch.is_nan() {
        return Err(Error::NegativeInput {
            name: "group dispatch",
            value: dispatch,
        });
    }
    let available: f64 = members_by_arrival.iter().map(|&i| residual_cap[i].max(0.0)).sum();
    if dispatch > available + DELIVERY_TOL * (1.0 + available) {
        return Err(Error::Dispatch(format!(
            "group {group}: dispatch {dispatch} exceeds deliverable power {available}"
        )));
    }
    let served = ledger.serve_capped(group, dispatch, residual_cap, slot);
    for &(id, p) in &served.credits {
        alloc[id] += p;
    }
    let mut left = (dispatch - served.consumed).max(0.0);
    let mut stage2 = 0.0;
    for &id in members_by_arrival {
        if left <= 0.0 {
            break;
        }
        let give = residual_cap[id].max(0.0).min(left);
        if give > 0.0 {
            alloc[id] += give;
            residual_cap[id] -= give;
            stage2 += give;
            left -= give;
        }
    }
    Ok(GroupAllocation {
        stage1: served.consumed,
        stage2,
        undeliverable: left,
        completions: served.completions,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DispatchOutcome {
    pub slot: usize,
    pub gamma: f64,
    pub total: f64,
    pub group: Vec<f64>,
    pub stage1: Vec<f64>,
    pub stage2: Vec<f64>,
    /// Power per EV id.
    pub per_ev: Vec<f64>,
    pub emission_rate: f64,
    pub undeliverable: f64,
}

/// EV ids present in `slot`, grouped and sorted by arrival then id.
pub fn members_by_arrival(sessions: &[EvSession], num_groups: usize, slot: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); num_groups];
    for s in sessions.iter().filter(|s| s.in_station(slot)) {
        out[s.group_index].push(s.id);
    }
    for m in &mut out {
        m.sort_by_key(|&id| (sessions[id].arrival_slot, id));
    }
    out
}

/// Adds `δ_c p Δt` to every EV's energy.
pub fn apply_charging(
    sessions: &mut [EvSession],
    per_ev: &[f64],
    efficiency: f64,
    dt_h: f64,
    slot: usize,
) -> Result<()> {
    if per_ev.len() != sessions.len() {
        return Err(Error::Dimension(format!(
            "{} allocations for {} EVs",
            per_ev.len(),
            sessions.len()
        )));
    }
    for (s, &p) in sessions.iter_mut().zip(per_ev) {
        if p == 0.0 {
            continue;
        }
        if p < 0.0 {
            return Err(Error::NegativeInput {
                name: "EV power",
                value: p,
            });
        }
        if !s.in_station(slot) {
            return Err(Error::Dispatch(format!(
                "EV {} allocated {p} kW in slot {slot} while absent",
                s.id
            )));
        }
        let e = s.current_energy_kwh + efficiency * p * dt_h;
        if e > s.max_energy_kwh + 1e-6 {
            return Err(Error::Dispatch(format!(
                "EV {} would reach {e} kWh above its maximum {}",
                s.id, s.max_energy_kwh
            )));
        }
        s.current_energy_kwh = e.min(s.max_energy_kwh);
    }
    Ok(())
}

/// `α = (p̂* − p^reg)/(p̂* − p̌*)`, or 1 for a degenerate interval.
pub fn combination_weight(regulation: f64, lower: f64, upper: f64) -> Result<f64> {
    let tol = 1e-9 * (1.0 + upper.abs());
    if regulation < lower - tol || regulation > upper + tol {
        return Err(Error::Dispatch(format!(
            "regulation {regulation} outside [{lower}, {upper}]"
        )));
    }
    if upper - lower <= 0.0 {
        return Ok(1.0);
    }
    Ok(((upper - regulation) / (upper - lower)).clamp(0.0, 1.0))
}

/// Per-EV powers `α p̌*_i + (1 − α) p̂*_i` for the regulation signal.
pub fn convex_combination_disaggregate(
    regulation: f64,
    lower_sum: f64,
    upper_sum: f64,
    lower_ev: &[f64],
    upper_ev: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if lower_ev.len() != upper_ev.len() {
        return Err(Error::Dimension("lower and upper trajectories differ in length".into()));
    }
    let alpha = combination_weight(regulation, lower_sum, upper_sum)?;
    Ok((
        alpha,
        lower_ev
            .iter()
            .zip(upper_ev)
            .map(|(lo, up)| alpha * lo + (1.0 - alpha) * up)
            .collect(),
    ))
}

/// Writes `slot,gamma,p_dispatch,emission_rate`.
pub fn write_dispatch_csv<W: std::io::Write>(outcomes: &[DispatchOutcome], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["slot", "gamma", "p_dispatch", "emission_rate"])?;
    for o in outcomes {
        wtr.write_record([
            o.slot.to_string(),
            o.gamma.to_string(),
            o.total.to_string(),
            o.emission_rate.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes `slot,ev_id,power` for every non-zero allocation.
pub fn write_allocation_csv<W: std::io::Write>(outcomes: &[DispatchOutcome], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["slot", "ev_id", "power"])?;
    for o in outcomes {
        for (id, &p) in o.per_ev.iter().enumerate() {
            if p != 0.0 {
                wtr.write_record([o.slot.to_string(), id.to_string(), p.to_string()])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispatch_endpoints() {
        let iv = FlexibilityInterval::aggregate(0, 10.0, 20.0);
        assert_eq!(draw_dispatch(&iv, 0.0).1, 10.0);
        assert_eq!(draw_dispatch(&iv, 1.0).1, 20.0);
        assert_eq!(draw_dispatch(&iv, 0.5).1, 15.0);
        let flat = FlexibilityInterval::aggregate(0, 7.0, 7.0);
        assert_eq!(draw_dispatch(&flat, 0.8), (0.0, 7.0));
    }

    #[test]
    fn group_split() {
        let iv = FlexibilityInterval::from_groups(0, vec![2.0, 4.0], vec![6.0, 10.0]);
        let g = split_to_groups(&iv, 0.25);
        assert_eq!(g, vec![3.0, 5.5]);
        let total: f64 = g.iter().sum();
        assert!((total - draw_dispatch(&iv, 0.25).1).abs() < 1e-12);
    }

    #[test]
    fn pure_stage_two() {
        let mut l = FifoLedger::new(1);
        let mut caps = vec![5.0, 5.0];
        let mut alloc = vec![0.0; 2];
        let out = disaggregate_two_stage(0, 7.0, &mut l, &[0, 1], &mut caps, &mut alloc, 3).unwrap();
        assert_eq!((out.stage1, out.stage2), (0.0, 7.0));
        assert_eq!(alloc, vec![5.0, 2.0]);
    }

    #[test]
    fn stage_one_only() {
        let mut l = FifoLedger::new(1);
        l.push(0, 4.0, 0, 0).unwrap();
        let mut caps = vec![5.0];
        let mut alloc = vec![0.0];
        let out = disaggregate_two_stage(0, 3.0, &mut l, &[0], &mut caps, &mut alloc, 1).unwrap();
        assert_eq!((out.stage1, out.stage2), (3.0, 0.0));
        assert_eq!(alloc, vec![3.0]);
        assert!((l.total(0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn both_stages() {
        let mut l = FifoLedger::new(1);
        l.push(0, 4.0, 0, 0).unwrap();
        l.push(0, 2.0, 0, 1).unwrap();
        let mut caps = vec![5.0, 5.0];
        let mut alloc = vec![0.0; 2];
        let out = disaggregate_two_stage(0, 9.0, &mut l, &[0, 1], &mut caps, &mut alloc, 1).unwrap();
        assert_eq!((out.stage1, out.stage2), (6.0, 3.0));
        // EV 0 arrived first: tops up to its cap, EV 1 takes the rest
        assert_eq!(alloc, vec![5.0, 4.0]);
        assert_eq!(out.undeliverable, 0.0);
    }

    #[test]
    fn over_dispatch_is_rejected() {
        let mut l = FifoLedger::new(1);
        let mut caps = vec![1.0];
        let mut alloc = vec![0.0];
        assert!(disaggregate_two_stage(0, 2.0, &mut l, &[0], &mut caps, &mut alloc, 0).is_err());
    }

    #[test]
    fn charging_arithmetic() {
        let mut s = vec![EvSession {
            id: 0,
            arrival_slot: 0,
            departure_slot: 3,
            initial_energy_kwh: 4.0,
            required_energy_kwh: 8.0,
            min_energy_kwh: 0.0,
            max_energy_kwh: 10.0,
            max_power_kw: 5.0,
            capacity_kwh: 10.0,
            group_index: 0,
            current_energy_kwh: 4.0,
        }];
        apply_charging(&mut s, &[0.0], 1.0, 1.0, 0).unwrap();
        assert_eq!(s[0].current_energy_kwh, 4.0);
        apply_charging(&mut s, &[4.0], 1.0, 1.0, 0).unwrap();
        assert_eq!(s[0].current_energy_kwh, 8.0);
        s[0].current_energy_kwh = 0.0;
        apply_charging(&mut s, &[10.0], 0.95, 1.0 / 12.0, 1).unwrap();
        assert!((s[0].current_energy_kwh - 0.791_666_666_666_666_7).abs() < 1e-12);
        assert!(apply_charging(&mut s, &[1.0], 1.0, 1.0, 5).is_err());
    }

    #[test]
    fn convex_weights() {
        assert_eq!(combination_weight(10.0, 4.0, 10.0).unwrap(), 0.0);
        assert_eq!(combination_weight(7.0, 4.0, 10.0).unwrap(), 0.5);
        assert_eq!(combination_weight(3.0, 3.0, 3.0).unwrap(), 1.0);
        assert!(combination_weight(11.0, 4.0, 10.0).is_err());
        let (a, p) = convex_combination_disaggregate(7.0, 4.0, 10.0, &[1.0, 3.0], &[4.0, 6.0]).unwrap();
        assert_eq!(a, 0.5);
        assert_eq!(p, vec![2.5, 4.5]);
    }

    #[test]
    fn gamma_traces() {
        let p = DispatchPolicy::UniformRandom { rng_seed: 4 };
        let a = p.gamma_trace(10).unwrap();
        assert_eq!(a, p.gamma_trace(10).unwrap());
        assert!(a.iter().all(|g| (0.0..1.0).contains(g)));
        assert!(DispatchPolicy::Replay { trace: vec![0.5] }.gamma_trace(2).is_err());
        assert!(DispatchPolicy::FixedRatio { gamma: 1.5 }.validate().is_err());
    }
}
