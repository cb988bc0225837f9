//! Offline flexibility region with perfect information.
//!
//! Every EV gets an upper and a lower power trajectory with their energy
//! trajectories. The region maximizes `Σ_t [S_t Δt − ε S_t²]` where
//! `S_t = Σ_i (p̂_{i,t} − p̌_{i,t})`, subject to per-EV power limits, SoC
//! dynamics, energy bounds, the departure requirement, `p̌_{i,t} ≤ p̂_{i,t}`
//! and the carbon budget `Σ_t w_t p̂_{s,t} ≤ budget` on the upper trajectory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{self, CscMatrix, IpmSettings, QpProblem, QpStatus};
use crate::scenario::{EvSession, Scenario, SimClock};

/// Default uniqueness weight `ε`.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Multiple of the largest marginal value of a kWh of departure requirement
/// charged per kWh left unmet, so the shortfall is zero whenever the
/// requirement can be met within the budget.
const SHORTFALL_MARGIN: f64 = 10.0;

/// Energy headroom in kWh below which an EV is left out of the problem.
const HEADROOM_TOL: f64 = 1e-9;

/// Offline region over slots `[start_slot, end_slot)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineSolution {
    pub start_slot: usize,
    pub end_slot: usize,
    /// `upper_power[i][t − start]`
    pub upper_power: Vec<Vec<f64>>,
    pub lower_power: Vec<Vec<f64>>,
    /// Energy at the start of each slot and after the last, length `end − start + 1`.
    pub upper_energy: Vec<Vec<f64>>,
    pub lower_energy: Vec<Vec<f64>>,
    pub upper_sum: Vec<f64>,
    pub lower_sum: Vec<f64>,
    pub objective: f64,
    pub epsilon: f64,
    pub iterations: usize,
    /// Departure requirement the carbon budget left unmet, summed over EVs.
    pub shortfall_kwh: f64,
}

impl OfflineSolution {
    pub fn len(&self) -> usize {
        self.end_slot - self.start_slot
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `Σ_t (p̂_{s,t} − p̌_{s,t}) Δt`
    pub fn total_flexibility(&self, dt_h: f64) -> f64 {
        self.upper_sum
            .iter()
            .zip(&self.lower_sum)
            .map(|(u, l)| (u - l) * dt_h)
            .sum()
    }
}

/// Inputs of one offline solve. Sessions carry their current energy, which
/// is taken as the energy at `start_slot`.
#[derive(Debug, Clone)]
pub struct OfflineProblem<'a> {
    pub sessions: &'a [EvSession],
    pub carbon: &'a [f64],
    pub clock: SimClock,
    pub efficiency: f64,
    pub start_slot: usize,
    /// Right-hand side of `Σ_t w_t p̂_{s,t} ≤ budget`, in kg/h·slots.
    pub carbon_budget: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy)]
struct EvBlock {
    id: usize,
    first: usize,
    len: usize,
    /// Offset of the block's first variable.
    var: usize,
    /// Offset of the block's first row.
    row: usize,
    e0: f64,
    e_max: f64,
    e_final: f64,
    p_max: f64,
    /// The requirement equals the reachable maximum, so both trajectories
    /// coincide and share one set of variables.
    pinned: bool,
}

impl EvBlock {
    /// Offset of the lower trajectory's first variable.
    fn lower_var(&self) -> usize {
        if self.pinned {
            self.var
        } else {
            self.var + self.len
        }
    }
}

// Powers are implied by energies, `p_j = (e_{j+1} − e_j)/(δΔt)` with the
// fixed `e_0`. Per-EV variable block, `L` slots:
//   [ê_1..ê_L, ě_1..ě_L]
// Per-EV row block, each of length `L`:
//   ê_{j+1} − ê_j ≤ δΔt p_max,  ě_{j+1} − ě_j ≥ 0,
//   (ê_{j+1} − ê_j) − (ě_{j+1} − ě_j) ≥ 0,  ê_{j+1} ≤ e_max
// The remaining power and energy bounds are implied: p̌ ≤ p̂ ≤ p_max,
// 0 ≤ p̌ ≤ p̂, ě ≤ ê ≤ e_max and e_0 ≤ ě.
// A pinned EV has the single block [e_1..e_L] with rows
//   0 ≤ e_{j+1} − e_j ≤ δΔt p_max,  e_{j+1} ≤ e_max.
// After the shared rows come, per EV, v ≥ 0 and ě_L + v ≥ e_final with
// shortfall variable v; ê_L ≥ ě_L is implied.
const VARS_PER_SLOT: usize = 2;
const ROWS_PER_SLOT: usize = 4;
const PINNED_VARS_PER_SLOT: usize = 1;
const PINNED_ROWS_PER_SLOT: usize = 2;

/// Variable and row layout of an offline problem.
#[derive(Debug, Clone)]
struct OfflineLayout {
    start: usize,
    end: usize,
    blocks: Vec<EvBlock>,
    v_var: usize,
}

fn validate(p: &OfflineProblem) -> Result<()> {
    p.clock.validate()?;
    if p.carbon.len() < p.clock.horizon_slots {
        return Err(Error::CarbonTrace("trace shorter than horizon".into()));
    }
    if !(p.epsilon > 0.0 && p.epsilon.is_finite()) {
        return Err(Error::invalid("epsilon", "must be positive"));
    }
    if !p.carbon_budget.is_finite() {
        return Err(Error::invalid("carbon_budget", "must be finite"));
    }
    for (i, s) in p.sessions.iter().enumerate() {
        if s.id != i {
            return Err(Error::Scenario(format!("EV at position {i} has id {}", s.id)));
        }
    }
    Ok(())
}

/// Builds the offline QP and its layout.
fn build_offline(p: &OfflineProblem) -> Result<(QpProblem, OfflineLayout)> {
    validate(p)?;
    let start = p.start_slot;
    let dt = p.clock.slot_duration_h;
    let de = p.efficiency * dt;
    let horizon = p.clock.horizon_slots;

    let mut blocks = Vec::new();
    let mut n = 0;
    let mut m = 0;
    let mut end = start;
    for s in p.sessions {
        let first = s.arrival_slot.max(start);
        let last = s.departure_slot.min(horizon);
        let e0 = s.current_energy_kwh;
        // an EV without headroom has a single feasible point and no interior
        if first >= last || s.max_energy_kwh - e0 <= HEADROOM_TOL {
            continue;
        }
        let len = last - first;
        // the departure requirement is relaxed to what remains physically reachable
        let reach = (e0 + de * s.max_power_kw * len as f64).min(s.max_energy_kwh);
        let e_final = s.required_energy_kwh.min(reach).max(e0.min(s.max_energy_kwh));
        let pinned = e_final >= reach - HEADROOM_TOL;
        blocks.push(EvBlock {
            id: s.id,
            first,
            len,
            var: n,
            row: m,
            e0,
            e_max: s.max_energy_kwh.max(e0),
            e_final,
            p_max: s.max_power_kw,
            pinned,
        });
        if pinned {
            n += PINNED_VARS_PER_SLOT * len;
            m += PINNED_ROWS_PER_SLOT * len;
        } else {
            n += VARS_PER_SLOT * len;
            m += ROWS_PER_SLOT * len;
        }
        end = end.max(last);
    }
    let window = end - start;
    let s_var = n;
    n += window;
    let s_row = m;
    m += window;
    let carbon_row = m;
    m += 1;
    let v_var = n;
    n += blocks.len();
    let v_row = m;
    m += 2 * blocks.len();

    let mut a = Vec::new();
    let mut l = vec![f64::NEG_INFINITY; m];
    let mut u = vec![f64::INFINITY; m];
    // carbon row scaled by δΔt: Σ_j w_j (ê_{j+1} − ê_j) ≤ δΔt·budget
    let mut carbon_rhs = de * p.carbon_budget.max(0.0);
    for b in &blocks {
        let len = b.len;
        let eh = b.var;
        let el = b.lower_var();
        let r = b.row;
        carbon_rhs += p.carbon[b.first] * b.e0;
        for j in 0..len {
            let t = b.first + j;
            // constant e_0 moves to the bounds of the first row
            let (shift, prev) = if j == 0 { (b.e0, None) } else { (0.0, Some(j - 1)) };
            if b.pinned {
                a.push((r + j, eh + j, 1.0));
                a.push((r + len + j, eh + j, 1.0));
                if let Some(k) = prev {
                    a.push((r + j, eh + k, -1.0));
                }
                l[r + j] = shift;
                u[r + j] = de * b.p_max + shift;
                u[r + len + j] = b.e_max;
            } else {
                a.push((r + j, eh + j, 1.0));
                a.push((r + len + j, el + j, 1.0));
                a.push((r + 2 * len + j, eh + j, 1.0));
                a.push((r + 2 * len + j, el + j, -1.0));
                if let Some(k) = prev {
                    a.push((r + j, eh + k, -1.0));
                    a.push((r + len + j, el + k, -1.0));
                    a.push((r + 2 * len + j, eh + k, -1.0));
                    a.push((r + 2 * len + j, el + k, 1.0));
                }
                u[r + j] = de * b.p_max + shift;
                l[r + len + j] = shift;
                l[r + 2 * len + j] = 0.0;
                a.push((r + 3 * len + j, eh + j, 1.0));
                u[r + 3 * len + j] = b.e_max;

                // S_t − Σ(p̂ − p̌) = 0, scaled by δΔt
                let srow = s_row + t - start;
                a.push((srow, eh + j, -1.0));
                a.push((srow, el + j, 1.0));
                if let Some(k) = prev {
                    a.push((srow, eh + k, 1.0));
                    a.push((srow, el + k, -1.0));
                }
            }
            let w_next = if j + 1 < len { p.carbon[t + 1] } else { 0.0 };
            a.push((carbon_row, eh + j, p.carbon[t] - w_next));
        }
    }
    for t in 0..window {
        a.push((s_row + t, s_var + t, de));
        l[s_row + t] = 0.0;
        u[s_row + t] = 0.0;
    }
    u[carbon_row] = carbon_rhs;
    for (k, b) in blocks.iter().enumerate() {
        let v = v_var + k;
        let r = v_row + 2 * k;
        a.push((r, v, 1.0));
        l[r] = 0.0;
        a.push((r + 1, b.lower_var() + b.len - 1, 1.0));
        a.push((r + 1, v, 1.0));
        l[r + 1] = b.e_final;
    }

    let mut q = vec![0.0; n];
    let mut pt = Vec::with_capacity(window);
    for t in 0..window {
        q[s_var + t] = -dt;
        pt.push((s_var + t, s_var + t, 2.0 * p.epsilon));
    }
    // one kWh of requirement is worth at most Δt/(δΔt) of flexibility, plus
    // the budget it frees, which buys at most w_max/w_min as much elsewhere
    let trace = &p.carbon[start..end.max(start + 1).min(p.carbon.len())];
    let w_max = trace.iter().copied().fold(0.0, f64::max);
    let w_min = trace.iter().copied().fold(f64::INFINITY, f64::min);
    let ratio = if w_min > 0.0 { w_max / w_min } else { 1.0 };
    let penalty = SHORTFALL_MARGIN * (dt / de) * (1.0 + ratio);
    for k in 0..blocks.len() {
        q[v_var + k] = penalty;
    }
    let pm = CscMatrix::from_triplets(n, n, &pt)?;
    let am = CscMatrix::from_triplets(m, n, &a)?;
    let prob = QpProblem::new(pm, q, am, l, u)?;
    Ok((
        prob,
        OfflineLayout {
            start,
            end,
            blocks,
            v_var,
        },
    ))
}

pub fn offline_settings() -> IpmSettings {
    IpmSettings::default()
}

/// Solves the offline problem.
pub fn solve_offline(p: &OfflineProblem, settings: &IpmSettings) -> Result<OfflineSolution> {
    let (prob, layout) = build_offline(p)?;
    if layout.blocks.is_empty() {
        return Ok(extract(p, &layout, &[], 0));
    }
    let sol = qp::solve_ipm(&prob, settings)?;
    if sol.status != QpStatus::Solved {
        return Err(Error::Solver(format!(
            "offline problem from slot {} reported {:?} (primal residual {:.2e})",
            p.start_slot, sol.status, sol.primal_residual
        ))
        .at_slot(p.start_slot));
    }
    Ok(extract(p, &layout, &sol.x, sol.iterations))
}

/// Recovers trajectories from the QP solution. Powers are clipped to their
/// limits and energies recomputed from the dynamics, so the returned
/// trajectories are exactly consistent.
fn extract(p: &OfflineProblem, layout: &OfflineLayout, x: &[f64], iterations: usize) -> OfflineSolution {
    let start = layout.start;
    let end = layout.end;
    let window = end - start;
    let de = p.efficiency * p.clock.slot_duration_h;
    let nev = p.sessions.len();
    let mut upper_power = vec![vec![0.0; window]; nev];
    let mut lower_power = vec![vec![0.0; window]; nev];
    let mut upper_energy = vec![vec![0.0; window + 1]; nev];
    let mut lower_energy = vec![vec![0.0; window + 1]; nev];
    for s in p.sessions {
        upper_energy[s.id].fill(s.current_energy_kwh);
        lower_energy[s.id].fill(s.current_energy_kwh);
    }
    for b in &layout.blocks {
        let i = b.id;
        let mut eh = b.e0;
        let mut el = b.e0;
        let off = b.first - start;
        for j in 0..=off {
            upper_energy[i][j] = b.e0;
            lower_energy[i][j] = b.e0;
        }
        let energy = |k: usize, j: usize| {
            let base = if k == 0 { b.var } else { b.lower_var() };
            if j == 0 {
                b.e0
            } else {
                x[base + j - 1]
            }
        };
        for j in 0..b.len {
            let raw_h = (energy(0, j + 1) - energy(0, j)) / de;
            let raw_l = (energy(1, j + 1) - energy(1, j)) / de;
            let head = ((b.e_max - eh) / de).max(0.0);
            let hl = ((b.e_max - el) / de).max(0.0);
            let mut ph = raw_h.clamp(0.0, b.p_max).min(head);
            let pl = raw_l.clamp(0.0, b.p_max).min(hl).min(ph);
            if ph < pl {
                ph = pl;
            }
            upper_power[i][off + j] = ph;
            lower_power[i][off + j] = pl;
            eh += de * ph;
            el += de * pl;
            upper_energy[i][off + j + 1] = eh;
            lower_energy[i][off + j + 1] = el;
        }
        for j in off + b.len + 1..=window {
            upper_energy[i][j] = eh;
            lower_energy[i][j] = el;
        }
    }
    let upper_sum: Vec<f64> = (0..window)
        .map(|t| upper_power.iter().map(|v| v[t]).sum())
        .collect();
    let lower_sum: Vec<f64> = (0..window)
        .map(|t| lower_power.iter().map(|v| v[t]).sum())
        .collect();
    let dt = p.clock.slot_duration_h;
    let objective = upper_sum
        .iter()
        .zip(&lower_sum)
        .map(|(u, l)| {
            let s = u - l;
            s * dt - p.epsilon * s * s
        })
        .sum();
    OfflineSolution {
        start_slot: start,
        end_slot: end,
        upper_power,
        lower_power,
        upper_energy,
        lower_energy,
        upper_sum,
        lower_sum,
        objective,
        epsilon: p.epsilon,
        iterations,
        shortfall_kwh: (0..layout.blocks.len())
            .map(|k| x[layout.v_var + k].max(0.0))
            .sum(),
    }
}

/// Full-horizon offline region with budget `Σ_t w_t p̂_{s,t} ≤ r·T`.
pub fn solve_opi(scenario: &Scenario, rate_cap: f64, epsilon: f64) -> Result<OfflineSolution> {
    if !(rate_cap > 0.0) {
        return Err(Error::invalid("rate_cap_kg_per_h", "must be positive"));
    }
    let mut sessions = scenario.sessions.clone();
    for s in &mut sessions {
        s.current_energy_kwh = s.initial_energy_kwh;
    }
    let p = OfflineProblem {
        sessions: &sessions,
        carbon: &scenario.carbon.intensity,
        clock: scenario.clock,
        efficiency: scenario.efficiency,
        start_slot: 0,
        carbon_budget: rate_cap * scenario.clock.horizon_slots as f64,
        epsilon,
    };
    let mut sol = solve_offline(&p, &offline_settings())?;
    pad_to_horizon(&mut sol, scenario.clock.horizon_slots);
    Ok(sol)
}

/// Extends trajectories with idle slots up to `horizon`.
fn pad_to_horizon(sol: &mut OfflineSolution, horizon: usize) {
    if sol.start_slot != 0 || sol.end_slot >= horizon {
        return;
    }
    let extra = horizon - sol.end_slot;
    for v in sol.upper_power.iter_mut().chain(sol.lower_power.iter_mut()) {
        v.extend(std::iter::repeat_n(0.0, extra));
    }
    for v in sol.upper_energy.iter_mut().chain(sol.lower_energy.iter_mut()) {
        let last = *v.last().expect("energy trajectory is never empty");
        v.extend(std::iter::repeat_n(last, extra));
    }
    sol.upper_sum.extend(std::iter::repeat_n(0.0, extra));
    sol.lower_sum.extend(std::iter::repeat_n(0.0, extra));
    sol.end_slot = horizon;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{CarbonTrace, GroupSpec};

    fn toy(e_req: f64, rate: f64) -> Scenario {
        let clock = SimClock::new(3, 1.0).unwrap();
        let s = EvSession {
            id: 0,
            arrival_slot: 0,
            departure_slot: 3,
            initial_energy_kwh: 0.0,
            required_energy_kwh: e_req,
            min_energy_kwh: 0.0,
            max_energy_kwh: 10.0,
            max_power_kw: 5.0,
            capacity_kwh: 10.0,
            group_index: 0,
            current_energy_kwh: 0.0,
        };
        let groups = vec![GroupSpec {
            index: 0,
            duration_slots: 3,
            member_ids: vec![],
        }];
        Scenario::from_parts(
            clock,
            1.0,
            vec![s],
            groups,
            CarbonTrace {
                intensity: vec![rate; 3],
            },
        )
        .unwrap()
    }

    #[test]
    fn full_requirement_has_no_flexibility() {
        let sol = solve_opi(&toy(10.0, 0.5), 1e6, DEFAULT_EPSILON).unwrap();
        assert!(sol.total_flexibility(1.0).abs() < 1e-5, "{sol:?}");
        for t in 0..3 {
            assert!((sol.upper_sum[t] - sol.lower_sum[t]).abs() < 1e-5);
        }
    }

    #[test]
    fn slack_requirement_has_flexibility() {
        let sol = solve_opi(&toy(8.0, 0.5), 1e6, DEFAULT_EPSILON).unwrap();
        assert!(sol.total_flexibility(1.0) > 1.0);
        assert!(sol.upper_energy[0][3] >= 8.0 - 1e-6);
        assert!(sol.lower_energy[0][3] >= 8.0 - 1e-6);
        assert!(sol.upper_energy[0].iter().all(|&e| e <= 10.0 + 1e-9));
    }
}
