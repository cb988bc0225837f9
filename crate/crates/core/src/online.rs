//! Per-slot drift-plus-penalty flexibility quantification.
//!
//! Each slot solves a `2K`-variable QP over `x = (p̌_1..p̌_K, p̂_1..p̂_K)`:
//!
//! ```text
//! minimize  ½β(w Σp̂ − r)² + Σp̌² + Σ(VΔt − J − H − λ/R)p̌ + Σ(−VΔt + βQw)p̂
//! s.t.      0 ≤ p̌ ≤ P̄,  0 ≤ p̂ ≤ P̄,  p̌ ≤ p̂
//! ```

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{self, CscMatrix, QpProblem, QpStatus, Settings};
use crate::queues::{QueueParams, QueueState};
use crate::scenario::EvSession;

/// Tolerance of the post-solve projection onto the feasible set.
pub const CLAMP_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineParams {
    pub flexibility_weight: f64,
    pub carbon_queue_weight: f64,
    pub delay_weight: f64,
    pub rate_cap_kg_per_h: f64,
    pub slot_duration_h: f64,
}

impl Default for OnlineParams {
    fn default() -> Self {
        Self {
            flexibility_weight: 6000.0,
            carbon_queue_weight: 10.0,
            delay_weight: 100.0,
            rate_cap_kg_per_h: 30.0,
            slot_duration_h: 1.0 / 12.0,
        }
    }
}

impl OnlineParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("flexibility_weight", self.flexibility_weight),
            ("delay_weight", self.delay_weight),
            ("rate_cap_kg_per_h", self.rate_cap_kg_per_h),
            ("slot_duration_h", self.slot_duration_h),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be positive"));
            }
        }
        if !(self.carbon_queue_weight >= 0.0 && self.carbon_queue_weight.is_finite()) {
            return Err(Error::invalid("carbon_queue_weight", "must be non-negative"));
        }
        Ok(())
    }

    pub fn queue_params(&self, group_durations: Vec<usize>) -> QueueParams {
        QueueParams {
            delay_weight: self.delay_weight,
            rate_cap_kg_per_h: self.rate_cap_kg_per_h,
            carbon_queue_weight: self.carbon_queue_weight,
            group_durations,
        }
    }
}

/// Largest power an EV can absorb in `slot` without exceeding `e_max`.
pub fn ev_power_cap(session: &EvSession, slot: usize, efficiency: f64, dt_h: f64) -> Result<f64> {
    if session.current_energy_kwh > session.max_energy_kwh + 1e-9 {
        return Err(Error::InfeasibleSession {
            id: session.id,
            reason: format!(
                "energy {} above maximum {}",
                session.current_energy_kwh, session.max_energy_kwh
            ),
        });
    }
    if !session.in_station(slot) {
        return Ok(0.0);
    }
    let headroom = (session.max_energy_kwh - session.current_energy_kwh).max(0.0);
    Ok(session.max_power_kw.min(headroom / (efficiency * dt_h)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupCaps {
    /// `P̄_k`
    pub group: Vec<f64>,
    /// `P̄_i`, indexed by EV id.
    pub ev: Vec<f64>,
}

impl GroupCaps {
    pub fn compute(
        sessions: &[EvSession],
        num_groups: usize,
        slot: usize,
        efficiency: f64,
        dt_h: f64,
    ) -> Result<Self> {
        let mut group = vec![0.0; num_groups];
        let mut ev = vec![0.0; sessions.len()];
        for s in sessions {
            let c = ev_power_cap(s, slot, efficiency, dt_h)?;
            ev[s.id] = c;
            group[s.group_index] += c;
        }
        Ok(Self { group, ev })
    }

    pub fn total(&self) -> f64 {
        self.group.iter().sum()
    }
}

/// Aggregate and per-group flexibility bounds for one slot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlexibilityInterval {
    pub slot: usize,
    /// Per-group bounds; empty for methods without group structure.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub lower_sum: f64,
    pub upper_sum: f64,
    /// Wall time spent computing the interval.
    pub solve_seconds: f64,
}

impl FlexibilityInterval {
    pub fn aggregate(slot: usize, lower: f64, upper: f64) -> Self {
        Self {
            slot,
            lower: Vec::new(),
            upper: Vec::new(),
            lower_sum: lower,
            upper_sum: upper,
            solve_seconds: 0.0,
        }
    }

    pub fn from_groups(slot: usize, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Self {
            slot,
            lower_sum: lower.iter().sum(),
            upper_sum: upper.iter().sum(),
            lower,
            upper,
            solve_seconds: 0.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.upper_sum - self.lower_sum
    }
}

fn check_inputs(state: &QueueState, caps: &[f64], group_durations: &[usize]) -> Result<()> {
    let k = caps.len();
    if state.num_groups() != k || group_durations.len() != k {
        return Err(Error::Dimension(format!(
            "{} queues, {} caps, {} group durations",
            state.num_groups(),
            k,
            group_durations.len()
        )));
    }
    for &c in caps {
        if c < 0.0 || !c.is_finite() {
            return Err(Error::NegativeInput {
                name: "group cap",
                value: c,
            });
        }
    }
    Ok(())
}

/// Builds the per-slot QP. Variable order is `(p̌_1..p̌_K, p̂_1..p̂_K)`.
pub fn build_p4(
    state: &QueueState,
    intensity: f64,
    caps: &[f64],
    group_durations: &[usize],
    params: &OnlineParams,
) -> Result<QpProblem> {
    check_inputs(state, caps, group_durations)?;
    let k = caps.len();
    let vdt = params.flexibility_weight * params.slot_duration_h;
    let beta = params.carbon_queue_weight;
    let w = intensity;
    let r = params.rate_cap_kg_per_h;

    let mut trip = Vec::with_capacity(k + k * (k + 1) / 2);
    for g in 0..k {
        trip.push((g, g, 2.0));
    }
    let bw2 = beta * w * w;
    if bw2 > 0.0 {
        for c in 0..k {
            for row in 0..=c {
                trip.push((k + row, k + c, bw2));
            }
        }
    }
    let p = CscMatrix::from_triplets(2 * k, 2 * k, &trip)?;

    let mut q = vec![0.0; 2 * k];
    for g in 0..k {
        let lam_r = params.delay_weight / group_durations[g] as f64;
        q[g] = vdt - state.j[g] - state.h[g] - lam_r;
        q[k + g] = -vdt + beta * state.qc * w - beta * w * r;
    }

    let mut a_trip = Vec::with_capacity(4 * k);
    let l = vec![0.0; 3 * k];
    let mut u = vec![0.0; 3 * k];
    for g in 0..k {
        a_trip.push((g, g, 1.0));
        a_trip.push((k + g, k + g, 1.0));
        a_trip.push((2 * k + g, k + g, 1.0));
        a_trip.push((2 * k + g, g, -1.0));
        u[g] = caps[g];
        u[k + g] = caps[g];
        u[2 * k + g] = f64::INFINITY;
    }
    let a = CscMatrix::from_triplets(3 * k, 2 * k, &a_trip)?;
    QpProblem::new(p, q, a, l, u)
}

/// Value of the per-slot objective at `(lower, upper)`, constants dropped.
pub fn p4_objective(
    state: &QueueState,
    intensity: f64,
    group_durations: &[usize],
    params: &OnlineParams,
    lower: &[f64],
    upper: &[f64],
) -> f64 {
    let vdt = params.flexibility_weight * params.slot_duration_h;
    let beta = params.carbon_queue_weight;
    let s: f64 = upper.iter().sum();
    let mut obj = 0.5 * beta * (intensity * s - params.rate_cap_kg_per_h).powi(2);
    for g in 0..lower.len() {
        let lam_r = params.delay_weight / group_durations[g] as f64;
        obj += lower[g] * lower[g] + (vdt - state.j[g] - state.h[g] - lam_r) * lower[g];
        obj += (-vdt + beta * state.qc * intensity) * upper[g];
    }
    obj
}

fn p4_settings() -> Settings {
    Settings {
        eps_abs: 1e-8,
        eps_rel: 0.0,
        max_iter: 50_000,
        ..Settings::default()
    }
}

/// Solves the per-slot problem and returns the clamped interval.
pub fn solve_slot(
    state: &QueueState,
    intensity: f64,
    caps: &[f64],
    group_durations: &[usize],
    params: &OnlineParams,
) -> Result<FlexibilityInterval> {
    let start = Instant::now();
    let k = caps.len();
    if caps.iter().all(|&c| c == 0.0) {
        check_inputs(state, caps, group_durations)?;
        let mut iv = FlexibilityInterval::from_groups(state.slot, vec![0.0; k], vec![0.0; k]);
        iv.solve_seconds = start.elapsed().as_secs_f64();
        return Ok(iv);
    }
    let prob = build_p4(state, intensity, caps, group_durations, params)?;
    let sol = qp::solve(&prob, &p4_settings())?;
    match sol.status {
        QpStatus::Solved | QpStatus::MaxIterations => {}
        s => return Err(Error::Solver(format!("per-slot problem reported {s:?}"))),
    }
    if sol.status == QpStatus::MaxIterations
        && sol.primal_residual.max(sol.dual_residual) > 1e-4
    {
        return Err(Error::Solver(format!(
            "per-slot problem did not converge (residuals {:.2e}, {:.2e})",
            sol.primal_residual, sol.dual_residual
        )));
    }
    let mut lower = Vec::with_capacity(k);
    let mut upper = Vec::with_capacity(k);
    for g in 0..k {
        let up = sol.x[k + g].clamp(0.0, caps[g]);
        let lo = sol.x[g].clamp(0.0, caps[g]).min(up);
        debug_assert!(sol.x[g] - up <= CLAMP_TOL.max(1e-5 * caps[g]));
        lower.push(lo);
        upper.push(up);
    }
    let mut iv = FlexibilityInterval::from_groups(state.slot, lower, upper);
    iv.solve_seconds = start.elapsed().as_secs_f64();
    Ok(iv)
}

/// Closed-form minimizer of `c̄ p̌ + ĉ p̂` over `0 ≤ p̌ ≤ p̂ ≤ P̄`.
pub fn linear_vertex(c_lower: f64, c_upper: f64, cap: f64) -> (f64, f64) {
    let candidates = [
        (0.0, 0.0, 0.0),
        (0.0, cap, c_upper * cap),
        (cap, cap, (c_lower + c_upper) * cap),
    ];
    let mut best = candidates[0];
    for c in &candidates[1..] {
        if c.2 < best.2 {
            best = *c;
        }
    }
    (best.0, best.1)
}

/// Linear drift-plus-penalty variant: bang-bang per group.
pub fn solve_slot_linear_b3(
    state: &QueueState,
    intensity: f64,
    caps: &[f64],
    group_durations: &[usize],
    params: &OnlineParams,
) -> Result<FlexibilityInterval> {
    let start = Instant::now();
    check_inputs(state, caps, group_durations)?;
    let vdt = params.flexibility_weight * params.slot_duration_h;
    let c_upper = -vdt + params.carbon_queue_weight * state.qc * intensity;
    let (lower, upper): (Vec<f64>, Vec<f64>) = (0..caps.len())
        .map(|g| linear_vertex(vdt - state.j[g] - state.h[g], c_upper, caps[g]))
        .unzip();
    let mut iv = FlexibilityInterval::from_groups(state.slot, lower, upper);
    iv.solve_seconds = start.elapsed().as_secs_f64();
    Ok(iv)
}

/// Bounds entering the drift constant.
#[derive(Debug, Clone, PartialEq)]
pub struct GapBounds {
    pub arrival_max: Vec<f64>,
    pub lower_max: Vec<f64>,
    pub upper_sum_max: f64,
    pub intensity_max: f64,
}

/// Returns `(B, B/V)`.
pub fn theorem_gap_constant(
    params: &OnlineParams,
    group_durations: &[usize],
    bounds: &GapBounds,
) -> Result<(f64, f64)> {
    let k = group_durations.len();
    if bounds.arrival_max.len() != k || bounds.lower_max.len() != k {
        return Err(Error::Dimension("gap bounds must have one entry per group".into()));
    }
    let mut b = 0.0;
    for g in 0..k {
        let a = bounds.arrival_max[g];
        let pl = bounds.lower_max[g];
        let lr = params.delay_weight / group_durations[g] as f64;
        b += 0.5 * (a * a + pl * pl);
        b += 0.5 * (lr * lr).max(pl * pl);
    }
    let wp = bounds.intensity_max * bounds.upper_sum_max;
    let r = params.rate_cap_kg_per_h;
    b += 0.5 * params.carbon_queue_weight * (wp * wp).max(r * r);
    if !b.is_finite() {
        return Err(Error::invalid("gap bounds", "must be finite"));
    }
    Ok((b, b / params.flexibility_weight))
}

/// Writes `slot,p_lower,p_upper` followed by per-group columns when present.
pub fn write_interval_csv<W: std::io::Write>(intervals: &[FlexibilityInterval], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let k = intervals.first().map_or(0, |iv| iv.lower.len());
    let mut header = vec!["slot".to_string(), "p_lower".into(), "p_upper".into()];
    for g in 0..k {
        header.push(format!("p_lower_{g}"));
        header.push(format!("p_upper_{g}"));
    }
    wtr.write_record(&header)?;
    for iv in intervals {
        let mut rec = vec![
            iv.slot.to_string(),
            iv.lower_sum.to_string(),
            iv.upper_sum.to_string(),
        ];
        for g in 0..k {
            rec.push(iv.lower.get(g).copied().unwrap_or(0.0).to_string());
            rec.push(iv.upper.get(g).copied().unwrap_or(0.0).to_string());
        }
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes `slot,solve_seconds`.
pub fn write_timing_csv<W: std::io::Write>(intervals: &[FlexibilityInterval], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["slot", "solve_seconds"])?;
    for iv in intervals {
        wtr.write_record([iv.slot.to_string(), iv.solve_seconds.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_group(j: f64, h: f64, qc: f64) -> QueueState {
        QueueState {
            j: vec![j],
            h: vec![h],
            qc,
            slot: 0,
        }
    }

    fn session(e: f64) -> EvSession {
        EvSession {
            id: 0,
            arrival_slot: 1,
            departure_slot: 4,
            initial_energy_kwh: 0.0,
            required_energy_kwh: 8.0,
            min_energy_kwh: 0.0,
            max_energy_kwh: 10.0,
            max_power_kw: 5.0,
            capacity_kwh: 10.0,
            group_index: 0,
            current_energy_kwh: e,
        }
    }

    #[test]
    fn power_cap_cases() {
        assert_eq!(ev_power_cap(&session(7.0), 2, 1.0, 1.0).unwrap(), 3.0);
        assert_eq!(ev_power_cap(&session(0.0), 0, 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(ev_power_cap(&session(10.0), 2, 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(ev_power_cap(&session(2.0), 2, 1.0, 1.0).unwrap(), 5.0);
        assert!(ev_power_cap(&session(11.0), 2, 1.0, 1.0).is_err());
    }

    #[test]
    fn zero_queues_without_carbon_give_full_interval() {
        let p = OnlineParams {
            carbon_queue_weight: 0.0,
            ..OnlineParams::default()
        };
        let iv = solve_slot(&one_group(0.0, 0.0, 0.0), 0.5, &[40.0], &[48], &p).unwrap();
        assert!(iv.lower[0].abs() < 1e-6);
        assert!((iv.upper[0] - 40.0).abs() < 1e-6);
    }

    #[test]
    fn empty_station_gives_zero_interval() {
        let iv = solve_slot(&one_group(5.0, 1.0, 2.0), 0.5, &[0.0], &[48], &OnlineParams::default())
            .unwrap();
        assert_eq!((iv.lower_sum, iv.upper_sum), (0.0, 0.0));
    }

    #[test]
    fn huge_carbon_backlog_collapses_interval() {
        let iv = solve_slot(&one_group(600.0, 0.0, 1e6), 0.5, &[40.0], &[48], &OnlineParams::default())
            .unwrap();
        assert!((iv.upper[0] - iv.lower[0]).abs() < 5e-3, "{iv:?}");
    }

    #[test]
    fn b3_vertices() {
        assert_eq!(linear_vertex(1.0, -1.0, 7.0), (0.0, 7.0));
        assert_eq!(linear_vertex(-1.0, 2.0, 7.0), (0.0, 0.0));
        assert_eq!(linear_vertex(-3.0, 2.0, 7.0), (7.0, 7.0));
    }

    #[test]
    fn gap_constant_examples() {
        let p = OnlineParams {
            carbon_queue_weight: 0.0,
            delay_weight: 2.0,
            ..OnlineParams::default()
        };
        let b = GapBounds {
            arrival_max: vec![10.0],
            lower_max: vec![10.0],
            upper_sum_max: 0.0,
            intensity_max: 0.0,
        };
        assert_eq!(theorem_gap_constant(&p, &[1], &b).unwrap().0, 150.0);
        let p10 = OnlineParams {
            carbon_queue_weight: 10.0,
            rate_cap_kg_per_h: 30.0,
            ..p
        };
        let b2 = GapBounds {
            upper_sum_max: 200.0,
            intensity_max: 0.5,
            ..b
        };
        assert_eq!(theorem_gap_constant(&p10, &[1], &b2).unwrap().0, 150.0 + 5e4);
    }

    #[test]
    fn interval_csv_layout() {
        let iv = FlexibilityInterval::from_groups(3, vec![1.0, 2.0], vec![4.0, 5.0]);
        let mut buf = Vec::new();
        write_interval_csv(&[iv], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "slot,p_lower,p_upper,p_lower_0,p_upper_0,p_lower_1,p_upper_1\n3,3,9,1,4,2,5\n"
        );
    }
}
