//! Charging, delay-aware and carbon-aware queues with a FIFO task ledger.
//!
//! Backlogs are powers in kW. `J_k` holds unserved task power of group `k`,
//! `H_k` grows by `λ/R_k` every slot the group keeps a backlog, and `Q_c`
//! accumulates emission-rate excess over the cap `r`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for queue comparisons, kW.
pub const QUEUE_TOL: f64 = 1e-9;

fn non_negative(name: &'static str, v: f64) -> Result<()> {
    if v < 0.0 || v.is_nan() {
        Err(Error::NegativeInput { name, value: v })
    } else {
        Ok(())
    }
}

/// `max(J − service, 0) + arrival`
pub fn update_charge_queue(j: f64, service: f64, arrival: f64) -> Result<f64> {
    non_negative("J", j)?;
    non_negative("service", service)?;
    non_negative("arrival", arrival)?;
    Ok((j - service).max(0.0) + arrival)
}

/// `max(H + λ/R − service, 0)` while the group still has backlog after
/// service, otherwise 0.
pub fn update_delay_queue(
    h: f64,
    service: f64,
    j_before: f64,
    lambda: f64,
    r_slots: usize,
) -> Result<f64> {
    non_negative("H", h)?;
    non_negative("service", service)?;
    non_negative("J", j_before)?;
    non_negative("lambda", lambda)?;
    if r_slots == 0 {
        return Err(Error::invalid("group_duration", "must be at least one slot"));
    }
    if j_before > service + QUEUE_TOL {
        Ok((h + lambda / r_slots as f64 - service).max(0.0))
    } else {
        Ok(0.0)
    }
}

/// `max(Q + w·p − r, 0)`
pub fn update_carbon_queue(q: f64, intensity: f64, power: f64, rate_cap: f64) -> Result<f64> {
    non_negative("Q_c", q)?;
    non_negative("intensity", intensity)?;
    non_negative("power", power)?;
    non_negative("rate_cap", rate_cap)?;
    Ok((q + intensity * power - rate_cap).max(0.0))
}

/// Worst-case delay in slots, `(J_max + H_max)·R/λ`.
pub fn delay_bound(j_max: f64, h_max: f64, lambda: f64, r_slots: usize) -> Result<f64> {
    non_negative("J_max", j_max)?;
    non_negative("H_max", h_max)?;
    if !(lambda > 0.0) {
        return Err(Error::invalid("lambda", "must be positive"));
    }
    Ok((j_max + h_max) * r_slots as f64 / lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueParams {
    pub delay_weight: f64,
    pub rate_cap_kg_per_h: f64,
    pub carbon_queue_weight: f64,
    pub group_durations: Vec<usize>,
}

impl QueueParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delay_weight > 0.0 && self.delay_weight.is_finite()) {
            return Err(Error::invalid("delay_weight", "must be positive"));
        }
        if !(self.rate_cap_kg_per_h > 0.0 && self.rate_cap_kg_per_h.is_finite()) {
            return Err(Error::invalid("rate_cap_kg_per_h", "must be positive"));
        }
        if !(self.carbon_queue_weight >= 0.0 && self.carbon_queue_weight.is_finite()) {
            return Err(Error::invalid("carbon_queue_weight", "must be non-negative"));
        }
        if self.group_durations.is_empty() || self.group_durations.contains(&0) {
            return Err(Error::invalid("group_durations", "need K >= 1 positive durations"));
        }
        Ok(())
    }

    pub fn num_groups(&self) -> usize {
        self.group_durations.len()
    }

    /// `λ/R_k`
    pub fn delay_increment(&self, k: usize) -> f64 {
        self.delay_weight / self.group_durations[k] as f64
    }
}

/// The concatenated queue vector `Θ_t = (J, H, Q_c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueState {
    pub j: Vec<f64>,
    pub h: Vec<f64>,
    pub qc: f64,
    pub slot: usize,
}

impl QueueState {
    pub fn zeros(num_groups: usize) -> Self {
        Self {
            j: vec![0.0; num_groups],
            h: vec![0.0; num_groups],
            qc: 0.0,
            slot: 0,
        }
    }

    pub fn num_groups(&self) -> usize {
        self.j.len()
    }

    fn check(&self, params: &QueueParams, vecs: &[(&'static str, &[f64])]) -> Result<()> {
        let k = params.num_groups();
        if self.j.len() != k || self.h.len() != k {
            return Err(Error::Dimension(format!(
                "queue state has {} groups, params have {k}",
                self.j.len()
            )));
        }
        for (name, v) in vecs {
            if v.len() != k {
                return Err(Error::Dimension(format!("{name} has length {}, expected {k}", v.len())));
            }
        }
        Ok(())
    }

    /// Update driven by the reported interval itself: `J, H` served by `p̌_k`,
    /// `Q_c` charged with `p̂_s`.
    pub fn advance_aggregation(
        &self,
        lower: &[f64],
        upper_sum: f64,
        arrivals: &[f64],
        intensity: f64,
        params: &QueueParams,
    ) -> Result<Self> {
        self.check(params, &[("lower", lower), ("arrivals", arrivals)])?;
        self.advance(lower, upper_sum, arrivals, intensity, params)
    }

    /// Update driven by the dispatch signal: `J, H` served by the stage-1
    /// power `p^d_{1,k}`, `Q_c` charged with the total dispatch `p^d_s`.
    pub fn advance_with_dispatch(
        &self,
        stage1: &[f64],
        dispatch_total: f64,
        arrivals: &[f64],
        intensity: f64,
        params: &QueueParams,
    ) -> Result<Self> {
        self.check(params, &[("stage1", stage1), ("arrivals", arrivals)])?;
        for &p in stage1 {
            non_negative("stage1", p)?;
        }
        non_negative("dispatch_total", dispatch_total)?;
        let s1: f64 = stage1.iter().sum();
        if dispatch_total < s1 - QUEUE_TOL {
            return Err(Error::Dispatch(format!(
                "total dispatch {dispatch_total} below stage-1 power {s1}"
            )));
        }
        self.advance(stage1, dispatch_total, arrivals, intensity, params)
    }

    fn advance(
        &self,
        service: &[f64],
        carbon_power: f64,
        arrivals: &[f64],
        intensity: f64,
        params: &QueueParams,
    ) -> Result<Self> {
        let k = params.num_groups();
        let mut next = Self::zeros(k);
        for g in 0..k {
            next.j[g] = update_charge_queue(self.j[g], service[g], arrivals[g])?;
            next.h[g] = update_delay_queue(
                self.h[g],
                service[g],
                self.j[g],
                params.delay_weight,
                params.group_durations[g],
            )?;
        }
        next.qc = update_carbon_queue(self.qc, intensity, carbon_power, params.rate_cap_kg_per_h)?;
        next.slot = self.slot + 1;
        Ok(next)
    }

    /// Removes task power that can no longer be served (its vehicle left).
    pub fn drop_backlog(&mut self, group: usize, power: f64) {
        self.j[group] = (self.j[group] - power).max(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    /// Remaining task power, kW.
    pub power: f64,
    pub arrival_slot: usize,
    pub ev_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub ev_id: usize,
    pub arrival_slot: usize,
    pub completion_slot: usize,
    pub delay_slots: usize,
}

/// Outcome of serving a group's ledger under per-EV caps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CappedService {
    pub consumed: f64,
    /// `(ev_id, kW)` in service order; one EV may appear several times.
    pub credits: Vec<(usize, f64)>,
    pub completions: Vec<Completion>,
}

/// Per-group FIFO task ledgers with delay statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FifoLedger {
    queues: Vec<VecDeque<LedgerEntry>>,
    pub j_max: Vec<f64>,
    pub h_max: Vec<f64>,
    pub max_delay: Vec<usize>,
    pub completed: Vec<usize>,
    /// Task power removed unserved because its vehicle departed, per group.
    pub dropped_power: Vec<f64>,
}

impl FifoLedger {
    pub fn new(num_groups: usize) -> Self {
        Self {
            queues: vec![VecDeque::new(); num_groups],
            j_max: vec![0.0; num_groups],
            h_max: vec![0.0; num_groups],
            max_delay: vec![0; num_groups],
            completed: vec![0; num_groups],
            dropped_power: vec![0.0; num_groups],
        }
    }

    pub fn num_groups(&self) -> usize {
        self.queues.len()
    }

    pub fn entries(&self, group: usize) -> impl Iterator<Item = &LedgerEntry> {
        self.queues[group].iter()
    }

    pub fn total(&self, group: usize) -> f64 {
        self.queues[group].iter().map(|e| e.power).sum()
    }

    pub fn push(&mut self, group: usize, power: f64, arrival_slot: usize, ev_id: usize) -> Result<()> {
        non_negative("task power", power)?;
        if power <= 0.0 {
            return Ok(());
        }
        let q = &mut self.queues[group];
        if let Some(last) = q.back() {
            if last.arrival_slot > arrival_slot {
                return Err(Error::Dimension("ledger entries must arrive in slot order".into()));
            }
        }
        q.push_back(LedgerEntry {
            power,
            arrival_slot,
            ev_id,
        });
        Ok(())
    }

    /// Tracks the running maxima of `J` and `H`.
    pub fn observe(&mut self, state: &QueueState) {
        for k in 0..self.num_groups() {
            self.j_max[k] = self.j_max[k].max(state.j[k]);
            self.h_max[k] = self.h_max[k].max(state.h[k]);
        }
    }

    fn complete(&mut self, group: usize, e: &LedgerEntry, slot: usize) -> Completion {
        let delay = slot.saturating_sub(e.arrival_slot);
        self.max_delay[group] = self.max_delay[group].max(delay);
        self.completed[group] += 1;
        Completion {
            ev_id: e.ev_id,
            arrival_slot: e.arrival_slot,
            completion_slot: slot,
            delay_slots: delay,
        }
    }

    /// Consumes entries front to back by `service` kW. Over-service empties
    /// the ledger.
    pub fn record_service(&mut self, group: usize, service: f64, slot: usize) -> Vec<Completion> {
        let mut left = service.max(0.0);
        let mut done = Vec::new();
        while left > 0.0 {
            let Some(front) = self.queues[group].front_mut() else {
                break;
            };
            if front.power <= left + QUEUE_TOL {
                left -= front.power;
                let e = self.queues[group].pop_front().expect("front exists");
                done.push(self.complete(group, &e, slot));
            } else {
                front.power -= left;
                left = 0.0;
            }
        }
        done
    }

    /// Serves entries front to back up to `budget`, limiting each EV to its
    /// residual cap. An entry is passed over only when its EV is saturated.
    pub fn serve_capped(
        &mut self,
        group: usize,
        budget: f64,
        residual_cap: &mut [f64],
        slot: usize,
    ) -> CappedService {
        let mut out = CappedService::default();
        let mut left = budget.max(0.0);
        let mut idx = 0;
        while left > QUEUE_TOL && idx < self.queues[group].len() {
            let entry = self.queues[group][idx];
            let cap = residual_cap[entry.ev_id].max(0.0);
            let amount = entry.power.min(cap).min(left);
            if amount > 0.0 {
                residual_cap[entry.ev_id] = cap - amount;
                left -= amount;
                out.consumed += amount;
                out.credits.push((entry.ev_id, amount));
            }
            if entry.power - amount <= QUEUE_TOL {
                let e = self.queues[group].remove(idx).expect("index in range");
                // a sub-tolerance tail is absorbed by the entry's own EV
                let tail = entry.power - amount;
                if tail > 0.0 {
                    out.consumed += tail;
                    if let Some(last) = out.credits.last_mut() {
                        last.1 += tail;
                    }
                    residual_cap[entry.ev_id] -= tail;
                }
                out.completions.push(self.complete(group, &e, slot));
            } else {
                self.queues[group][idx].power -= amount;
                idx += 1;
            }
        }
        out
    }

    /// Removes entries of vehicles that are no longer present and returns the
    /// dropped power per group.
    pub fn purge<F: Fn(usize) -> bool>(&mut self, present: F) -> Vec<f64> {
        let mut dropped = vec![0.0; self.num_groups()];
        for (k, q) in self.queues.iter_mut().enumerate() {
            q.retain(|e| {
                if present(e.ev_id) {
                    true
                } else {
                    dropped[k] += e.power;
                    false
                }
            });
            self.dropped_power[k] += dropped[k];
        }
        dropped
    }

    /// Per-group Lemma 1 bounds from the observed maxima.
    pub fn delay_bounds(&self, params: &QueueParams) -> Result<Vec<f64>> {
        (0..self.num_groups())
            .map(|k| {
                delay_bound(
                    self.j_max[k],
                    self.h_max[k],
                    params.delay_weight,
                    params.group_durations[k],
                )
            })
            .collect()
    }

    /// Groups whose observed worst delay exceeds the bound.
    pub fn delay_violations(&self, params: &QueueParams) -> Result<Vec<usize>> {
        let bounds = self.delay_bounds(params)?;
        Ok((0..self.num_groups())
            .filter(|&k| self.max_delay[k] as f64 > bounds[k] + 1e-9)
            .collect())
    }
}

/// Writes `slot,group,J,H,Qc` rows for a queue trajectory.
pub fn write_queue_csv<W: std::io::Write>(states: &[QueueState], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["slot", "group", "J", "H", "Qc"])?;
    for s in states {
        for k in 0..s.num_groups() {
            wtr.write_record([
                s.slot.to_string(),
                k.to_string(),
                s.j[k].to_string(),
                s.h[k].to_string(),
                s.qc.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> QueueParams {
        QueueParams {
            delay_weight: 100.0,
            rate_cap_kg_per_h: 30.0,
            carbon_queue_weight: 10.0,
            group_durations: vec![48],
        }
    }

    #[test]
    fn charge_queue_cases() {
        assert_eq!(update_charge_queue(0.0, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(update_charge_queue(5.0, 2.0, 3.0).unwrap(), 6.0);
        assert_eq!(update_charge_queue(5.0, 9.0, 3.0).unwrap(), 3.0);
        assert!(update_charge_queue(-1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn delay_queue_cases() {
        assert_eq!(update_delay_queue(10.0, 5.0, 5.0, 100.0, 48).unwrap(), 0.0);
        let h = update_delay_queue(10.0, 1.0, 5.0, 100.0, 48).unwrap();
        assert!((h - (10.0 + 100.0 / 48.0 - 1.0)).abs() < 1e-12);
        assert_eq!(update_delay_queue(0.0, 3.0, 5.0, 100.0, 48).unwrap(), 0.0);
        assert!(update_delay_queue(0.0, 0.0, 0.0, 100.0, 0).is_err());
    }

    #[test]
    fn carbon_queue_cases() {
        assert_eq!(update_carbon_queue(0.0, 0.5, 100.0, 30.0).unwrap(), 20.0);
        assert_eq!(update_carbon_queue(7.0, 0.5, 60.0, 30.0).unwrap(), 7.0);
        assert_eq!(update_carbon_queue(5.0, 0.5, 20.0, 30.0).unwrap(), 0.0);
    }

    #[test]
    fn bound_formula() {
        assert!((delay_bound(10.0, 20.0, 100.0, 48).unwrap() - 14.4).abs() < 1e-12);
        assert_eq!(delay_bound(0.0, 0.0, 100.0, 48).unwrap(), 0.0);
        assert!(delay_bound(1.0, 1.0, 0.0, 48).is_err());
    }

    #[test]
    fn dispatch_update_matches_hand_evaluation() {
        let p = params();
        let s = QueueState {
            j: vec![12.0],
            h: vec![4.0],
            qc: 3.0,
            slot: 0,
        };
        let n = s.advance_with_dispatch(&[5.0], 40.0, &[2.0], 0.6, &p).unwrap();
        assert_eq!(n.j[0], 9.0);
        assert!((n.h[0] - (4.0 + 100.0 / 48.0 - 5.0)).abs() < 1e-12);
        assert!((n.qc - (3.0 + 24.0 - 30.0_f64).max(0.0)).abs() < 1e-12);
        let cleared = s.advance_with_dispatch(&[12.0], 12.0, &[2.0], 0.6, &p).unwrap();
        assert_eq!((cleared.j[0], cleared.h[0]), (2.0, 0.0));
        assert!(s.advance_with_dispatch(&[5.0], 4.0, &[0.0], 0.6, &p).is_err());
        assert!(s.advance_with_dispatch(&[5.0, 1.0], 9.0, &[0.0], 0.6, &p).is_err());
    }

    #[test]
    fn fifo_partial_consumption() {
        let mut l = FifoLedger::new(1);
        l.push(0, 5.0, 0, 0).unwrap();
        l.push(0, 3.0, 1, 1).unwrap();
        let done = l.record_service(0, 6.0, 2);
        assert_eq!(done.len(), 1);
        assert_eq!(done[0].delay_slots, 2);
        assert!((l.total(0) - 2.0).abs() < 1e-12);
        assert!(l.record_service(0, 0.0, 3).is_empty());
        let done = l.record_service(0, 10.0, 5);
        assert_eq!(done[0].delay_slots, 4);
        assert_eq!(l.total(0), 0.0);
    }

    #[test]
    fn capped_service_skips_saturated_evs() {
        let mut l = FifoLedger::new(1);
        l.push(0, 4.0, 0, 0).unwrap();
        l.push(0, 2.0, 0, 1).unwrap();
        let mut caps = vec![3.0, 5.0];
        let out = l.serve_capped(0, 9.0, &mut caps, 1);
        assert_eq!(out.consumed, 5.0);
        assert_eq!(out.credits, vec![(0, 3.0), (1, 2.0)]);
        assert_eq!(out.completions.len(), 1);
        assert!((l.total(0) - 1.0).abs() < 1e-12);
        assert_eq!(caps, vec![0.0, 3.0]);
    }

    #[test]
    fn purge_drops_departed() {
        let mut l = FifoLedger::new(2);
        l.push(0, 4.0, 0, 0).unwrap();
        l.push(1, 2.0, 0, 1).unwrap();
        let d = l.purge(|id| id != 1);
        assert_eq!(d, vec![0.0, 2.0]);
        assert_eq!(l.total(1), 0.0);
    }

    #[test]
    fn queue_csv_header() {
        let mut buf = Vec::new();
        write_queue_csv(&[QueueState::zeros(2)], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("slot,group,J,H,Qc\n0,0,0,0,0\n0,1,0,0,0\n"));
    }
}
