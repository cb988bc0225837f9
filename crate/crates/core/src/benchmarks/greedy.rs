//! B2: report `[a_t, Σ P̄_i]`, both capped by the carbon budget left over
//! from a running allowance of `r` per slot.

use crate::dispatch::{apply_charging, disaggregate_two_stage, draw_dispatch, DispatchOutcome};
use crate::error::Result;
use crate::harness::{Method, Trajectories};
use crate::online::{FlexibilityInterval, GroupCaps};
use crate::queues::FifoLedger;
use crate::scenario::Scenario;

pub fn run_b2(scenario: &Scenario, rate_cap: f64, gammas: &[f64]) -> Result<Trajectories> {
    let t_len = scenario.clock.horizon_slots;
    let dt = scenario.clock.slot_duration_h;
    let eff = scenario.efficiency;
    let mut sessions = scenario.sessions.clone();
    let mut ledger = FifoLedger::new(1);
    let mut emitted = 0.0;
    let mut traj = Trajectories::new(Method::B2, t_len);

    for t in 0..t_len {
        let w = scenario.carbon.at(t);
        ledger.purge(|id| sessions[id].in_station(t));
        for (i, a) in scenario.arrivals.per_ev.iter().enumerate() {
            ledger.push(0, a[t], t, i)?;
        }
        let start = std::time::Instant::now();
        let caps = GroupCaps::compute(&sessions, scenario.num_groups(), t, eff, dt)
            .map_err(|e| e.at_slot(t))?;
        let total_cap = caps.total();
        let budget = rate_cap * (t + 1) as f64 - emitted;
        let limit = budget.max(0.0) / w;
        let upper = total_cap.min(limit);
        let lower = scenario.arrivals.total[t].max(0.0).min(upper);
        let mut iv = FlexibilityInterval::aggregate(t, lower, upper);
        iv.solve_seconds = start.elapsed().as_secs_f64();

        let (gamma, pd) = draw_dispatch(&iv, gammas[t]);
        let mut members: Vec<usize> = sessions.iter().filter(|s| s.in_station(t)).map(|s| s.id).collect();
        members.sort_by_key(|&i| (sessions[i].arrival_slot, i));
        let mut residual = caps.ev.clone();
        let mut alloc = vec![0.0; sessions.len()];
        let g = disaggregate_two_stage(0, pd, &mut ledger, &members, &mut residual, &mut alloc, t)
            .map_err(|e| e.at_slot(t))?;
        apply_charging(&mut sessions, &alloc, eff, dt, t).map_err(|e| e.at_slot(t))?;
        emitted += w * pd;

        traj.intervals.push(iv);
        traj.emission_power.push(pd);
        traj.dispatch.push(DispatchOutcome {
            slot: t,
            gamma,
            total: pd,
            group: vec![pd],
            stage1: vec![g.stage1],
            stage2: vec![g.stage2],
            per_ev: alloc,
            emission_rate: w * pd,
            undeliverable: g.undeliverable,
        });
    }
    traj.final_sessions = sessions;
    Ok(traj)
}
