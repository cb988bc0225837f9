//! B1: charge at full power until the required SoC, then offer `[0, p_max]`
//! until the maximum SoC, with both aggregate bounds capped at `r / w_t`.

use crate::dispatch::{draw_dispatch, DispatchOutcome};
use crate::error::Result;
use crate::harness::{Method, Trajectories};
use crate::online::FlexibilityInterval;
use crate::scenario::Scenario;

const ENERGY_TOL: f64 = 1e-9;

/// Runs B1. EV states follow the curtailed must-charge schedule only; the
/// dispatch signal is recorded for emission accounting.
pub fn run_b1(scenario: &Scenario, rate_cap: f64, gammas: &[f64]) -> Result<Trajectories> {
    let t_len = scenario.clock.horizon_slots;
    let dt = scenario.clock.slot_duration_h;
    let de = scenario.efficiency * dt;
    let mut sessions = scenario.sessions.clone();
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    order.sort_by_key(|&i| (sessions[i].arrival_slot, i));

    let mut traj = Trajectories::new(Method::B1, t_len);
    for t in 0..t_len {
        let w = scenario.carbon.at(t);
        let limit = rate_cap / w;
        let mut must = 0.0;
        let mut offer = 0.0;
        let mut alloc = vec![0.0; sessions.len()];
        let mut room = limit;
        for &i in &order {
            let s = &sessions[i];
            if !s.in_station(t) {
                continue;
            }
            let e = s.current_energy_kwh;
            if e < s.required_energy_kwh - ENERGY_TOL {
                let need = s.max_power_kw.min((s.required_energy_kwh - e) / de);
                must += need;
                // curtailment in arrival order
                let give = need.min(room.max(0.0));
                alloc[i] = give;
                room -= give;
            } else if e < s.max_energy_kwh - ENERGY_TOL {
                offer += s.max_power_kw.min((s.max_energy_kwh - e) / de);
            }
        }
        let lower = must.min(limit);
        let upper = (must + offer).min(limit).max(lower);
        let start = std::time::Instant::now();
        let mut iv = FlexibilityInterval::aggregate(t, lower, upper);
        iv.solve_seconds = start.elapsed().as_secs_f64();
        let (gamma, pd) = draw_dispatch(&iv, gammas[t]);
        for (s, &p) in sessions.iter_mut().zip(&alloc) {
            if p > 0.0 {
                s.current_energy_kwh = (s.current_energy_kwh + de * p).min(s.max_energy_kwh);
            }
        }
        traj.intervals.push(iv);
        traj.emission_power.push(pd);
        traj.dispatch.push(DispatchOutcome {
            slot: t,
            gamma,
            total: pd,
            group: Vec::new(),
            stage1: vec![lower],
            stage2: vec![pd - lower],
            per_ev: alloc,
            emission_rate: w * pd,
            undeliverable: 0.0,
        });
    }
    traj.final_sessions = sessions;
    Ok(traj)
}
