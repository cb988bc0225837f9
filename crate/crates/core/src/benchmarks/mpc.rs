//! Receding-horizon offline region: re-solve the remaining horizon each slot
//! with the remaining carbon budget, report the first slot, and split the
//! dispatch across EVs by convex combination of the two trajectories.

use crate::dispatch::{apply_charging, convex_combination_disaggregate, draw_dispatch, DispatchOutcome};
use crate::error::Result;
use crate::harness::{Method, Trajectories};
use crate::online::FlexibilityInterval;
use crate::qp::IpmSettings;
use crate::scenario::Scenario;

use super::offline::{offline_settings, solve_offline, OfflineProblem};

/// Only the first slot of each solve is used, so a looser tolerance suffices.
const SOLVE_TOL: f64 = 1e-7;

pub fn run_mpc(scenario: &Scenario, rate_cap: f64, epsilon: f64, gammas: &[f64]) -> Result<Trajectories> {
    let t_len = scenario.clock.horizon_slots;
    let dt = scenario.clock.slot_duration_h;
    let eff = scenario.efficiency;
    let total_budget = rate_cap * t_len as f64;
    let settings = IpmSettings { tol: SOLVE_TOL, ..offline_settings() };
    let mut sessions = scenario.sessions.clone();
    let mut emitted = 0.0;
    let mut traj = Trajectories::new(Method::Mpc, t_len);

    for t in 0..t_len {
        let w = scenario.carbon.at(t);
        let start = std::time::Instant::now();
        let present = sessions.iter().any(|s| s.in_station(t));
        let (iv, per_ev_lower, per_ev_upper) = if present {
            let prob = OfflineProblem {
                sessions: &sessions,
                carbon: &scenario.carbon.intensity,
                clock: scenario.clock,
                efficiency: eff,
                start_slot: t,
                carbon_budget: (total_budget - emitted).max(0.0),
                epsilon,
            };
            let sol = solve_offline(&prob, &settings).map_err(|e| e.at_slot(t))?;
            let lo: Vec<f64> = sol.lower_power.iter().map(|v| v[0]).collect();
            let up: Vec<f64> = sol.upper_power.iter().map(|v| v[0]).collect();
            (
                FlexibilityInterval::aggregate(t, sol.lower_sum[0], sol.upper_sum[0]),
                lo,
                up,
            )
        } else {
            let z = vec![0.0; sessions.len()];
            (FlexibilityInterval::aggregate(t, 0.0, 0.0), z.clone(), z)
        };
        let mut iv = iv;
        iv.solve_seconds = start.elapsed().as_secs_f64();

        let (gamma, pd) = draw_dispatch(&iv, gammas[t]);
        let (_, alloc) = convex_combination_disaggregate(
            pd,
            iv.lower_sum,
            iv.upper_sum,
            &per_ev_lower,
            &per_ev_upper,
        )
        .map_err(|e| e.at_slot(t))?;
        apply_charging(&mut sessions, &alloc, eff, dt, t).map_err(|e| e.at_slot(t))?;
        emitted += w * pd;

        traj.intervals.push(iv);
        traj.emission_power.push(pd);
        traj.dispatch.push(DispatchOutcome {
            slot: t,
            gamma,
            total: pd,
            group: Vec::new(),
            stage1: Vec::new(),
            stage2: Vec::new(),
            per_ev: alloc,
            emission_rate: w * pd,
            undeliverable: 0.0,
        });
    }
    traj.final_sessions = sessions;
    Ok(traj)
}
