use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::benchmarks::{self, OfflineSolution};
use crate::dispatch::{
    apply_charging, convex_combination_disaggregate, disaggregate_two_stage, draw_dispatch,
    members_by_arrival, split_to_groups, DispatchOutcome, DELIVERY_TOL,
};
use crate::error::{Error, Result};
use crate::online::{solve_slot, solve_slot_linear_b3, FlexibilityInterval, GroupCaps, OnlineParams};
use crate::queues::{FifoLedger, QueueParams, QueueState};
use crate::scenario::{EvSession, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Proposed,
    B1,
    B2,
    B3,
    Opi,
    Mpc,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Proposed,
        Method::B1,
        Method::B2,
        Method::B3,
        Method::Opi,
        Method::Mpc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::B1 => "b1",
            Method::B2 => "b2",
            Method::B3 => "b3",
            Method::Opi => "opi",
            Method::Mpc => "mpc",
        }
    }

    /// Methods whose emissions must stay within the rate cap.
    pub fn carbon_compliant(self) -> bool {
        !matches!(self, Method::B1)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::invalid("method", format!("`{s}` is not one of proposed, b1, b2, b3, opi, mpc"))
            })
    }
}

/// Worst FIFO delays against their queue-based bounds, per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayReport {
    pub max_delay_slots: Vec<usize>,
    pub bound_slots: Vec<f64>,
    pub j_max: Vec<f64>,
    pub h_max: Vec<f64>,
    pub completed: Vec<usize>,
    /// Task power dropped because its vehicle left, per group.
    pub dropped_power_kw: Vec<f64>,
}

impl DelayReport {
    fn from_ledger(ledger: &FifoLedger, params: &QueueParams) -> Result<Self> {
        Ok(Self {
            max_delay_slots: ledger.max_delay.clone(),
            bound_slots: ledger.delay_bounds(params)?,
            j_max: ledger.j_max.clone(),
            h_max: ledger.h_max.clone(),
            completed: ledger.completed.clone(),
            dropped_power_kw: ledger.dropped_power.clone(),
        })
    }

    /// Groups whose worst delay exceeds the bound.
    pub fn violations(&self) -> Vec<usize> {
        (0..self.max_delay_slots.len())
            .filter(|&k| self.max_delay_slots[k] as f64 > self.bound_slots[k] + 1e-9)
            .collect()
    }
}

/// Everything a run produces, one entry per slot.
#[derive(Debug, Clone)]
pub struct Trajectories {
    pub method: Method,
    pub intervals: Vec<FlexibilityInterval>,
    pub dispatch: Vec<DispatchOutcome>,
    /// Queue state each slot's decision was taken from. Empty for methods
    /// without queues.
    pub queues: Vec<QueueState>,
    /// Power charged against the carbon cap: the dispatch, or the upper
    /// trajectory for OPI.
    pub emission_power: Vec<f64>,
    pub final_sessions: Vec<EvSession>,
    pub delays: Option<DelayReport>,
}

impl Trajectories {
    pub fn new(method: Method, t_len: usize) -> Self {
        Self {
            method,
            intervals: Vec::with_capacity(t_len),
            dispatch: Vec::with_capacity(t_len),
            queues: Vec::new(),
            emission_power: Vec::with_capacity(t_len),
            final_sessions: Vec::new(),
            delays: None,
        }
    }
}

/// Per-slot problem of an online run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnlinePolicy {
    /// The quadratic per-slot problem.
    Quadratic,
    /// The linear bang-bang variant (B3).
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Quantify,
    Dispatch,
    Disaggregate,
    QueueUpdate,
    Advance,
}

/// Algorithm 1 driven one step at a time: `quantify`, then one of the
/// dispatch calls, which disaggregates, charges, updates the queues and
/// advances the slot.
#[derive(Debug)]
pub struct OnlineSimulation<'a> {
    scenario: &'a Scenario,
    params: OnlineParams,
    queue_params: QueueParams,
    policy: OnlinePolicy,
    feedback: bool,
    sessions: Vec<EvSession>,
    state: QueueState,
    /// Task ledger served by stage 1 of the disaggregation.
    ledger: FifoLedger,
    /// Without feedback the queues are served by `p̌_k`; this ledger follows
    /// them for the delay statistics.
    shadow: FifoLedger,
    slot: usize,
    phase: Phase,
    caps: Option<GroupCaps>,
    traj: Trajectories,
}

impl<'a> OnlineSimulation<'a> {
    pub fn new(
        scenario: &'a Scenario,
        params: OnlineParams,
        policy: OnlinePolicy,
        feedback: bool,
    ) -> Result<Self> {
        params.validate()?;
        if (params.slot_duration_h - scenario.clock.slot_duration_h).abs() > 1e-12 {
            return Err(Error::invalid(
                "slot_duration_h",
                "online parameters and scenario clock disagree",
            ));
        }
        let k = scenario.num_groups();
        let queue_params = params.queue_params(scenario.group_durations());
        queue_params.validate()?;
        let method = match policy {
            OnlinePolicy::Quadratic => Method::Proposed,
            OnlinePolicy::Linear => Method::B3,
        };
        let t_len = scenario.clock.horizon_slots;
        let mut traj = Trajectories::new(method, t_len);
        traj.queues.reserve(t_len);
        Ok(Self {
            scenario,
            params,
            queue_params,
            policy,
            feedback,
            sessions: scenario.sessions.clone(),
            state: QueueState::zeros(k),
            ledger: FifoLedger::new(k),
            shadow: FifoLedger::new(k),
            slot: 0,
            phase: Phase::Quantify,
            caps: None,
            traj,
        })
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn is_finished(&self) -> bool {
        self.slot >= self.scenario.clock.horizon_slots
    }

    pub fn sessions(&self) -> &[EvSession] {
        &self.sessions
    }

    pub fn queue_state(&self) -> &QueueState {
        &self.state
    }

    pub fn ledger(&self) -> &FifoLedger {
        &self.ledger
    }

    fn enter(&mut self, from: Phase, to: Phase) {
        debug_assert_eq!(self.phase, from, "Algorithm 1 steps out of order");
        self.phase = to;
    }

    /// Solves the current slot's problem and reports its interval.
    pub fn quantify(&mut self) -> Result<&FlexibilityInterval> {
        if self.phase != Phase::Quantify {
            return Err(Error::Dispatch("quantify called twice without a dispatch".into()));
        }
        if self.is_finished() {
            return Err(Error::Dispatch("the horizon is exhausted".into()));
        }
        let t = self.slot;
        let start = Instant::now();
        let sessions = &self.sessions;
        let dropped = self.ledger.purge(|id| sessions[id].in_station(t));
        let shadow_dropped = self.shadow.purge(|id| sessions[id].in_station(t));
        let dropped = if self.feedback { dropped } else { shadow_dropped };
        for (k, &p) in dropped.iter().enumerate() {
            self.state.drop_backlog(k, p);
        }
        self.state.slot = t;

        let sc = self.scenario;
        let caps = GroupCaps::compute(
            &self.sessions,
            sc.num_groups(),
            t,
            sc.efficiency,
            sc.clock.slot_duration_h,
        )
        .map_err(|e| e.at_slot(t))?;
        let w = sc.carbon.at(t);
        let durations = &self.queue_params.group_durations;
        let mut iv = match self.policy {
            OnlinePolicy::Quadratic => solve_slot(&self.state, w, &caps.group, durations, &self.params),
            OnlinePolicy::Linear => {
                solve_slot_linear_b3(&self.state, w, &caps.group, durations, &self.params)
            }
        }
        .map_err(|e| e.at_slot(t))?;
        iv.slot = t;
        iv.solve_seconds = start.elapsed().as_secs_f64();
        self.caps = Some(caps);
        self.traj.queues.push(self.state.clone());
        self.traj.intervals.push(iv);
        self.enter(Phase::Quantify, Phase::Dispatch);
        Ok(self.traj.intervals.last().expect("interval just pushed"))
    }

    /// Dispatches `p̌ + γ(p̂ − p̌)` and completes the slot.
    pub fn dispatch_ratio(&mut self, gamma: f64) -> Result<&DispatchOutcome> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::invalid("gamma", "must lie in [0, 1]"));
        }
        let iv = self.pending()?;
        let (gamma, total) = draw_dispatch(iv, gamma);
        self.complete(gamma, total)
    }

    /// Dispatches an explicit aggregate power, which must lie in the interval.
    pub fn dispatch_power(&mut self, power: f64) -> Result<&DispatchOutcome> {
        let iv = self.pending()?;
        let tol = DELIVERY_TOL * (1.0 + iv.upper_sum.abs());
        if !(power >= iv.lower_sum - tol && power <= iv.upper_sum + tol) {
            return Err(Error::Dispatch(format!(
                "dispatch {power} outside [{}, {}]",
                iv.lower_sum, iv.upper_sum
            ))
            .at_slot(self.slot));
        }
        let width = iv.width();
        let gamma = if width > 0.0 {
            ((power - iv.lower_sum) / width).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let total = iv.lower_sum + gamma * width;
        self.complete(gamma, total)
    }

    fn pending(&self) -> Result<&FlexibilityInterval> {
        if self.phase != Phase::Dispatch {
            return Err(Error::Dispatch("dispatch requires a quantified slot".into()));
        }
        Ok(self.traj.intervals.last().expect("quantified slot has an interval"))
    }

    fn complete(&mut self, gamma: f64, total: f64) -> Result<&DispatchOutcome> {
        let t = self.slot;
        self.enter(Phase::Dispatch, Phase::Disaggregate);
        let outcome = self.disaggregate(gamma, total).map_err(|e| e.at_slot(t))?;
        self.enter(Phase::Disaggregate, Phase::QueueUpdate);
        self.update_queues(&outcome).map_err(|e| e.at_slot(t))?;
        self.enter(Phase::QueueUpdate, Phase::Advance);
        self.traj.emission_power.push(outcome.total);
        self.traj.dispatch.push(outcome);
        self.slot += 1;
        self.caps = None;
        self.enter(Phase::Advance, Phase::Quantify);
        Ok(self.traj.dispatch.last().expect("outcome just pushed"))
    }

    fn disaggregate(&mut self, gamma: f64, total: f64) -> Result<DispatchOutcome> {
        let t = self.slot;
        let sc = self.scenario;
        let iv = self.traj.intervals.last().expect("quantified slot has an interval");
        let caps = self.caps.as_ref().expect("quantified slot has caps");
        let group = split_to_groups(iv, gamma);
        let members = members_by_arrival(&self.sessions, sc.num_groups(), t);
        let mut residual = caps.ev.clone();
        let mut alloc = vec![0.0; self.sessions.len()];
        let k = sc.num_groups();
        let mut stage1 = Vec::with_capacity(k);
        let mut stage2 = Vec::with_capacity(k);
        let mut undeliverable = 0.0;
        for g in 0..k {
            let a = disaggregate_two_stage(
                g,
                group[g],
                &mut self.ledger,
                &members[g],
                &mut residual,
                &mut alloc,
                t,
            )?;
            stage1.push(a.stage1);
            stage2.push(a.stage2);
            undeliverable += a.undeliverable;
        }
        apply_charging(
            &mut self.sessions,
            &alloc,
            sc.efficiency,
            sc.clock.slot_duration_h,
            t,
        )?;
        let w = sc.carbon.at(t);
        Ok(DispatchOutcome {
            slot: t,
            gamma,
            total,
            group,
            stage1,
            stage2,
            per_ev: alloc,
            emission_rate: w * total,
            undeliverable,
        })
    }

    fn update_queues(&mut self, outcome: &DispatchOutcome) -> Result<()> {
        let t = self.slot;
        let sc = self.scenario;
        let w = sc.carbon.at(t);
        let arrivals: Vec<f64> = sc.arrivals.per_group.iter().map(|a| a[t]).collect();
        let next = if self.feedback {
            self.state
                .advance_with_dispatch(&outcome.stage1, outcome.total, &arrivals, w, &self.queue_params)?
        } else {
            let iv = self.traj.intervals.last().expect("quantified slot has an interval");
            for (g, &lo) in iv.lower.iter().enumerate() {
                self.shadow.record_service(g, lo, t);
            }
            self.state
                .advance_aggregation(&iv.lower, iv.upper_sum, &arrivals, w, &self.queue_params)?
        };
        // arrivals of slot t are served from t + 1
        for (i, a) in sc.arrivals.per_ev.iter().enumerate() {
            if a[t] > 0.0 {
                let g = sc.sessions[i].group_index;
                self.ledger.push(g, a[t], t, i)?;
                self.shadow.push(g, a[t], t, i)?;
            }
        }
        if self.feedback {
            self.ledger.observe(&next);
        } else {
            self.shadow.observe(&next);
        }
        self.state = next;
        Ok(())
    }

    /// Ends the run and returns its trajectories. Slots not yet simulated
    /// are left out.
    pub fn finish(mut self) -> Result<Trajectories> {
        let ledger = if self.feedback { &self.ledger } else { &self.shadow };
        self.traj.delays = Some(DelayReport::from_ledger(ledger, &self.queue_params)?);
        if self.phase == Phase::Dispatch {
            self.traj.intervals.pop();
            self.traj.queues.pop();
        }
        self.traj.final_sessions = self.sessions;
        Ok(self.traj)
    }
}

/// Runs an online method over the whole horizon with a dispatch-ratio trace.
pub fn run_online(
    scenario: &Scenario,
    params: &OnlineParams,
    policy: OnlinePolicy,
    feedback: bool,
    gammas: &[f64],
) -> Result<Trajectories> {
    check_gammas(scenario, gammas)?;
    let mut sim = OnlineSimulation::new(scenario, params.clone(), policy, feedback)?;
    while !sim.is_finished() {
        let t = sim.slot();
        sim.quantify()?;
        sim.dispatch_ratio(gammas[t])?;
    }
    sim.finish()
}

/// OPI played out against a dispatch trace: the offline region is reported
/// slot by slot and every dispatch is split by convex combination.
pub fn run_opi(
    scenario: &Scenario,
    rate_cap: f64,
    epsilon: f64,
    gammas: &[f64],
) -> Result<(Trajectories, OfflineSolution)> {
    check_gammas(scenario, gammas)?;
    let start = Instant::now();
    let sol = benchmarks::solve_opi(scenario, rate_cap, epsilon)?;
    let t_len = scenario.clock.horizon_slots;
    let per_slot = start.elapsed().as_secs_f64() / t_len as f64;
    let dt = scenario.clock.slot_duration_h;
    let mut sessions = scenario.sessions.clone();
    let mut traj = Trajectories::new(Method::Opi, t_len);
    for t in 0..t_len {
        let mut iv = FlexibilityInterval::aggregate(t, sol.lower_sum[t], sol.upper_sum[t]);
        iv.solve_seconds = per_slot;
        let (gamma, pd) = draw_dispatch(&iv, gammas[t]);
        let lo: Vec<f64> = sol.lower_power.iter().map(|v| v[t]).collect();
        let up: Vec<f64> = sol.upper_power.iter().map(|v| v[t]).collect();
        let (_, alloc) = convex_combination_disaggregate(pd, iv.lower_sum, iv.upper_sum, &lo, &up)
            .map_err(|e| e.at_slot(t))?;
        apply_charging(&mut sessions, &alloc, scenario.efficiency, dt, t).map_err(|e| e.at_slot(t))?;
        let w = scenario.carbon.at(t);
        traj.emission_power.push(iv.upper_sum);
        traj.intervals.push(iv);
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
    Ok((traj, sol))
}

/// Parameters shared by every method of a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSettings {
    pub online: OnlineParams,
    pub feedback: bool,
    pub epsilon: f64,
}

/// Runs one method on a scenario with a dispatch-ratio trace.
pub fn run_method(
    scenario: &Scenario,
    method: Method,
    settings: &MethodSettings,
    gammas: &[f64],
) -> Result<Trajectories> {
    let r = settings.online.rate_cap_kg_per_h;
    match method {
        Method::Proposed => run_online(
            scenario,
            &settings.online,
            OnlinePolicy::Quadratic,
            settings.feedback,
            gammas,
        ),
        Method::B3 => run_online(
            scenario,
            &settings.online,
            OnlinePolicy::Linear,
            settings.feedback,
            gammas,
        ),
        Method::B1 => {
            check_gammas(scenario, gammas)?;
            benchmarks::simple::run_b1(scenario, r, gammas)
        }
        Method::B2 => {
            check_gammas(scenario, gammas)?;
            benchmarks::greedy::run_b2(scenario, r, gammas)
        }
        Method::Opi => run_opi(scenario, r, settings.epsilon, gammas).map(|(t, _)| t),
        Method::Mpc => {
            check_gammas(scenario, gammas)?;
            benchmarks::mpc::run_mpc(scenario, r, settings.epsilon, gammas)
        }
    }
}

fn check_gammas(scenario: &Scenario, gammas: &[f64]) -> Result<()> {
    let t_len = scenario.clock.horizon_slots;
    if gammas.len() < t_len {
        return Err(Error::invalid(
            "gamma trace",
            format!("has {} entries, horizon needs {t_len}", gammas.len()),
        ));
    }
    if let Some(g) = gammas.iter().find(|g| !(0.0..=1.0).contains(*g)) {
        return Err(Error::invalid("gamma trace", format!("ratio {g} outside [0, 1]")));
    }
    Ok(())
}
