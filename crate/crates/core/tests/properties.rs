//! Property tests for the invariants of every module.

use proptest::prelude::*;

use evflex::harness::{run_simulation, Method, OnlinePolicy, OnlineSimulation, RunConfig};
use evflex::online::{solve_slot, solve_slot_linear_b3, theorem_gap_constant, GapBounds, OnlineParams};
use evflex::qp::{self, CscMatrix, QpProblem, QpStatus, Settings};
use evflex::queues::{update_carbon_queue, update_charge_queue, update_delay_queue, FifoLedger, QueueState};
use evflex::scenario::{hourly_groups, packetize, EvSession, FleetDistribution, Scenario, SimClock};

fn session(arrival: usize, stay: usize, e_ini: f64, e_req: f64, p_max: f64) -> EvSession {
    EvSession {
        id: 0,
        arrival_slot: arrival,
        departure_slot: arrival + stay,
        initial_energy_kwh: e_ini,
        required_energy_kwh: e_req,
        min_energy_kwh: 0.0,
        max_energy_kwh: e_req.max(e_ini) + 5.0,
        max_power_kw: p_max,
        capacity_kwh: e_req.max(e_ini) + 10.0,
        group_index: 0,
        current_energy_kwh: e_ini,
    }
}

fn small_config(method: Method, seed: u64, fleet: usize) -> RunConfig {
    let mut cfg = RunConfig {
        method,
        seed,
        performance_ratio: false,
        ..RunConfig::default()
    };
    cfg.scenario.fleet.fleet_size = fleet;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn packetization_conserves_energy_and_support(
        arrival in 0usize..100,
        stay in 1usize..150,
        e_ini in 0.0f64..40.0,
        task_frac in 0.0f64..1.0,
        p_max in prop::sample::select(vec![3.3, 7.0, 11.0, 22.0]),
        efficiency in 0.8f64..1.0,
    ) {
        let clock = SimClock::day_5min();
        let dt = clock.slot_duration_h;
        let stay = stay.min(clock.horizon_slots - arrival);
        let e_req = e_ini + task_frac * efficiency * p_max * dt * stay as f64;
        let s = session(arrival, stay, e_ini, e_req, p_max);
        let a = packetize(&s, &clock, efficiency).unwrap();
        let delivered: f64 = a.iter().map(|p| p * efficiency * dt).sum();
        prop_assert!((delivered - (e_req - e_ini)).abs() <= 1e-9);
        let eta = (e_req - e_ini) / (efficiency * p_max * dt);
        for (t, &p) in a.iter().enumerate() {
            prop_assert!(p >= 0.0 && p <= p_max + 1e-12);
            if t < arrival || t as f64 > arrival as f64 + eta.floor() {
                prop_assert_eq!(p, 0.0, "slot {}", t);
            }
        }
    }

    #[test]
    fn scenario_generation_is_deterministic_with_exact_group_totals(seed in any::<u64>(), n in 1usize..60) {
        let clock = SimClock::day_5min();
        let groups = hourly_groups(4, 12, &clock).unwrap();
        let dist = FleetDistribution { fleet_size: n, rng_seed: seed, ..FleetDistribution::default() };
        let carbon = evflex::scenario::CarbonSource::default();
        let a = Scenario::generate(&dist, clock, groups.clone(), &carbon).unwrap();
        let b = Scenario::generate(&dist, clock, groups, &carbon).unwrap();
        prop_assert_eq!(&a.sessions, &b.sessions);
        prop_assert_eq!(&a.arrivals, &b.arrivals);
        prop_assert_eq!(&a.carbon, &b.carbon);
        for t in 0..clock.horizon_slots {
            let by_group: f64 = a.arrivals.per_group.iter().map(|g| g[t]).sum();
            let by_ev: f64 = a.arrivals.per_ev.iter().map(|e| e[t]).sum();
            prop_assert!((by_group - a.arrivals.total[t]).abs() <= 1e-9);
            prop_assert!((by_ev - a.arrivals.total[t]).abs() <= 1e-9);
        }
    }

    #[test]
    fn queues_stay_non_negative(
        steps in prop::collection::vec((0.0f64..50.0, 0.0f64..50.0, 0.0f64..1.0, 0.0f64..200.0), 1..200),
        lambda in 1.0f64..200.0,
        r_slots in 1usize..144,
        rate_cap in 1.0f64..60.0,
    ) {
        let (mut j, mut h, mut q) = (0.0, 0.0, 0.0);
        for (service, arrival, w, power) in steps {
            let h_next = update_delay_queue(h, service, j, lambda, r_slots).unwrap();
            let j_next = update_charge_queue(j, service, arrival).unwrap();
            let q_next = update_carbon_queue(q, w, power, rate_cap).unwrap();
            if q > 0.0 && q + w * power - rate_cap > 0.0 {
                prop_assert!((q_next - (q + w * power - rate_cap)).abs() <= 1e-12);
            }
            (j, h, q) = (j_next, h_next, q_next);
            prop_assert!(j >= 0.0 && h >= 0.0 && q >= 0.0);
        }
    }

    #[test]
    fn ledger_total_tracks_charge_queue(
        steps in prop::collection::vec((prop::collection::vec(0.0f64..10.0, 0..4), 0.0f64..25.0), 1..100),
    ) {
        let mut ledger = FifoLedger::new(1);
        let mut j = 0.0;
        for (slot, (arrivals, service)) in steps.into_iter().enumerate() {
            ledger.record_service(0, service, slot);
            let arrival: f64 = arrivals.iter().sum();
            for (ev, &a) in arrivals.iter().enumerate() {
                ledger.push(0, a, slot, ev).unwrap();
            }
            j = update_charge_queue(j, service, arrival).unwrap();
            prop_assert!((ledger.total(0) - j).abs() <= 1e-9 * (1.0 + j));
        }
    }

    #[test]
    fn capped_service_is_fifo(
        entries in prop::collection::vec((0.1f64..10.0, 0.0f64..12.0), 1..12),
        budget in 0.0f64..60.0,
    ) {
        let mut ledger = FifoLedger::new(1);
        let mut caps = Vec::new();
        for (id, &(power, cap)) in entries.iter().enumerate() {
            ledger.push(0, power, 0, id).unwrap();
            caps.push(cap);
        }
        let before = ledger.total(0);
        let out = ledger.serve_capped(0, budget, &mut caps, 1);
        prop_assert!(out.consumed <= budget + 1e-9);
        prop_assert!((before - ledger.total(0) - out.consumed).abs() <= 1e-9);
        let credited: f64 = out.credits.iter().map(|c| c.1).sum();
        prop_assert!((credited - out.consumed).abs() <= 1e-9);
        // An unserved entry whose EV has room blocks every later entry.
        let pending: Vec<usize> = ledger.entries(0).map(|e| e.ev_id).collect();
        if let Some(&blocker) = pending.iter().find(|&&id| caps[id] > 1e-9) {
            prop_assert!(out.credits.iter().all(|&(id, _)| id <= blocker));
        }
        for &c in &caps {
            prop_assert!(c >= -1e-9);
        }
    }

    #[test]
    fn qp_solution_is_invariant_to_row_scaling(
        n in 1usize..5,
        seed in any::<u64>(),
        scales in prop::collection::vec(0.01f64..100.0, 8),
    ) {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let diag: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let upper: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let build = |scale: &[f64]| {
            let mut a = Vec::new();
            let (mut l, mut u) = (Vec::new(), Vec::new());
            for i in 0..n {
                let mut row = vec![0.0; n];
                row[i] = scale[i];
                a.push(row);
                l.push(0.0);
                u.push(upper[i] * scale[i]);
            }
            a.push(vec![scale[n]; n]);
            l.push(f64::NEG_INFINITY);
            u.push(scale[n] * upper.iter().sum::<f64>() * 0.5);
            let p: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| if i == j { diag[i] } else { 0.0 }).collect())
                .collect();
            QpProblem::from_dense(&p, &q, &a, &l, &u).unwrap()
        };
        let settings = Settings::with_tolerances(1e-9, 0.0);
        let base = qp::solve(&build(&[1.0; 8]), &settings).unwrap();
        let scaled = qp::solve(&build(&scales), &settings).unwrap();
        let again = qp::solve(&build(&[1.0; 8]), &settings).unwrap();
        prop_assert_eq!(base.status, QpStatus::Solved);
        prop_assert_eq!(scaled.status, QpStatus::Solved);
        for i in 0..n {
            prop_assert!((base.x[i] - scaled.x[i]).abs() <= 1e-6, "{:?} vs {:?}", base.x, scaled.x);
            prop_assert!((base.x[i] - again.x[i]).abs() <= 1e-8);
        }
    }

    #[test]
    fn per_slot_interval_is_ordered_and_monotone(
        k in 1usize..5,
        seed in any::<u64>(),
        beta in 0.0f64..20.0,
    ) {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = OnlineParams { carbon_queue_weight: beta, ..OnlineParams::default() };
        let mut state = QueueState::zeros(k);
        let durations: Vec<usize> = (0..k).map(|g| 48 + 12 * g).collect();
        let caps: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..60.0)).collect();
        for g in 0..k {
            state.j[g] = rng.random_range(0.0..1500.0);
            state.h[g] = rng.random_range(0.0..200.0);
        }
        state.qc = rng.random_range(0.0..200.0);
        let w = rng.random_range(0.05..0.6);

        let iv = solve_slot(&state, w, &caps, &durations, &params).unwrap();
        for g in 0..k {
            prop_assert!(iv.lower[g] >= 0.0);
            prop_assert!(iv.lower[g] <= iv.upper[g]);
            prop_assert!(iv.upper[g] <= caps[g]);
        }

        let mut more_carbon = state.clone();
        more_carbon.qc += rng.random_range(1.0..500.0);
        let iv_c = solve_slot(&more_carbon, w, &caps, &durations, &params).unwrap();
        prop_assert!(iv_c.upper_sum <= iv.upper_sum + 1e-4, "{} > {}", iv_c.upper_sum, iv.upper_sum);

        let g = rng.random_range(0..k);
        let mut more_backlog = state.clone();
        more_backlog.j[g] += rng.random_range(1.0..500.0);
        let iv_j = solve_slot(&more_backlog, w, &caps, &durations, &params).unwrap();
        prop_assert!(iv_j.lower[g] >= iv.lower[g] - 1e-4, "{} < {}", iv_j.lower[g], iv.lower[g]);
    }

    #[test]
    fn linear_variant_matches_generic_lp(
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let params = OnlineParams::default();
        let mut state = QueueState::zeros(k);
        let durations: Vec<usize> = (0..k).map(|g| 48 + 12 * g).collect();
        let caps: Vec<f64> = (0..k).map(|_| rng.random_range(1.0..60.0)).collect();
        for g in 0..k {
            state.j[g] = rng.random_range(0.0..1500.0);
            state.h[g] = rng.random_range(0.0..200.0);
        }
        state.qc = rng.random_range(0.0..300.0);
        let w = rng.random_range(0.05..0.6);
        let iv = solve_slot_linear_b3(&state, w, &caps, &durations, &params).unwrap();

        let vdt = params.flexibility_weight * params.slot_duration_h;
        let mut c = vec![0.0; 2 * k];
        let mut trip = Vec::new();
        let (mut l, mut u) = (vec![0.0; 3 * k], vec![0.0; 3 * k]);
        for g in 0..k {
            c[g] = vdt - state.j[g] - state.h[g];
            c[k + g] = -vdt + params.carbon_queue_weight * state.qc * w;
            trip.push((g, g, 1.0));
            trip.push((k + g, k + g, 1.0));
            trip.push((2 * k + g, k + g, 1.0));
            trip.push((2 * k + g, g, -1.0));
            u[g] = caps[g];
            u[k + g] = caps[g];
            l[2 * k + g] = 0.0;
            u[2 * k + g] = f64::INFINITY;
        }
        let a = CscMatrix::from_triplets(3 * k, 2 * k, &trip).unwrap();
        let lp = QpProblem::new(CscMatrix::zeros(2 * k, 2 * k), c.clone(), a, l, u).unwrap();
        let sol = qp::solve(&lp, &Settings::with_tolerances(1e-9, 0.0)).unwrap();
        let closed: f64 = (0..k).map(|g| c[g] * iv.lower[g] + c[k + g] * iv.upper[g]).sum();
        let generic: f64 = (0..2 * k).map(|i| c[i] * sol.x[i]).sum();
        prop_assert!((closed - generic).abs() <= 1e-5 * (1.0 + generic.abs()), "{} vs {}", closed, generic);
        for g in 0..k {
            prop_assert!(0.0 <= iv.lower[g] && iv.lower[g] <= iv.upper[g] && iv.upper[g] <= caps[g]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn online_runs_conserve_dispatch_and_respect_caps(
        seed in any::<u64>(),
        fleet in 5usize..40,
        method in prop::sample::select(vec![Method::Proposed, Method::B3]),
        feedback in any::<bool>(),
    ) {
        let mut cfg = small_config(method, seed, fleet);
        cfg.feedback_enabled = feedback;
        let out = run_simulation(&cfg).unwrap();
        out.check_invariants().unwrap();
        let sc = &out.scenario;
        let dt = sc.clock.slot_duration_h;
        let mut energy: Vec<f64> = sc.sessions.iter().map(|s| s.initial_energy_kwh).collect();
        for d in &out.trajectories.dispatch {
            prop_assert!(d.undeliverable <= 1e-9);
            let sum: f64 = d.per_ev.iter().sum();
            prop_assert!((sum - d.total).abs() <= 1e-6 * (1.0 + d.total));
            for k in 0..d.group.len() {
                let parts = d.stage1[k] + d.stage2[k];
                prop_assert!((d.group[k] - parts).abs() <= 1e-12 * (1.0 + d.group[k]), "{} != {}", d.group[k], parts);
            }
            for (i, s) in sc.sessions.iter().enumerate() {
                let cap = evflex::online::ev_power_cap(
                    &EvSession { current_energy_kwh: energy[i], ..s.clone() },
                    d.slot,
                    sc.efficiency,
                    dt,
                ).unwrap();
                prop_assert!(d.per_ev[i] <= cap + 1e-9, "ev {} slot {}: {} > {}", i, d.slot, d.per_ev[i], cap);
                energy[i] += sc.efficiency * d.per_ev[i] * dt;
                prop_assert!(energy[i] <= s.max_energy_kwh + 1e-9);
            }
        }
        let delays = out.trajectories.delays.as_ref().unwrap();
        prop_assert!(delays.violations().is_empty());
    }

    #[test]
    fn carbon_compliant_methods_respect_the_cap(
        seed in any::<u64>(),
        fleet in 5usize..40,
        method in prop::sample::select(vec![Method::Proposed, Method::B2, Method::B3, Method::Opi]),
    ) {
        let out = run_simulation(&small_config(method, seed, fleet)).unwrap();
        let r = out.config.control.rate_cap_kg_per_h;
        prop_assert!(out.metrics.time_avg_emission_rate_kg_per_h <= r + 1e-6);
    }

    #[test]
    fn identical_config_gives_identical_metrics(
        seed in any::<u64>(),
        fleet in 5usize..30,
        method in prop::sample::select(vec![Method::Proposed, Method::B1, Method::B2, Method::B3]),
    ) {
        let cfg = small_config(method, seed, fleet);
        let a = run_simulation(&cfg).unwrap();
        let b = run_simulation(&cfg).unwrap();
        let strip = |mut m: evflex::harness::RunMetrics| {
            m.solve_time = Default::default();
            m
        };
        prop_assert_eq!(strip(a.metrics), strip(b.metrics));
    }
}

#[test]
fn mpc_never_overspends_the_budget() {
    let out = run_simulation(&small_config(Method::Mpc, 9, 8)).unwrap();
    let sc = &out.scenario;
    let dt = sc.clock.slot_duration_h;
    let budget = out.config.control.rate_cap_kg_per_h * sc.clock.horizon_slots as f64 * dt;
    let mut spent = 0.0;
    for (t, p) in out.trajectories.emission_power.iter().enumerate() {
        spent += sc.carbon.intensity[t] * p * dt;
        assert!(spent <= budget + 1e-6, "slot {t}: {spent} > {budget}");
    }
}

#[test]
fn proposed_drains_charge_queues_by_the_horizon() {
    for seed in 1..=3 {
        let cfg = small_config(Method::Proposed, seed, 100);
        let sc = cfg.build_scenario().unwrap();
        let gammas = cfg.gamma_trace().unwrap();
        let mut sim =
            OnlineSimulation::new(&sc, cfg.online_params().unwrap(), OnlinePolicy::Quadratic, true).unwrap();
        for &g in &gammas {
            sim.quantify().unwrap();
            sim.dispatch_ratio(g).unwrap();
        }
        let j = &sim.queue_state().j;
        assert!(j.iter().all(|&v| v <= 1e-6), "seed {seed}: final J {j:?}");
    }
}

#[test]
fn no_feedback_flexibility_is_bounded_by_offline_reference() {
    let mut excess = Vec::new();
    for seed in 1..=2 {
        let mut cfg = small_config(Method::Proposed, seed, 100);
        cfg.feedback_enabled = false;
        cfg.performance_ratio = true;
        let out = run_simulation(&cfg).unwrap();
        let sc = &out.scenario;
        let dt = sc.clock.slot_duration_h;
        let traj = &out.trajectories;
        let k = sc.num_groups();
        let bounds = GapBounds {
            arrival_max: (0..k)
                .map(|g| sc.arrivals.per_group[g].iter().cloned().fold(0.0, f64::max))
                .collect(),
            lower_max: (0..k)
                .map(|g| traj.intervals.iter().map(|iv| iv.lower[g]).fold(0.0, f64::max))
                .collect(),
            upper_sum_max: traj.intervals.iter().map(|iv| iv.upper_sum).fold(0.0, f64::max),
            intensity_max: sc.carbon.max(),
        };
        let params = cfg.online_params().unwrap();
        let (_, b_over_v) = theorem_gap_constant(&params, &sc.group_durations(), &bounds).unwrap();
        let slack = b_over_v * sc.clock.horizon_slots as f64 * dt;
        let reference = out.opi.as_ref().unwrap().total_flexibility(dt);
        let online = out.metrics.total_flexibility_kwh;
        if online > reference + slack {
            excess.push(format!("seed {seed}: online {online:.1} > offline {reference:.1} + {slack:.1}"));
        }
    }
    assert!(excess.is_empty(), "{excess:?}");
}
