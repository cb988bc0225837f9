use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use evflex::benchmarks::solve_opi;
use evflex::harness::RunConfig;
use evflex::online::{solve_slot, OnlineParams};
use evflex::qp::{self, solve_ipm, IpmSettings, QpProblem, Settings};
use evflex::queues::QueueState;

/// A per-slot instance with `k` groups and moderate queue pressure.
fn slot_instance(k: usize) -> (QueueState, Vec<f64>, Vec<usize>) {
    let mut state = QueueState::zeros(k);
    for g in 0..k {
        state.j[g] = 300.0 + 90.0 * g as f64;
        state.h[g] = 20.0 * g as f64;
    }
    state.qc = 40.0;
    let caps = (0..k).map(|g| 10.0 + 7.0 * g as f64).collect();
    let durations = (0..k).map(|g| 48 + 12 * g).collect();
    (state, caps, durations)
}

fn bench_solve_slot(c: &mut Criterion) {
    let params = OnlineParams::default();
    let mut group = c.benchmark_group("solve_slot");
    for k in [1, 3, 9] {
        let (state, caps, durations) = slot_instance(k);
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| solve_slot(black_box(&state), 0.3, &caps, &durations, &params).unwrap())
        });
    }
    group.finish();
}

/// Box-constrained chain `x_1 ≤ x_2 ≤ … ≤ x_n` with a tridiagonal cost.
fn chain_qp(n: usize) -> QpProblem {
    let mut trip = Vec::new();
    for i in 0..n {
        trip.push((i, i, 2.0));
        if i + 1 < n {
            trip.push((i, i + 1, -0.5));
        }
    }
    let p = qp::CscMatrix::from_triplets(n, n, &trip).unwrap();
    let q = (0..n).map(|i| if i % 2 == 0 { -1.0 } else { 0.5 }).collect();
    let mut a_trip = Vec::new();
    let (mut l, mut u) = (Vec::new(), Vec::new());
    for i in 0..n {
        a_trip.push((i, i, 1.0));
        l.push(0.0);
        u.push(1.0);
    }
    for i in 0..n - 1 {
        a_trip.push((n + i, i, 1.0));
        a_trip.push((n + i, i + 1, -1.0));
        l.push(f64::NEG_INFINITY);
        u.push(0.0);
    }
    let a = qp::CscMatrix::from_triplets(2 * n - 1, n, &a_trip).unwrap();
    QpProblem::new(p, q, a, l, u).unwrap()
}

fn bench_qp(c: &mut Criterion) {
    let mut group = c.benchmark_group("qp_chain");
    for n in [10, 100, 1000] {
        let prob = chain_qp(n);
        group.bench_with_input(BenchmarkId::new("admm", n), &prob, |b, p| {
            b.iter(|| qp::solve(black_box(p), &Settings::default()).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("ipm", n), &prob, |b, p| {
            b.iter(|| solve_ipm(black_box(p), &IpmSettings::default()).unwrap())
        });
    }
    group.finish();
}

fn bench_opi(c: &mut Criterion) {
    let mut group = c.benchmark_group("opi");
    group.sample_size(10);
    for n in [20, 100] {
        let mut cfg = RunConfig::default();
        cfg.scenario.fleet.fleet_size = n;
        let sc = cfg.build_scenario().unwrap();
        let r = cfg.control.rate_cap_kg_per_h;
        group.bench_with_input(BenchmarkId::from_parameter(n), &sc, |b, sc| {
            b.iter(|| solve_opi(black_box(sc), r, cfg.offline_epsilon).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_solve_slot, bench_qp, bench_opi);
criterion_main!(benches);
