#![allow(dead_code)]

use std::io::Write;

/// Final resolution of the grid oracle.
pub const GRID_STEP: f64 = 1e-3;
/// Points per axis on the coarsest grid, at most.
const COARSE_POINTS: f64 = 32.0;
/// Refinement factor between levels.
const REFINE: f64 = 4.0;
/// Half-width of a refinement window, in steps of the previous level.
const WINDOW: f64 = 3.0;

/// Minimizes `f` over the feasible points of a nested sequence of grids
/// inside `[0, upper]`. Each level searches every lattice point within
/// `WINDOW` coarse steps of the previous best, together with every bound in
/// `upper` and zero, and the last level has step `GRID_STEP`. Exact for
/// strictly convex `f` whose minimizer lies within the first window.
pub fn grid_minimize(
    upper: &[f64],
    feasible: impl Fn(&[f64]) -> bool,
    f: impl Fn(&[f64]) -> f64,
) -> Vec<f64> {
    let n = upper.len();
    let span = upper.iter().cloned().fold(0.0, f64::max);
    let mut step = GRID_STEP;
    while span / step > COARSE_POINTS {
        step *= REFINE;
    }
    let mut best = vec![0.0; n];
    let mut window: Vec<(f64, f64)> = upper.iter().map(|&u| (0.0, u)).collect();
    loop {
        let axes: Vec<Vec<f64>> = (0..n).map(|i| axis(upper, i, window[i], step)).collect();
        let mut best_val = f64::INFINITY;
        let mut idx = vec![0usize; n];
        let mut x = vec![0.0; n];
        'outer: loop {
            for i in 0..n {
                x[i] = axes[i][idx[i]];
            }
            if feasible(&x) {
                let v = f(&x);
                if v < best_val {
                    best_val = v;
                    best.copy_from_slice(&x);
                }
            }
            for i in 0..n {
                idx[i] += 1;
                if idx[i] < axes[i].len() {
                    continue 'outer;
                }
                idx[i] = 0;
            }
            break;
        }
        assert!(best_val.is_finite(), "grid holds no feasible point");
        if step <= GRID_STEP * 1.000_001 {
            return best;
        }
        window = best
            .iter()
            .zip(upper)
            .map(|(&b, &u)| ((b - WINDOW * step).max(0.0), (b + WINDOW * step).min(u)))
            .collect();
        step /= REFINE;
    }
}

fn axis(upper: &[f64], i: usize, (lo, hi): (f64, f64), step: f64) -> Vec<f64> {
    let mut pts: Vec<f64> = Vec::new();
    let mut m = (lo / step).ceil();
    while m * step <= hi + 1e-12 {
        pts.push((m * step).min(upper[i]));
        m += 1.0;
    }
    pts.push(0.0);
    pts.extend(upper.iter().copied());
    pts.retain(|&p| p >= lo - 1e-12 && p <= hi + 1e-12 && p <= upper[i]);
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

/// Writes one line to the real stderr, past the test harness's capture.
pub fn report(line: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

/// Prints the verdict line and returns whether it passed.
pub fn verdict(id: usize, name: &str, pass: bool, detail: &str) -> bool {
    let status = if pass { "PASS" } else { "FAIL" };
    report(&format!("[acceptance {id:>2}] {status} {name}: {detail}"));
    pass
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
