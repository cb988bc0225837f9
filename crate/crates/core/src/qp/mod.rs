//! Convex quadratic programming.
//!
//! Problems have the form
//!
//! ```text
//! minimize    ½ xᵀ P x + qᵀ x
//! subject to  l ≤ A x ≤ u
//! ```
//!
//! with `P` symmetric positive semidefinite. Two solvers share the problem
//! type, equilibration and a sparse LDLᵀ factorization of quasi-definite
//! systems:
//!
//! * [`solve`]: operator splitting (ADMM) with a cached factorization and an
//!   optional active-set polish. Cheap per iteration and warm-startable,
//!   suited to many small problems.
//! * [`solve_ipm`]: primal-dual interior point with predictor-corrector
//!   steps. Refactors every iteration but converges in a few dozen
//!   iterations regardless of conditioning, suited to large near-linear
//!   programs.

mod admm;
mod ipm;
mod ldl;
mod sparse;

use std::io::Write;

pub use admm::{solve, solve_warm, Settings};
pub use ipm::{solve_ipm, IpmSettings};
pub use ldl::LdlFactor;
pub use sparse::CscMatrix;

use crate::error::{Error, Result};

/// Tolerance used to validate the symmetry of a full `P`.
const SYMMETRY_TOL: f64 = 1e-12;

/// A convex QP. `p` holds the upper triangle of the symmetric cost matrix.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p: CscMatrix,
    pub q: Vec<f64>,
    pub a: CscMatrix,
    pub l: Vec<f64>,
    pub u: Vec<f64>,
}

impl QpProblem {
    /// Validates and stores a problem. `p` may be given either as its upper
    /// triangle or as a full symmetric matrix.
    pub fn new(p: CscMatrix, q: Vec<f64>, a: CscMatrix, l: Vec<f64>, u: Vec<f64>) -> Result<Self> {
        let n = q.len();
        if p.nrows != n || p.ncols != n {
            return Err(Error::Dimension(format!(
                "P is {}x{}, expected {n}x{n}",
                p.nrows, p.ncols
            )));
        }
        if a.ncols != n {
            return Err(Error::Dimension(format!(
                "A has {} columns, expected {n}",
                a.ncols
            )));
        }
        if l.len() != a.nrows || u.len() != a.nrows {
            return Err(Error::Dimension(format!(
                "bounds have lengths {}/{}, A has {} rows",
                l.len(),
                u.len(),
                a.nrows
            )));
        }
        if !p.all_finite() || !a.all_finite() || q.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver("NaN or Inf in P, q or A".into()));
        }
        for (i, (lo, hi)) in l.iter().zip(&u).enumerate() {
            if lo.is_nan() || hi.is_nan() {
                return Err(Error::Solver(format!("NaN bound in row {i}")));
            }
            if lo > hi {
                return Err(Error::Solver(format!("row {i}: l = {lo} > u = {hi}")));
            }
            if *lo == f64::INFINITY || *hi == f64::NEG_INFINITY {
                return Err(Error::Solver(format!("row {i}: unsatisfiable infinite bound")));
            }
        }
        let has_lower = (0..p.ncols)
            .any(|c| p.rowind[p.colptr[c]..p.colptr[c + 1]].iter().any(|&r| r > c));
        if has_lower {
            let t = p.transpose();
            for c in 0..n {
                for k in p.colptr[c]..p.colptr[c + 1] {
                    let r = p.rowind[k];
                    if (p.values[k] - t.get(r, c)).abs() > SYMMETRY_TOL {
                        return Err(Error::Solver(format!("P is not symmetric at ({r}, {c})")));
                    }
                }
                for k in t.colptr[c]..t.colptr[c + 1] {
                    if p.get(t.rowind[k], c) == 0.0 && t.values[k].abs() > SYMMETRY_TOL {
                        return Err(Error::Solver(format!(
                            "P is not symmetric at ({}, {c})",
                            t.rowind[k]
                        )));
                    }
                }
            }
        }
        Ok(Self {
            p: p.upper_triangle(),
            q,
            a,
            l,
            u,
        })
    }

    /// Dense convenience constructor.
    pub fn from_dense(
        p: &[Vec<f64>],
        q: &[f64],
        a: &[Vec<f64>],
        l: &[f64],
        u: &[f64],
    ) -> Result<Self> {
        let pm = CscMatrix::from_dense(p)?;
        let am = if a.is_empty() {
            CscMatrix::zeros(0, q.len())
        } else {
            CscMatrix::from_dense(a)?
        };
        Self::new(pm, q.to_vec(), am, l.to_vec(), u.to_vec())
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.a.nrows
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut px = vec![0.0; x.len()];
        self.p.sym_upper_mul_vec(x, &mut px);
        x.iter()
            .zip(&px)
            .zip(&self.q)
            .map(|((xi, pxi), qi)| 0.5 * xi * pxi + qi * xi)
            .sum()
    }

    /// Writes the problem as plain-text matrix blocks for external checking.
    pub fn dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "# n {} m {}", self.num_vars(), self.num_constraints())?;
        writeln!(w, "P")?;
        let full = {
            let mut d = self.p.to_dense();
            for (i, row) in d.clone().iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    if i != j && *v != 0.0 {
                        d[j][i] = *v;
                    }
                }
            }
            d
        };
        for row in &full {
            writeln!(w, "{}", join(row))?;
        }
        writeln!(w, "q\n{}", join(&self.q))?;
        writeln!(w, "A")?;
        for row in self.a.to_dense() {
            writeln!(w, "{}", join(&row))?;
        }
        writeln!(w, "l\n{}", join(&self.l))?;
        writeln!(w, "u\n{}", join(&self.u))?;
        Ok(())
    }
}

fn join(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIterations,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Multipliers of `l ≤ Ax ≤ u`; positive when the upper bound is active.
    pub y: Vec<f64>,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
    pub polished: bool,
}

impl QpSolution {
    pub fn is_solved(&self) -> bool {
        self.status == QpStatus::Solved
    }
}

/// Residual norms of a candidate primal/dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `‖Ax − Π[l,u](Ax)‖∞`
    pub primal: f64,
    /// `‖Px + q + Aᵀy‖∞`
    pub dual: f64,
    /// Largest `|yᵢ| · gap` to the bound the sign of `yᵢ` selects.
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.dual).max(self.complementarity)
    }
}

/// Evaluates the KKT residuals of `(x, y)` for `problem`.
pub fn kkt_residuals(problem: &QpProblem, x: &[f64], y: &[f64]) -> Result<KktResiduals> {
    let n = problem.num_vars();
    let m = problem.num_constraints();
    if x.len() != n || y.len() != m {
        return Err(Error::Dimension(format!(
            "candidate has x: {}, y: {}; problem has n = {n}, m = {m}",
            x.len(),
            y.len()
        )));
    }
    let mut ax = vec![0.0; m];
    problem.a.mul_vec(x, &mut ax);
    let primal = ax
        .iter()
        .zip(problem.l.iter().zip(&problem.u))
        .map(|(v, (lo, hi))| (v - v.clamp(*lo, *hi)).abs())
        .fold(0.0, f64::max);

    let mut px = vec![0.0; n];
    problem.p.sym_upper_mul_vec(x, &mut px);
    let mut aty = vec![0.0; n];
    problem.a.tmul_vec(y, &mut aty);
    let dual = (0..n)
        .map(|j| (px[j] + problem.q[j] + aty[j]).abs())
        .fold(0.0, f64::max);

    let mut complementarity = 0.0f64;
    for i in 0..m {
        let gap = if y[i] > 0.0 {
            problem.u[i] - ax[i]
        } else if y[i] < 0.0 {
            ax[i] - problem.l[i]
        } else {
            continue;
        };
        let c = if gap.is_infinite() {
            f64::INFINITY
        } else {
            (y[i] * gap).abs()
        };
        complementarity = complementarity.max(c);
    }
    Ok(KktResiduals {
        primal,
        dual,
        complementarity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(lo: f64, hi: f64) -> QpProblem {
        // min x² − 2x  ⇔  ½·2·x² − 2x
        QpProblem::from_dense(&[vec![2.0]], &[-2.0], &[vec![1.0]], &[lo], &[hi]).unwrap()
    }

    #[test]
    fn interior_optimum() {
        let sol = solve(&scalar(0.0, 10.0), &Settings::default()).unwrap();
        assert!(sol.is_solved());
        assert!((sol.x[0] - 1.0).abs() < 1e-6);
        assert!((sol.objective + 1.0).abs() < 1e-6);
    }

    #[test]
    fn active_lower_bound() {
        let sol = solve(&scalar(2.0, 10.0), &Settings::default()).unwrap();
        assert!(sol.is_solved());
        assert!((sol.x[0] - 2.0).abs() < 1e-6);
        assert!(sol.y[0] < 0.0);
    }

    #[test]
    fn analytic_solution_has_zero_residuals() {
        let p = scalar(0.0, 10.0);
        let r = kkt_residuals(&p, &[1.0], &[0.0]).unwrap();
        assert!(r.max() <= 1e-12);
        let p2 = scalar(2.0, 10.0);
        // stationarity: 2·2 − 2 + y = 0
        let r2 = kkt_residuals(&p2, &[2.0], &[-2.0]).unwrap();
        assert!(r2.max() <= 1e-12);
    }

    #[test]
    fn perturbed_solution_is_detected() {
        let p = scalar(0.0, 10.0);
        let r = kkt_residuals(&p, &[1.1], &[0.0]).unwrap();
        assert!(r.primal > 1e-3 || r.dual > 1e-3);
    }

    #[test]
    fn kkt_dimension_mismatch() {
        let p = scalar(0.0, 1.0);
        assert!(kkt_residuals(&p, &[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(QpProblem::from_dense(&[vec![f64::NAN]], &[0.0], &[vec![1.0]], &[0.0], &[1.0]).is_err());
        assert!(QpProblem::from_dense(&[vec![1.0]], &[0.0], &[vec![1.0]], &[2.0], &[1.0]).is_err());
        let asym = vec![vec![1.0, 0.5], vec![0.2, 1.0]];
        assert!(QpProblem::from_dense(&asym, &[0.0, 0.0], &[], &[], &[]).is_err());
    }

    #[test]
    fn non_psd_cost_is_rejected() {
        let p = QpProblem::from_dense(
            &[vec![-1.0, 0.0], vec![0.0, 1.0]],
            &[0.0, 0.0],
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[-1.0, -1.0],
            &[1.0, 1.0],
        )
        .unwrap();
        assert!(solve(&p, &Settings::default()).is_err());
    }

    #[test]
    fn infeasible_problem_is_flagged() {
        // x ≥ 1 and x ≤ 0 via two rows
        let p = QpProblem::from_dense(
            &[vec![1.0]],
            &[0.0],
            &[vec![1.0], vec![1.0]],
            &[1.0, f64::NEG_INFINITY],
            &[f64::INFINITY, 0.0],
        )
        .unwrap();
        let sol = solve(&p, &Settings::default()).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn dump_writes_blocks() {
        let mut buf = Vec::new();
        scalar(0.0, 1.0).dump(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("# n 1 m 1\nP\n2e0\nq\n-2e0"));
    }
}
