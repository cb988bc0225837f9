//! Primal-dual interior-point method with Mehrotra predictor-corrector steps.
//!
//! Every two-sided row `l ≤ aᵀx ≤ u` carries one slack and multiplier per
//! finite side; rows with `l = u` are equalities with a free multiplier.
//! Eliminating slacks and bound multipliers leaves the quasi-definite system
//! `[P + σI, Aᵀ; A, −diag(E)]`, which shares its sparsity pattern across
//! iterations so only the numeric factorization is repeated.

use super::admm::{assemble_kkt, equilibrate, Scaled};
use super::ldl::LdlFactor;
use super::sparse::inf_norm;
use super::{QpProblem, QpSolution, QpStatus};
use crate::error::{Error, Result};

/// Fraction of the distance to the boundary taken by each step.
const STEP_FRACTION: f64 = 0.995;
/// Diagonal used for rows without finite bounds, keeping their multiplier at zero.
const FREE_ROW_DIAG: f64 = 1e20;
const MAX_DIAG: f64 = 1e20;
const MIN_DIAG: f64 = 1e-12;
/// Pivots closer to zero than this, in the expected sign, are regularized.
const PIVOT_EPS: f64 = 1e-13;
const PIVOT_DELTA: f64 = 2e-7;
/// Smallest starting slack or multiplier.
const MIN_START: f64 = 1e-4;
/// Relative residual at which iterative refinement stops.
const REFINE_TOL: f64 = 1e-12;
/// Multiplier magnitude taken as a certificate of infeasibility.
const DIVERGENCE: f64 = 1e14;
/// Step length below which the iteration is considered stalled.
const STALL_STEP: f64 = 1e-8;
/// Accuracy accepted from the best iterate when the tolerance is not reached.
const STALL_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct IpmSettings {
    /// Relative tolerance on primal and dual residuals and the duality measure.
    pub tol: f64,
    pub max_iter: usize,
    pub scaling_iters: usize,
    /// Static primal regularization `σ`.
    pub primal_reg: f64,
    /// Static regularization of equality rows.
    pub dual_reg: f64,
    /// Iterative-refinement passes against the unregularized system.
    pub refine_iters: usize,
}

impl Default for IpmSettings {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 100,
            scaling_iters: 10,
            primal_reg: 1e-10,
            dual_reg: 1e-10,
            refine_iters: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Row {
    Eq,
    Lower,
    Upper,
    Both,
    Free,
}

impl Row {
    fn has_lower(self) -> bool {
        matches!(self, Row::Lower | Row::Both)
    }

    fn has_upper(self) -> bool {
        matches!(self, Row::Upper | Row::Both)
    }
}

fn classify(lo: f64, hi: f64) -> Row {
    match (lo.is_finite(), hi.is_finite()) {
        (true, true) if hi - lo <= 1e-12 * (1.0 + lo.abs()) => Row::Eq,
        (true, true) => Row::Both,
        (true, false) => Row::Lower,
        (false, true) => Row::Upper,
        (false, false) => Row::Free,
    }
}

struct Ipm<'a> {
    problem: &'a QpProblem,
    st: &'a IpmSettings,
    s: Scaled,
    rows: Vec<Row>,
    n: usize,
    m: usize,
    factor: LdlFactor,
    kkt_diag: Vec<usize>,
    /// Current `E` of the constraint block, and the value the
    /// unregularized system would use.
    diag: Vec<f64>,
    diag_exact: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    sl: Vec<f64>,
    zl: Vec<f64>,
    su: Vec<f64>,
    zu: Vec<f64>,
    sides: usize,
    /// Separate primal and dual step lengths, valid when `P = 0`.
    separate_steps: bool,
}

struct Direction {
    dx: Vec<f64>,
    dy: Vec<f64>,
    dsl: Vec<f64>,
    dzl: Vec<f64>,
    dsu: Vec<f64>,
    dzu: Vec<f64>,
}

/// Solves `problem` to the relative tolerance of `settings`.
pub fn solve_ipm(problem: &QpProblem, settings: &IpmSettings) -> Result<QpSolution> {
    Ipm::new(problem, settings)?.run()
}

impl<'a> Ipm<'a> {
    fn new(problem: &'a QpProblem, st: &'a IpmSettings) -> Result<Self> {
        let n = problem.num_vars();
        let m = problem.num_constraints();
        let s = equilibrate(problem, st.scaling_iters);
        let rows: Vec<Row> = (0..m).map(|i| classify(s.l[i], s.u[i])).collect();
        let diag: Vec<f64> = rows
            .iter()
            .map(|r| match r {
                Row::Eq => st.dual_reg,
                Row::Free => FREE_ROW_DIAG,
                _ => 1.0,
            })
            .collect();
        let diag_exact = diag
            .iter()
            .zip(&rows)
            .map(|(&d, r)| if *r == Row::Eq { 0.0 } else { d })
            .collect();
        let rho: Vec<f64> = diag.iter().map(|d| 1.0 / d).collect();
        let (kkt, kkt_diag) = assemble_kkt(&s.p, &s.a, st.primal_reg, &rho);
        let mut factor = LdlFactor::new(&kkt)
            .map_err(|e| Error::Solver(format!("KKT factorization failed (P not PSD?): {e}")))?;
        if factor.negative_pivots() != m {
            return Err(Error::Solver(
                "P is not positive semidefinite (KKT inertia check failed)".into(),
            ));
        }
        let signs: Vec<f64> = (0..n + m).map(|i| if i < n { 1.0 } else { -1.0 }).collect();
        factor.set_dynamic_regularization(&signs, PIVOT_EPS, PIVOT_DELTA);
        let sides = rows
            .iter()
            .map(|r| r.has_lower() as usize + r.has_upper() as usize)
            .sum();
        Ok(Self {
            problem,
            st,
            s,
            rows,
            n,
            m,
            factor,
            kkt_diag,
            diag,
            diag_exact,
            x: vec![0.0; n],
            y: vec![0.0; m],
            sl: vec![0.0; m],
            zl: vec![0.0; m],
            su: vec![0.0; m],
            zu: vec![0.0; m],
            sides,
            separate_steps: problem.p.values.iter().all(|&v| v == 0.0),
        })
    }

    /// Multiplies the unregularized KKT matrix by `(x, y)`.
    fn kkt_mul(&self, x: &[f64], y: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let s = &self.s;
        let mut top = vec![0.0; self.n];
        s.p.sym_upper_mul_vec(x, &mut top);
        let mut aty = vec![0.0; self.n];
        s.a.tmul_vec(y, &mut aty);
        for j in 0..self.n {
            top[j] += aty[j];
        }
        let mut bot = vec![0.0; self.m];
        s.a.mul_vec(x, &mut bot);
        for i in 0..self.m {
            bot[i] -= self.diag_exact[i] * y[i];
        }
        (top, bot)
    }

    /// Solves the current KKT system with iterative refinement.
    fn kkt_solve(&self, rx: &[f64], ry: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (n, m) = (self.n, self.m);
        let mut sol: Vec<f64> = rx.iter().chain(ry).copied().collect();
        // blocks are judged separately; the constraint block can be far larger
        let scale_x = 1.0 + inf_norm(rx);
        let scale_y = 1.0 + inf_norm(ry);
        self.factor.solve(&mut sol);
        for _ in 0..self.st.refine_iters {
            let (top, bot) = self.kkt_mul(&sol[..n], &sol[n..]);
            let mut r: Vec<f64> = (0..n)
                .map(|j| rx[j] - top[j])
                .chain((0..m).map(|i| ry[i] - bot[i]))
                .collect();
            if inf_norm(&r[..n]) <= REFINE_TOL * scale_x && inf_norm(&r[n..]) <= REFINE_TOL * scale_y {
                break;
            }
            self.factor.solve(&mut r);
            for (v, d) in sol.iter_mut().zip(&r) {
                *v += d;
            }
        }
        let dy = sol.split_off(n);
        (sol, dy)
    }

    fn initialize(&mut self) -> Result<()> {
        let (n, m) = (self.n, self.m);
        let rx: Vec<f64> = self.s.q.iter().map(|v| -v).collect();
        let ry: Vec<f64> = (0..m)
            .map(|i| {
                let (lo, hi) = (self.s.l[i], self.s.u[i]);
                match self.rows[i] {
                    Row::Eq | Row::Lower => lo,
                    Row::Upper => hi,
                    Row::Both => 0.5 * (lo + hi),
                    Row::Free => 0.0,
                }
            })
            .collect();
        let (x, y) = self.kkt_solve(&rx, &ry);
        self.x = x;
        let mut ax = vec![0.0; m];
        self.s.a.mul_vec(&self.x, &mut ax);
        // least-squares slacks and multipliers, shifted into the interior
        let mut min_s = f64::INFINITY;
        let mut min_z = f64::INFINITY;
        for i in 0..m {
            let r = self.rows[i];
            if r.has_lower() {
                self.sl[i] = ax[i] - self.s.l[i];
                self.zl[i] = (-y[i]).max(0.0);
                min_s = min_s.min(self.sl[i]);
                min_z = min_z.min(self.zl[i]);
            }
            if r.has_upper() {
                self.su[i] = self.s.u[i] - ax[i];
                self.zu[i] = y[i].max(0.0);
                min_s = min_s.min(self.su[i]);
                min_z = min_z.min(self.zu[i]);
            }
        }
        if self.sides > 0 {
            let ds = (-1.5 * min_s).max(0.0);
            let dz = (-1.5 * min_z).max(0.0);
            let (mut sz, mut sum_s, mut sum_z) = (0.0, 0.0, 0.0);
            for i in 0..m {
                let r = self.rows[i];
                if r.has_lower() {
                    self.sl[i] += ds;
                    self.zl[i] += dz;
                }
                if r.has_upper() {
                    self.su[i] += ds;
                    self.zu[i] += dz;
                }
                sz += self.sl[i] * self.zl[i] + self.su[i] * self.zu[i];
                sum_s += self.sl[i] + self.su[i];
                sum_z += self.zl[i] + self.zu[i];
            }
            let (ds2, dz2) = if sz > 0.0 {
                (0.5 * sz / sum_z.max(f64::MIN_POSITIVE), 0.5 * sz / sum_s.max(f64::MIN_POSITIVE))
            } else {
                (1.0, 1.0)
            };
            for i in 0..m {
                let r = self.rows[i];
                if r.has_lower() {
                    self.sl[i] = (self.sl[i] + ds2).max(MIN_START);
                    self.zl[i] = (self.zl[i] + dz2).max(MIN_START);
                }
                if r.has_upper() {
                    self.su[i] = (self.su[i] + ds2).max(MIN_START);
                    self.zu[i] = (self.zu[i] + dz2).max(MIN_START);
                }
            }
        }
        for i in 0..m {
            self.y[i] = match self.rows[i] {
                Row::Eq => y[i],
                Row::Free => 0.0,
                _ => self.zu[i] - self.zl[i],
            };
        }
        debug_assert_eq!(self.x.len(), n);
        Ok(())
    }

    fn mu(&self) -> f64 {
        if self.sides == 0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..self.m {
            acc += self.sl[i] * self.zl[i] + self.su[i] * self.zu[i];
        }
        acc / self.sides as f64
    }

    /// Returns `(r_d, r_l, r_u, r_e)` with `r_e` stored in `r_l` for
    /// equality rows.
    fn residuals(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let s = &self.s;
        let mut rd = vec![0.0; self.n];
        s.p.sym_upper_mul_vec(&self.x, &mut rd);
        let mut aty = vec![0.0; self.n];
        s.a.tmul_vec(&self.y, &mut aty);
        for j in 0..self.n {
            rd[j] += s.q[j] + aty[j];
        }
        let mut ax = vec![0.0; self.m];
        s.a.mul_vec(&self.x, &mut ax);
        let mut rl = vec![0.0; self.m];
        let mut ru = vec![0.0; self.m];
        for i in 0..self.m {
            match self.rows[i] {
                Row::Eq => rl[i] = ax[i] - s.l[i],
                Row::Free => {}
                r => {
                    if r.has_lower() {
                        rl[i] = ax[i] - self.sl[i] - s.l[i];
                    }
                    if r.has_upper() {
                        ru[i] = ax[i] + self.su[i] - s.u[i];
                    }
                }
            }
        }
        (rd, rl, ru, ax)
    }

    /// Largest relative dual and primal residuals, row by row: each residual
    /// is measured against the magnitudes that form it.
    fn accuracy(&self, rd: &[f64], rl: &[f64], ru: &[f64], ax: &[f64]) -> (f64, f64) {
        let s = &self.s;
        let mut px = vec![0.0; self.n];
        s.p.sym_upper_mul_vec(&self.x, &mut px);
        let dual = (0..self.n)
            .map(|j| {
                // magnitude of the terms forming (Aᵀy)_j
                let aty: f64 = (s.a.colptr[j]..s.a.colptr[j + 1])
                    .map(|k| (s.a.values[k] * self.y[s.a.rowind[k]]).abs())
                    .sum();
                let scale = px[j].abs().max(s.q[j].abs()).max(aty);
                rd[j].abs() / (s.c * s.d[j] + scale)
            })
            .fold(0.0, f64::max);
        let prim = (0..self.m)
            .map(|i| rl[i].abs().max(ru[i].abs()) / (s.e[i] + ax[i].abs()))
            .fold(0.0, f64::max);
        (dual, prim)
    }

    /// Computes a Newton direction for complementarity targets `cl`, `cu`
    /// (the right-hand sides of `z ds + s dz = c`).
    fn direction(&self, rd: &[f64], rl: &[f64], ru: &[f64], cl: &[f64], cu: &[f64]) -> Direction {
        let m = self.m;
        let rx: Vec<f64> = rd.iter().map(|v| -v).collect();
        let mut ry = vec![0.0; m];
        for i in 0..m {
            let r = self.rows[i];
            match r {
                Row::Eq => ry[i] = -rl[i],
                Row::Free => {}
                _ => {
                    let mut g = 0.0;
                    let mut dsum = 0.0;
                    if r.has_lower() {
                        let dl = self.zl[i] / self.sl[i];
                        g += -cl[i] / self.sl[i] + dl * rl[i];
                        dsum += dl;
                    }
                    if r.has_upper() {
                        let du = self.zu[i] / self.su[i];
                        g += cu[i] / self.su[i] + du * ru[i];
                        dsum += du;
                    }
                    ry[i] = -g / dsum;
                }
            }
        }
        let (dx, dy) = self.kkt_solve(&rx, &ry);
        let mut adx = vec![0.0; m];
        self.s.a.mul_vec(&dx, &mut adx);
        let mut d = Direction {
            dx,
            dy,
            dsl: vec![0.0; m],
            dzl: vec![0.0; m],
            dsu: vec![0.0; m],
            dzu: vec![0.0; m],
        };
        for i in 0..m {
            let r = self.rows[i];
            if r.has_lower() {
                d.dsl[i] = adx[i] + rl[i];
                d.dzl[i] = (cl[i] - self.zl[i] * d.dsl[i]) / self.sl[i];
            }
            if r.has_upper() {
                d.dsu[i] = -ru[i] - adx[i];
                d.dzu[i] = (cu[i] - self.zu[i] * d.dsu[i]) / self.su[i];
            }
        }
        d
    }

    /// Largest steps in `[0, 1]` keeping slacks and multipliers
    /// non-negative, as `(primal, dual)`.
    fn max_steps(&self, d: &Direction) -> (f64, f64) {
        let limit = |a: f64, v: f64, dv: f64| if dv < 0.0 { a.min(-v / dv) } else { a };
        let (mut ap, mut ad) = (1.0f64, 1.0f64);
        for i in 0..self.m {
            let r = self.rows[i];
            if r.has_lower() {
                ap = limit(ap, self.sl[i], d.dsl[i]);
                ad = limit(ad, self.zl[i], d.dzl[i]);
            }
            if r.has_upper() {
                ap = limit(ap, self.su[i], d.dsu[i]);
                ad = limit(ad, self.zu[i], d.dzu[i]);
            }
        }
        (ap, ad)
    }

    fn refactor(&mut self) -> Result<()> {
        for i in 0..self.m {
            let r = self.rows[i];
            if matches!(r, Row::Eq | Row::Free) {
                continue;
            }
            let mut dsum = 0.0;
            if r.has_lower() {
                dsum += self.zl[i] / self.sl[i];
            }
            if r.has_upper() {
                dsum += self.zu[i] / self.su[i];
            }
            let e = (1.0 / dsum).clamp(MIN_DIAG, MAX_DIAG);
            self.diag[i] = e;
            self.diag_exact[i] = e;
        }
        let vals: Vec<f64> = self.diag.iter().map(|d| -d).collect();
        self.factor.update_values(&self.kkt_diag, &vals)
    }

    fn run(mut self) -> Result<QpSolution> {
        self.initialize()?;
        let m = self.m;
        let mut status = QpStatus::MaxIterations;
        let mut iter = 0;
        let mut stalled = false;
        let mut best = (f64::INFINITY, self.snapshot());
        while iter < self.st.max_iter {
            let (rd, rl, ru, ax) = self.residuals();
            let mu = self.mu();
            let (dual, prim) = self.accuracy(&rd, &rl, &ru, &ax);
            let merit = mu.max(dual).max(prim);
            if merit < best.0 {
                best = (merit, self.snapshot());
            }
            if mu <= self.st.tol && dual <= self.st.tol && prim <= self.st.tol {
                status = QpStatus::Solved;
                break;
            }
            if stalled {
                break;
            }
            let zmax = self.zl.iter().chain(&self.zu).fold(0.0f64, |a, &b| a.max(b));
            if zmax > DIVERGENCE {
                status = QpStatus::Infeasible;
                break;
            }
            if inf_norm(&self.x) > DIVERGENCE {
                status = QpStatus::Unbounded;
                break;
            }
            iter += 1;
            self.refactor()?;

            // predictor
            let cl: Vec<f64> = (0..m).map(|i| -self.sl[i] * self.zl[i]).collect();
            let cu: Vec<f64> = (0..m).map(|i| -self.su[i] * self.zu[i]).collect();
            let aff = self.direction(&rd, &rl, &ru, &cl, &cu);
            let (ap, ad) = self.max_steps(&aff);
            let mut mu_aff = 0.0;
            for i in 0..m {
                mu_aff += (self.sl[i] + ap * aff.dsl[i]) * (self.zl[i] + ad * aff.dzl[i])
                    + (self.su[i] + ap * aff.dsu[i]) * (self.zu[i] + ad * aff.dzu[i]);
            }
            let sigma = if self.sides > 0 && mu > 0.0 {
                (mu_aff / self.sides as f64 / mu).clamp(0.0, 1.0).powi(3)
            } else {
                0.0
            };

            // corrector
            let target = sigma * mu;
            let cl: Vec<f64> = (0..m)
                .map(|i| {
                    if self.rows[i].has_lower() {
                        -self.sl[i] * self.zl[i] - aff.dsl[i] * aff.dzl[i] + target
                    } else {
                        0.0
                    }
                })
                .collect();
            let cu: Vec<f64> = (0..m)
                .map(|i| {
                    if self.rows[i].has_upper() {
                        -self.su[i] * self.zu[i] - aff.dsu[i] * aff.dzu[i] + target
                    } else {
                        0.0
                    }
                })
                .collect();
            let d = self.direction(&rd, &rl, &ru, &cl, &cu);
            let (ap, ad) = self.max_steps(&d);
            let (ap, ad) = if self.separate_steps {
                (STEP_FRACTION * ap, STEP_FRACTION * ad)
            } else {
                let a = STEP_FRACTION * ap.min(ad);
                (a, a)
            };
            stalled = ap.min(ad) < STALL_STEP;

            for j in 0..self.n {
                self.x[j] += ap * d.dx[j];
            }
            for i in 0..m {
                let r = self.rows[i];
                if r.has_lower() {
                    self.sl[i] += ap * d.dsl[i];
                    self.zl[i] += ad * d.dzl[i];
                }
                if r.has_upper() {
                    self.su[i] += ap * d.dsu[i];
                    self.zu[i] += ad * d.dzu[i];
                }
                self.y[i] = match r {
                    Row::Eq => self.y[i] + ad * d.dy[i],
                    Row::Free => 0.0,
                    _ => self.zu[i] - self.zl[i],
                };
            }
        }
        if status == QpStatus::MaxIterations && best.0 <= STALL_TOL {
            // progress stopped short of the tolerance in floating point
            self.restore(best.1);
            status = QpStatus::Solved;
        }
        Ok(self.finish(status, iter))
    }

    fn snapshot(&self) -> [Vec<f64>; 6] {
        [
            self.x.clone(),
            self.y.clone(),
            self.sl.clone(),
            self.zl.clone(),
            self.su.clone(),
            self.zu.clone(),
        ]
    }

    fn restore(&mut self, [x, y, sl, zl, su, zu]: [Vec<f64>; 6]) {
        self.x = x;
        self.y = y;
        self.sl = sl;
        self.zl = zl;
        self.su = su;
        self.zu = zu;
    }

    fn finish(&self, status: QpStatus, iterations: usize) -> QpSolution {
        let s = &self.s;
        let x: Vec<f64> = (0..self.n).map(|j| s.d[j] * self.x[j]).collect();
        let y: Vec<f64> = (0..self.m).map(|i| s.e[i] * self.y[i] / s.c).collect();
        let res = super::kkt_residuals(self.problem, &x, &y).expect("dimensions match");
        QpSolution {
            objective: self.problem.objective(&x),
            x,
            y,
            primal_residual: res.primal,
            dual_residual: res.dual,
            iterations,
            status,
            polished: false,
        }
    }
}
