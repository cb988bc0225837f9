use super::ldl::LdlFactor;
use super::sparse::{inf_norm, CscMatrix};
use super::{QpProblem, QpSolution, QpStatus};
use crate::error::{Error, Result};

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;
const RHO_EQ_TOL: f64 = 1e-4;
const MIN_SCALING: f64 = 1e-4;
const MAX_SCALING: f64 = 1e4;

#[derive(Debug, Clone)]
pub struct Settings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_prim_inf: f64,
    pub eps_dual_inf: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub adaptive_rho_interval: usize,
    pub adaptive_rho_tolerance: f64,
    pub scaling_iters: usize,
    pub polish: bool,
    pub polish_refine_iters: usize,
    /// Iterations between termination checks.
    pub check_interval: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            eps_abs: 1e-6,
            eps_rel: 0.0,
            eps_prim_inf: 1e-6,
            eps_dual_inf: 1e-6,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            adaptive_rho_interval: 25,
            adaptive_rho_tolerance: 5.0,
            scaling_iters: 10,
            polish: true,
            polish_refine_iters: 5,
            check_interval: 1,
        }
    }
}

impl Settings {
    pub fn with_tolerances(eps_abs: f64, eps_rel: f64) -> Self {
        Self {
            eps_abs,
            eps_rel,
            ..Self::default()
        }
    }
}

/// Solves `problem` from a cold start.
pub fn solve(problem: &QpProblem, settings: &Settings) -> Result<QpSolution> {
    solve_warm(problem, settings, None, None)
}

/// Solves `problem`, optionally warm-started from a primal and dual guess.
pub fn solve_warm(
    problem: &QpProblem,
    settings: &Settings,
    x0: Option<&[f64]>,
    y0: Option<&[f64]>,
) -> Result<QpSolution> {
    let mut w = Workspace::new(problem, settings)?;
    if let Some(x0) = x0 {
        w.warm_start_x(x0)?;
    }
    if let Some(y0) = y0 {
        w.warm_start_y(y0)?;
    }
    w.run()
}

/// Equilibrated problem data with the scaling that produced it.
pub(super) struct Scaled {
    pub(super) p: CscMatrix,
    pub(super) q: Vec<f64>,
    pub(super) a: CscMatrix,
    pub(super) l: Vec<f64>,
    pub(super) u: Vec<f64>,
    pub(super) d: Vec<f64>,
    pub(super) e: Vec<f64>,
    pub(super) c: f64,
}

fn limit_scaling(v: f64) -> f64 {
    if v < MIN_SCALING {
        1.0
    } else {
        v.min(MAX_SCALING)
    }
}

pub(super) fn equilibrate(problem: &QpProblem, iters: usize) -> Scaled {
    let n = problem.num_vars();
    let m = problem.num_constraints();
    let mut p = problem.p.clone();
    let mut a = problem.a.clone();
    let mut q = problem.q.clone();
    let mut d = vec![1.0; n];
    let mut e = vec![1.0; m];
    let mut c = 1.0;
    for _ in 0..iters {
        let pn = p.sym_upper_col_inf_norms();
        let an = a.col_inf_norms();
        let dd: Vec<f64> = (0..n)
            .map(|j| 1.0 / limit_scaling(pn[j].max(an[j])).sqrt())
            .collect();
        let rn = a.row_inf_norms();
        let de: Vec<f64> = rn.iter().map(|&v| 1.0 / limit_scaling(v).sqrt()).collect();
        p.scale(&dd, &dd);
        a.scale(&de, &dd);
        for j in 0..n {
            q[j] *= dd[j];
            d[j] *= dd[j];
        }
        for i in 0..m {
            e[i] *= de[i];
        }
        let pn = p.sym_upper_col_inf_norms();
        let mean = if n > 0 {
            pn.iter().sum::<f64>() / n as f64
        } else {
            0.0
        };
        let cost = limit_scaling(mean.max(inf_norm(&q)));
        let ct = 1.0 / cost;
        p.values.iter_mut().for_each(|v| *v *= ct);
        q.iter_mut().for_each(|v| *v *= ct);
        c *= ct;
    }
    let l = problem.l.iter().zip(&e).map(|(v, s)| v * s).collect();
    let u = problem.u.iter().zip(&e).map(|(v, s)| v * s).collect();
    Scaled {
        p,
        q,
        a,
        l,
        u,
        d,
        e,
        c,
    }
}

fn row_rho(lo: f64, hi: f64, rho: f64) -> f64 {
    if lo == f64::NEG_INFINITY && hi == f64::INFINITY {
        RHO_MIN
    } else if hi - lo < RHO_EQ_TOL {
        (RHO_EQ_FACTOR * rho).min(RHO_MAX)
    } else {
        rho
    }
}

/// Upper triangle of `[P + σI, Aᵀ; A, -diag(1/ρ)]` and the storage index of
/// every constraint-block diagonal.
pub(super) fn assemble_kkt(p: &CscMatrix, a: &CscMatrix, sigma: f64, rho: &[f64]) -> (CscMatrix, Vec<usize>) {
    let n = p.ncols;
    let m = a.nrows;
    let mut trip = Vec::with_capacity(p.nnz() + a.nnz() + n + m);
    for c in 0..n {
        for k in p.colptr[c]..p.colptr[c + 1] {
            trip.push((p.rowind[k], c, p.values[k]));
        }
        trip.push((c, c, sigma));
    }
    for c in 0..n {
        for k in a.colptr[c]..a.colptr[c + 1] {
            trip.push((c, n + a.rowind[k], a.values[k]));
        }
    }
    for (i, r) in rho.iter().enumerate() {
        trip.push((n + i, n + i, -1.0 / r));
    }
    let kkt = CscMatrix::from_triplets(n + m, n + m, &trip).expect("kkt indices in range");
    let diag_idx = (0..m)
        .map(|i| {
            let col = n + i;
            let e = kkt.colptr[col + 1];
            debug_assert_eq!(kkt.rowind[e - 1], col);
            e - 1
        })
        .collect();
    (kkt, diag_idx)
}

struct Workspace<'a> {
    problem: &'a QpProblem,
    settings: &'a Settings,
    s: Scaled,
    n: usize,
    m: usize,
    rho: f64,
    rho_vec: Vec<f64>,
    kkt_diag: Vec<usize>,
    factor: LdlFactor,
    x: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
}

struct Residuals {
    prim: f64,
    dual: f64,
    prim_scale: f64,
    dual_scale: f64,
    // scaled-space quantities for adaptive rho
    prim_s: f64,
    dual_s: f64,
    prim_scale_s: f64,
    dual_scale_s: f64,
}

impl<'a> Workspace<'a> {
    fn new(problem: &'a QpProblem, settings: &'a Settings) -> Result<Self> {
        let n = problem.num_vars();
        let m = problem.num_constraints();
        let s = equilibrate(problem, settings.scaling_iters);
        let rho = settings.rho.clamp(RHO_MIN, RHO_MAX);
        let rho_vec: Vec<f64> = (0..m).map(|i| row_rho(s.l[i], s.u[i], rho)).collect();
        let (kkt, kkt_diag) = assemble_kkt(&s.p, &s.a, settings.sigma, &rho_vec);
        let factor = LdlFactor::new(&kkt).map_err(|e| {
            Error::Solver(format!("KKT factorization failed (P not PSD?): {e}"))
        })?;
        if factor.negative_pivots() != m {
            return Err(Error::Solver(
                "P is not positive semidefinite (KKT inertia check failed)".into(),
            ));
        }
        Ok(Self {
            problem,
            settings,
            s,
            n,
            m,
            rho,
            rho_vec,
            kkt_diag,
            factor,
            x: vec![0.0; n],
            z: vec![0.0; m],
            y: vec![0.0; m],
        })
    }

    fn warm_start_x(&mut self, x0: &[f64]) -> Result<()> {
        if x0.len() != self.n {
            return Err(Error::Dimension("warm start x has wrong length".into()));
        }
        for j in 0..self.n {
            self.x[j] = x0[j] / self.s.d[j];
        }
        let mut ax = vec![0.0; self.m];
        self.s.a.mul_vec(&self.x, &mut ax);
        for i in 0..self.m {
            self.z[i] = ax[i].clamp(self.s.l[i], self.s.u[i]);
        }
        Ok(())
    }

    fn warm_start_y(&mut self, y0: &[f64]) -> Result<()> {
        if y0.len() != self.m {
            return Err(Error::Dimension("warm start y has wrong length".into()));
        }
        for i in 0..self.m {
            self.y[i] = y0[i] * self.s.c / self.s.e[i];
        }
        Ok(())
    }

    fn set_rho(&mut self, rho: f64) -> Result<()> {
        self.rho = rho.clamp(RHO_MIN, RHO_MAX);
        for i in 0..self.m {
            self.rho_vec[i] = row_rho(self.s.l[i], self.s.u[i], self.rho);
        }
        let vals: Vec<f64> = self.rho_vec.iter().map(|r| -1.0 / r).collect();
        self.factor.update_values(&self.kkt_diag, &vals)
    }

    fn residuals(&self, x: &[f64], z: &[f64], y: &[f64]) -> Residuals {
        let (n, m) = (self.n, self.m);
        let s = &self.s;
        let mut ax = vec![0.0; m];
        s.a.mul_vec(x, &mut ax);
        let mut px = vec![0.0; n];
        s.p.sym_upper_mul_vec(x, &mut px);
        let mut aty = vec![0.0; n];
        s.a.tmul_vec(y, &mut aty);

        let mut prim = 0.0f64;
        let mut prim_s = 0.0f64;
        let mut ax_n = 0.0f64;
        let mut z_n = 0.0f64;
        let mut ax_ns = 0.0f64;
        let mut z_ns = 0.0f64;
        for i in 0..m {
            let einv = 1.0 / s.e[i];
            prim = prim.max(((ax[i] - z[i]) * einv).abs());
            prim_s = prim_s.max((ax[i] - z[i]).abs());
            ax_n = ax_n.max((ax[i] * einv).abs());
            z_n = z_n.max((z[i] * einv).abs());
            ax_ns = ax_ns.max(ax[i].abs());
            z_ns = z_ns.max(z[i].abs());
        }
        let cinv = 1.0 / s.c;
        let mut dual = 0.0f64;
        let mut dual_s = 0.0f64;
        let (mut px_n, mut aty_n, mut q_n) = (0.0f64, 0.0f64, 0.0f64);
        let (mut px_ns, mut aty_ns, mut q_ns) = (0.0f64, 0.0f64, 0.0f64);
        for j in 0..n {
            let dinv = 1.0 / s.d[j];
            let r = px[j] + s.q[j] + aty[j];
            dual = dual.max((r * dinv * cinv).abs());
            dual_s = dual_s.max(r.abs());
            px_n = px_n.max((px[j] * dinv * cinv).abs());
            aty_n = aty_n.max((aty[j] * dinv * cinv).abs());
            q_n = q_n.max((s.q[j] * dinv * cinv).abs());
            px_ns = px_ns.max(px[j].abs());
            aty_ns = aty_ns.max(aty[j].abs());
            q_ns = q_ns.max(s.q[j].abs());
        }
        Residuals {
            prim,
            dual,
            prim_scale: ax_n.max(z_n),
            dual_scale: px_n.max(aty_n).max(q_n),
            prim_s,
            dual_s,
            prim_scale_s: ax_ns.max(z_ns),
            dual_scale_s: px_ns.max(aty_ns).max(q_ns),
        }
    }

    fn converged(&self, r: &Residuals) -> bool {
        let st = self.settings;
        r.prim <= st.eps_abs + st.eps_rel * r.prim_scale
            && r.dual <= st.eps_abs + st.eps_rel * r.dual_scale
    }

    fn primal_infeasible(&self, dy: &[f64]) -> bool {
        let s = &self.s;
        let eps = self.settings.eps_prim_inf;
        // work in the original space: δy = E δȳ / c
        let dy_u: Vec<f64> = (0..self.m).map(|i| s.e[i] * dy[i] / s.c).collect();
        let norm = inf_norm(&dy_u);
        if norm < 1e-12 {
            return false;
        }
        let mut support = 0.0;
        for i in 0..self.m {
            let v = dy_u[i];
            if v > 0.0 {
                if self.problem.u[i].is_infinite() {
                    if v > eps * norm {
                        return false;
                    }
                } else {
                    support += self.problem.u[i] * v;
                }
            } else if v < 0.0 {
                if self.problem.l[i].is_infinite() {
                    if -v > eps * norm {
                        return false;
                    }
                } else {
                    support += self.problem.l[i] * v;
                }
            }
        }
        if support >= -eps * norm {
            return false;
        }
        let mut aty = vec![0.0; self.n];
        self.problem.a.tmul_vec(&dy_u, &mut aty);
        inf_norm(&aty) <= eps * norm
    }

    fn dual_infeasible(&self, dx: &[f64]) -> bool {
        let s = &self.s;
        let eps = self.settings.eps_dual_inf;
        let dx_u: Vec<f64> = (0..self.n).map(|j| s.d[j] * dx[j]).collect();
        let norm = inf_norm(&dx_u);
        if norm < 1e-12 {
            return false;
        }
        let qdx: f64 = self.problem.q.iter().zip(&dx_u).map(|(a, b)| a * b).sum();
        if qdx >= -eps * norm {
            return false;
        }
        let mut pdx = vec![0.0; self.n];
        self.problem.p.sym_upper_mul_vec(&dx_u, &mut pdx);
        if inf_norm(&pdx) > eps * norm {
            return false;
        }
        let mut adx = vec![0.0; self.m];
        self.problem.a.mul_vec(&dx_u, &mut adx);
        for i in 0..self.m {
            let lo_ok = self.problem.l[i].is_infinite() || adx[i] >= -eps * norm;
            let hi_ok = self.problem.u[i].is_infinite() || adx[i] <= eps * norm;
            if !(lo_ok && hi_ok) {
                return false;
            }
        }
        true
    }

    fn run(mut self) -> Result<QpSolution> {
        let (n, m) = (self.n, self.m);
        let st = self.settings;
        let sigma = st.sigma;
        let alpha = st.alpha;
        let mut rhs = vec![0.0; n + m];
        let mut x_prev = vec![0.0; n];
        let mut y_prev = vec![0.0; m];
        let mut status = QpStatus::MaxIterations;
        let mut iterations = 0;

        if m == 0 && n == 0 {
            return Ok(self.finish(QpStatus::Solved, 0));
        }

        for iter in 1..=st.max_iter {
            iterations = iter;
            x_prev.copy_from_slice(&self.x);
            y_prev.copy_from_slice(&self.y);
            for j in 0..n {
                rhs[j] = sigma * self.x[j] - self.s.q[j];
            }
            for i in 0..m {
                rhs[n + i] = self.z[i] - self.y[i] / self.rho_vec[i];
            }
            self.factor.solve(&mut rhs);
            for j in 0..n {
                self.x[j] = alpha * rhs[j] + (1.0 - alpha) * x_prev[j];
            }
            for i in 0..m {
                let zt = self.z[i] + (rhs[n + i] - self.y[i]) / self.rho_vec[i];
                let zr = alpha * zt + (1.0 - alpha) * self.z[i];
                let z_new = (zr + self.y[i] / self.rho_vec[i]).clamp(self.s.l[i], self.s.u[i]);
                self.y[i] += self.rho_vec[i] * (zr - z_new);
                self.z[i] = z_new;
            }

            let check = iter % st.check_interval.max(1) == 0 || iter == st.max_iter;
            let adapt = st.adaptive_rho && iter % st.adaptive_rho_interval.max(1) == 0;
            if !(check || adapt) {
                continue;
            }
            let r = self.residuals(&self.x, &self.z, &self.y);
            if check {
                if self.converged(&r) {
                    status = QpStatus::Solved;
                    break;
                }
                let dy: Vec<f64> = (0..m).map(|i| self.y[i] - y_prev[i]).collect();
                if self.primal_infeasible(&dy) {
                    status = QpStatus::Infeasible;
                    break;
                }
                let dx: Vec<f64> = (0..n).map(|j| self.x[j] - x_prev[j]).collect();
                if self.dual_infeasible(&dx) {
                    status = QpStatus::Unbounded;
                    break;
                }
            }
            if adapt {
                let num = r.prim_s / (r.prim_scale_s + 1e-30);
                let den = r.dual_s / (r.dual_scale_s + 1e-30);
                if num > 0.0 && den > 0.0 {
                    let new_rho = (self.rho * (num / den).sqrt()).clamp(RHO_MIN, RHO_MAX);
                    let ratio = new_rho / self.rho;
                    if ratio > st.adaptive_rho_tolerance || ratio < 1.0 / st.adaptive_rho_tolerance {
                        self.set_rho(new_rho)?;
                    }
                }
            }
        }

        let mut polished = false;
        if st.polish && matches!(status, QpStatus::Solved | QpStatus::MaxIterations) {
            polished = self.polish()?;
            if polished {
                status = QpStatus::Solved;
            }
        }
        let mut sol = self.finish(status, iterations);
        sol.polished = polished;
        Ok(sol)
    }

    /// Attempts to refine the iterate by solving the KKT system of the
    /// active set guessed from the ADMM iterate. Returns true when the
    /// refined point is accepted.
    fn polish(&mut self) -> Result<bool> {
        let (n, m) = (self.n, self.m);
        let mut active = Vec::new();
        let mut bound = Vec::new();
        let mut side = Vec::new(); // -1 lower, +1 upper
        for i in 0..m {
            let (lo, hi) = (self.s.l[i], self.s.u[i]);
            if self.z[i] - lo < -self.y[i] {
                active.push(i);
                bound.push(lo);
                side.push(-1.0);
            } else if hi - self.z[i] < self.y[i] {
                active.push(i);
                bound.push(hi);
                side.push(1.0);
            }
        }
        let na = active.len();
        let a_red = self.s.a.select_rows(&active);
        let delta = 1e-7;
        let build = |reg: f64| -> CscMatrix {
            let mut trip = Vec::new();
            for c in 0..n {
                for k in self.s.p.colptr[c]..self.s.p.colptr[c + 1] {
                    trip.push((self.s.p.rowind[k], c, self.s.p.values[k]));
                }
                trip.push((c, c, reg));
            }
            for c in 0..n {
                for k in a_red.colptr[c]..a_red.colptr[c + 1] {
                    trip.push((c, n + a_red.rowind[k], a_red.values[k]));
                }
            }
            for i in 0..na {
                trip.push((n + i, n + i, -reg));
            }
            CscMatrix::from_triplets(n + na, n + na, &trip).expect("indices in range")
        };
        let k_reg = build(delta);
        let factor = match LdlFactor::new(&k_reg) {
            Ok(f) => f,
            Err(_) => return Ok(false),
        };
        let k_true = build(0.0);
        let mut rhs = vec![0.0; n + na];
        for j in 0..n {
            rhs[j] = -self.s.q[j];
        }
        rhs[n..].copy_from_slice(&bound);
        let mut sol = rhs.clone();
        factor.solve(&mut sol);
        let mut ks = vec![0.0; n + na];
        for _ in 0..self.settings.polish_refine_iters {
            k_true.sym_upper_mul_vec(&sol, &mut ks);
            let mut r: Vec<f64> = (0..n + na).map(|i| rhs[i] - ks[i]).collect();
            factor.solve(&mut r);
            for i in 0..n + na {
                sol[i] += r[i];
            }
        }
        if sol.iter().any(|v| !v.is_finite()) {
            return Ok(false);
        }
        let x_pol = sol[..n].to_vec();
        let mut y_pol = vec![0.0; m];
        for (k, &i) in active.iter().enumerate() {
            y_pol[i] = sol[n + k];
        }
        // multiplier signs must match the side of the active bound
        let ysc = inf_norm(&y_pol).max(1.0);
        for (k, &i) in active.iter().enumerate() {
            let eq = self.s.u[i] - self.s.l[i] < RHO_EQ_TOL;
            if !eq && side[k] * y_pol[i] < -1e-9 * ysc {
                return Ok(false);
            }
        }
        let mut ax = vec![0.0; m];
        self.s.a.mul_vec(&x_pol, &mut ax);
        let z_pol: Vec<f64> = (0..m).map(|i| ax[i].clamp(self.s.l[i], self.s.u[i])).collect();
        let r_pol = self.residuals(&x_pol, &z_pol, &y_pol);
        let r_admm = self.residuals(&self.x, &self.z, &self.y);
        let tol_ok = self.converged(&r_pol);
        let better = r_pol.prim <= r_admm.prim.max(1e-10) && r_pol.dual <= r_admm.dual.max(1e-10);
        if tol_ok || better {
            self.x = x_pol;
            self.z = z_pol;
            self.y = y_pol;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    fn finish(&self, status: QpStatus, iterations: usize) -> QpSolution {
        let s = &self.s;
        let x: Vec<f64> = (0..self.n).map(|j| s.d[j] * self.x[j]).collect();
        let y: Vec<f64> = (0..self.m).map(|i| s.e[i] * self.y[i] / s.c).collect();
        let res = super::kkt_residuals(self.problem, &x, &y).expect("dimensions match");
        let st = self.settings;
        let mut status = status;
        if status == QpStatus::Solved {
            // report on the original problem; a polished or converged
            // iterate must meet the absolute contract as well
            let r = self.residuals(&self.x, &self.z, &self.y);
            if !(self.converged(&r)
                || (res.primal <= st.eps_abs && res.dual <= st.eps_abs))
            {
                status = QpStatus::MaxIterations;
            }
        }
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
