//! Sparse LDLᵀ factorization for quasi-definite matrices.
//!
//! The symmetric input is given by its upper triangle. A fill-reducing
//! ordering is computed once with approximate minimum degree; numeric
//! refactorization reuses the symbolic analysis, so changing penalty
//! parameters on the diagonal only costs the numeric pass.

use super::sparse::CscMatrix;
use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    perm: Vec<usize>,
    pinv: Vec<usize>,
    /// Permuted upper triangle.
    c: CscMatrix,
    /// Position in `c.values` of every entry of the original upper triangle.
    map: Vec<usize>,
    etree: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    /// Expected pivot signs in permuted order, with the threshold below
    /// which a pivot is replaced by `sign · delta`.
    dynamic_reg: Option<(Vec<f64>, f64, f64)>,
}

impl LdlFactor {
    /// Analyses and factors the symmetric matrix whose upper triangle is `upper`.
    pub fn new(upper: &CscMatrix) -> Result<Self> {
        if !upper.is_square() {
            return Err(Error::Dimension("LDL input must be square".into()));
        }
        let n = upper.ncols;
        let (perm, pinv) = if n == 0 {
            (Vec::new(), Vec::new())
        } else {
            let control = amd::Control::default();
            let (p, pi, _info) = amd::order(n, &upper.colptr, &upper.rowind, &control)
                .map_err(|s| Error::Solver(format!("ordering failed: {s:?}")))?;
            (p, pi)
        };
        let (c, map) = permute_upper(upper, &pinv)?;
        let (etree, lnz) = elimination_tree(&c)?;
        let mut lp = vec![0usize; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        let nnz_l = lp[n];
        let mut f = Self {
            n,
            perm,
            pinv,
            c,
            map,
            etree,
            lp,
            li: vec![0; nnz_l],
            lx: vec![0.0; nnz_l],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            dynamic_reg: None,
        };
        f.factor()?;
        Ok(f)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz_l(&self) -> usize {
        self.lp[self.n]
    }

    /// Overwrites entries of the original upper triangle (addressed by their
    /// storage index) and refactors.
    pub fn update_values(&mut self, entries: &[usize], values: &[f64]) -> Result<()> {
        for (&k, &v) in entries.iter().zip(values) {
            self.c.values[self.map[k]] = v;
        }
        self.factor()
    }

    /// Enables dynamic regularization: a pivot whose product with the
    /// expected sign (given per original index) falls below `eps` becomes
    /// `sign · delta`. Takes effect from the next factorization.
    pub fn set_dynamic_regularization(&mut self, signs: &[f64], eps: f64, delta: f64) {
        let permuted = self.perm.iter().map(|&i| signs[i]).collect();
        self.dynamic_reg = Some((permuted, eps, delta));
    }

    /// Number of negative pivots, i.e. the negative inertia of the matrix.
    pub fn negative_pivots(&self) -> usize {
        self.d.iter().filter(|&&d| d < 0.0).count()
    }

    fn factor(&mut self) -> Result<()> {
        let n = self.n;
        if n == 0 {
            return Ok(());
        }
        let ap = &self.c.colptr;
        let ai = &self.c.rowind;
        let ax = &self.c.values;
        let mut y_vals = vec![0.0; n];
        let mut y_used = vec![false; n];
        let mut y_idx = vec![0usize; n];
        let mut elim = vec![0usize; n];
        let mut next_space: Vec<usize> = self.lp[..n].to_vec();

        for k in 0..n {
            let mut nnz_y = 0;
            self.d[k] = 0.0;
            for p in ap[k]..ap[k + 1] {
                let bidx = ai[p];
                if bidx == k {
                    self.d[k] = ax[p];
                    continue;
                }
                y_vals[bidx] = ax[p];
                if !y_used[bidx] {
                    y_used[bidx] = true;
                    elim[0] = bidx;
                    let mut nnz_e = 1;
                    let mut next = self.etree[bidx];
                    while next != NONE && next < k {
                        if y_used[next] {
                            break;
                        }
                        y_used[next] = true;
                        elim[nnz_e] = next;
                        nnz_e += 1;
                        next = self.etree[next];
                    }
                    while nnz_e > 0 {
                        nnz_e -= 1;
                        y_idx[nnz_y] = elim[nnz_e];
                        nnz_y += 1;
                    }
                }
            }
            for i in (0..nnz_y).rev() {
                let cidx = y_idx[i];
                let tmp = next_space[cidx];
                let yc = y_vals[cidx];
                for j in self.lp[cidx]..tmp {
                    y_vals[self.li[j]] -= self.lx[j] * yc;
                }
                self.li[tmp] = k;
                self.lx[tmp] = yc * self.dinv[cidx];
                self.d[k] -= yc * self.lx[tmp];
                next_space[cidx] += 1;
                y_vals[cidx] = 0.0;
                y_used[cidx] = false;
            }
            if let Some((signs, eps, delta)) = &self.dynamic_reg {
                if self.d[k] * signs[k] <= *eps {
                    self.d[k] = signs[k] * delta;
                }
            }
            if self.d[k] == 0.0 || !self.d[k].is_finite() {
                return Err(Error::Solver(format!(
                    "zero or non-finite pivot at position {k}"
                )));
            }
            self.dinv[k] = 1.0 / self.d[k];
        }
        Ok(())
    }

    /// Solves `K x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        let mut x: Vec<f64> = (0..n).map(|i| b[self.perm[i]]).collect();
        for i in 0..n {
            let xi = x[i];
            if xi != 0.0 {
                for j in self.lp[i]..self.lp[i + 1] {
                    x[self.li[j]] -= self.lx[j] * xi;
                }
            }
        }
        for i in 0..n {
            x[i] *= self.dinv[i];
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                acc -= self.lx[j] * x[self.li[j]];
            }
            x[i] = acc;
        }
        for i in 0..n {
            b[self.perm[i]] = x[i];
        }
        debug_assert_eq!(self.pinv.len(), n);
    }
}

fn permute_upper(a: &CscMatrix, pinv: &[usize]) -> Result<(CscMatrix, Vec<usize>)> {
    let n = a.ncols;
    let mut counts = vec![0usize; n + 1];
    for c in 0..n {
        for k in a.colptr[c]..a.colptr[c + 1] {
            let r = a.rowind[k];
            if r > c {
                return Err(Error::Solver("LDL input is not upper triangular".into()));
            }
            let col = pinv[r].max(pinv[c]);
            counts[col + 1] += 1;
        }
    }
    for c in 0..n {
        counts[c + 1] += counts[c];
    }
    let mut next = counts.clone();
    let mut rowind = vec![0usize; a.nnz()];
    let mut values = vec![0.0; a.nnz()];
    let mut origin = vec![0usize; a.nnz()];
    for c in 0..n {
        for k in a.colptr[c]..a.colptr[c + 1] {
            let r = a.rowind[k];
            let (nr, nc) = {
                let (x, y) = (pinv[r], pinv[c]);
                (x.min(y), x.max(y))
            };
            let dst = next[nc];
            rowind[dst] = nr;
            values[dst] = a.values[k];
            origin[dst] = k;
            next[nc] += 1;
        }
    }
    // sort each column by row index, carrying the origin map along
    let mut map = vec![0usize; a.nnz()];
    let mut buf: Vec<(usize, f64, usize)> = Vec::new();
    for c in 0..n {
        let (s, e) = (counts[c], counts[c + 1]);
        buf.clear();
        buf.extend((s..e).map(|k| (rowind[k], values[k], origin[k])));
        buf.sort_by_key(|t| t.0);
        for (off, &(r, v, o)) in buf.iter().enumerate() {
            rowind[s + off] = r;
            values[s + off] = v;
            map[o] = s + off;
        }
    }
    Ok((
        CscMatrix {
            nrows: n,
            ncols: n,
            colptr: counts,
            rowind,
            values,
        },
        map,
    ))
}

fn elimination_tree(c: &CscMatrix) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = c.ncols;
    let mut work = vec![NONE; n];
    let mut lnz = vec![0usize; n];
    let mut etree = vec![NONE; n];
    for j in 0..n {
        work[j] = j;
        for p in c.colptr[j]..c.colptr[j + 1] {
            let mut i = c.rowind[p];
            if i > j {
                return Err(Error::Solver("permuted matrix is not upper triangular".into()));
            }
            while work[i] != j {
                if etree[i] == NONE {
                    etree[i] = j;
                }
                lnz[i] += 1;
                work[i] = j;
                i = etree[i];
            }
        }
    }
    Ok((etree, lnz))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_mul(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        a.iter()
            .map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum())
            .collect()
    }

    #[test]
    fn solves_quasi_definite_system() {
        // [P + σI  Aᵀ; A  -1/ρ]
        let k = vec![
            vec![4.0, 1.0, 1.0, 0.0],
            vec![1.0, 3.0, 1.0, 1.0],
            vec![1.0, 1.0, -0.5, 0.0],
            vec![0.0, 1.0, 0.0, -2.0],
        ];
        let upper = CscMatrix::from_dense(&k).unwrap().upper_triangle();
        let f = LdlFactor::new(&upper).unwrap();
        assert_eq!(f.negative_pivots(), 2);
        let x_true = vec![1.0, -2.0, 0.5, 3.0];
        let mut b = dense_mul(&k, &x_true);
        f.solve(&mut b);
        for (a, e) in b.iter().zip(&x_true) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn refactor_after_diagonal_update() {
        let k = vec![vec![2.0, 1.0], vec![1.0, -1.0]];
        let upper = CscMatrix::from_dense(&k).unwrap().upper_triangle();
        let mut f = LdlFactor::new(&upper).unwrap();
        // entry index 2 is the (1,1) diagonal in the original upper storage
        assert_eq!(upper.rowind[2], 1);
        f.update_values(&[2], &[-4.0]).unwrap();
        let k2 = vec![vec![2.0, 1.0], vec![1.0, -4.0]];
        let mut b = dense_mul(&k2, &[0.25, -1.5]);
        f.solve(&mut b);
        assert!((b[0] - 0.25).abs() < 1e-12 && (b[1] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let k = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let upper = CscMatrix::from_dense(&k).unwrap().upper_triangle();
        assert!(LdlFactor::new(&upper).is_err());
    }
}
