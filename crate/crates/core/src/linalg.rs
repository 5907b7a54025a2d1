//! Small dense linear algebra kernels.
//!
//! Everything here operates on problems that are tiny by numerical-computing
//! standards (at most a few hundred rows or columns), so the implementations
//! favour robustness and determinism over asymptotic speed: LU with partial
//! pivoting for square solves, cyclic Jacobi for symmetric eigenproblems, and
//! modified Gram-Schmidt with re-orthogonalization for least squares with
//! deterministic rank handling (later columns are dropped when they are
//! numerically dependent on earlier ones).

use ndarray::{Array1, Array2, ArrayView1};

/// Relative tolerance used to declare a least-squares column dependent.
pub const RANK_TOL: f64 = 1e-8;

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: ArrayView1<f64>) -> f64 {
    dot(a, a).sqrt()
}

/// Solves the square system `a x = b` by LU with partial pivoting.
/// Returns `None` when a pivot falls below `tol` times the largest
/// absolute entry of `a`.
pub fn lu_solve(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    assert_eq!(n, b.len());
    if n == 0 {
        return Some(Array1::zeros(0));
    }
    let mut m = a.clone();
    let mut x = b.clone();
    let scale = m.iter().fold(0.0_f64, |s, v| s.max(v.abs())).max(1.0);
    let tol = 1e-13 * scale;
    for k in 0..n {
        let mut piv = k;
        let mut best = m[[k, k]].abs();
        for r in k + 1..n {
            let v = m[[r, k]].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best <= tol {
            return None;
        }
        if piv != k {
            for c in 0..n {
                m.swap([k, c], [piv, c]);
            }
            x.swap(k, piv);
        }
        for r in k + 1..n {
            let f = m[[r, k]] / m[[k, k]];
            if f == 0.0 {
                continue;
            }
            m[[r, k]] = 0.0;
            for c in k + 1..n {
                m[[r, c]] -= f * m[[k, c]];
            }
            x[r] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let mut s = x[k];
        for c in k + 1..n {
            s -= m[[k, c]] * x[c];
        }
        x[k] = s / m[[k, k]];
    }
    Some(x)
}

/// Eigendecomposition of a symmetric matrix by the cyclic Jacobi method.
/// Returns eigenvalues in descending order and the matching eigenvectors
/// as columns of an orthogonal matrix.
pub fn sym_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    let mut m = a.clone();
    let mut v: Array2<f64> = Array2::eye(n);
    let frob = m.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    let stop = 1e-15 * frob;
    for _sweep in 0..100 {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in p + 1..n {
                off += 2.0 * m[[p, q]] * m[[p, q]];
            }
        }
        if off.sqrt() <= stop {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[[p, p]];
                let aqq = m[[q, q]];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[[j, j]].partial_cmp(&m[[i, i]]).unwrap());
    let vals = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut vecs = Array2::zeros((n, n));
    for (out, &src) in order.iter().enumerate() {
        for r in 0..n {
            vecs[[r, out]] = v[[r, src]];
        }
    }
    (vals, vecs)
}

/// Cholesky factor of a symmetric positive definite matrix (lower triangular).
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l: Array2<f64> = Array2::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d <= 0.0 {
            return None;
        }
        l[[j, j]] = d.sqrt();
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / l[[j, j]];
        }
    }
    Some(l)
}

/// Least-squares fit produced by [`least_squares`].
///
/// `coef` has one entry per design column; dropped columns get coefficient
/// zero and are listed in `dropped` in the order they were encountered.
#[derive(Debug, Clone)]
pub struct LsFit {
    pub coef: Array1<f64>,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    /// Upper-triangular factor over the kept columns of the
    /// (row-weight-scaled) design, so that `D_k' W D_k = R' R`.
    pub r: Array2<f64>,
}

impl LsFit {
    /// Solves `(D_k' W D_k) v = x` for a vector `x` over the kept columns,
    /// using the stored triangular factor.
    pub fn gram_solve(&self, x: &Array1<f64>) -> Array1<f64> {
        let k = self.kept.len();
        assert_eq!(k, x.len());
        let mut y = x.clone();
        // R' y = x
        for i in 0..k {
            let mut s = y[i];
            for j in 0..i {
                s -= self.r[[j, i]] * y[j];
            }
            y[i] = s / self.r[[i, i]];
        }
        // R v = y
        for i in (0..k).rev() {
            let mut s = y[i];
            for j in i + 1..k {
                s -= self.r[[i, j]] * y[j];
            }
            y[i] = s / self.r[[i, i]];
        }
        y
    }

    /// Restricts a full-length column vector to the kept columns.
    pub fn restrict(&self, full: &Array1<f64>) -> Array1<f64> {
        Array1::from_iter(self.kept.iter().map(|&j| full[j]))
    }

    pub fn predict_row(&self, row: &Array1<f64>) -> f64 {
        dot(self.coef.view(), row.view())
    }
}

/// Weighted least squares of `y` on the columns of `design` with
/// deterministic handling of rank deficiency: columns are processed left to
/// right and a column is dropped when its residual against the kept columns
/// falls below [`RANK_TOL`] times its norm.
///
/// `row_weights`, when given, must be nonnegative; rows are scaled by the
/// square root of the weight.
pub fn least_squares(
    design: &Array2<f64>,
    y: &Array1<f64>,
    row_weights: Option<&Array1<f64>>,
) -> LsFit {
    let n = design.nrows();
    let q = design.ncols();
    assert_eq!(n, y.len());
    let sw: Option<Array1<f64>> = row_weights.map(|w| {
        assert_eq!(w.len(), n);
        w.mapv(|v| {
            assert!(v >= 0.0, "negative row weight");
            v.sqrt()
        })
    });
    let scaled_col = |j: usize| -> Array1<f64> {
        let mut c = design.column(j).to_owned();
        if let Some(s) = &sw {
            c.iter_mut().zip(s.iter()).for_each(|(v, w)| *v *= w);
        }
        c
    };
    let mut yy = y.clone();
    if let Some(s) = &sw {
        yy.iter_mut().zip(s.iter()).for_each(|(v, w)| *v *= w);
    }

    let mut qcols: Vec<Array1<f64>> = Vec::new();
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped: Vec<usize> = Vec::new();
    let mut rrows: Vec<Vec<f64>> = Vec::new(); // rrows[i][j] = R[i, kept index j]
    for j in 0..q {
        let orig = scaled_col(j);
        let nrm0 = norm2(orig.view());
        let mut v = orig;
        let mut coeffs = vec![0.0; qcols.len()];
        for _pass in 0..2 {
            for (k, qc) in qcols.iter().enumerate() {
                let c = dot(qc.view(), v.view());
                coeffs[k] += c;
                v.iter_mut().zip(qc.iter()).for_each(|(a, b)| *a -= c * b);
            }
        }
        let nrm = norm2(v.view());
        if nrm <= RANK_TOL * nrm0.max(1e-300) || nrm0 == 0.0 {
            dropped.push(j);
            continue;
        }
        for (k, c) in coeffs.iter().enumerate() {
            rrows[k].push(*c);
        }
        rrows.push(Vec::new());
        v.mapv_inplace(|x| x / nrm);
        qcols.push(v);
        kept.push(j);
        let last = rrows.len() - 1;
        rrows[last].push(nrm);
    }

    let kq = kept.len();
    let mut r = Array2::zeros((kq, kq));
    for (i, row) in rrows.iter().enumerate() {
        // rrows[i] holds R[i, i..kq]
        for (off, val) in row.iter().enumerate() {
            r[[i, i + off]] = *val;
        }
    }
    // beta solves R beta = Q' y
    let mut qy = Array1::zeros(kq);
    for (k, qc) in qcols.iter().enumerate() {
        qy[k] = dot(qc.view(), yy.view());
    }
    let mut beta_k = qy;
    for i in (0..kq).rev() {
        let mut s = beta_k[i];
        for j in i + 1..kq {
            s -= r[[i, j]] * beta_k[j];
        }
        beta_k[i] = s / r[[i, i]];
    }
    let mut coef = Array1::zeros(q);
    for (k, &j) in kept.iter().enumerate() {
        coef[j] = beta_k[k];
    }
    LsFit {
        coef,
        kept,
        dropped,
        r,
    }
}

/// Orthonormalizes the rows of `(a | b)` by modified Gram-Schmidt, tracking
/// the right-hand side through the same operations. Returns the kept
/// orthonormal rows with transformed right-hand sides, the indices of
/// dropped (dependent, consistent) rows, and an inconsistency flag: a row
/// whose coefficient part vanishes but whose right-hand side does not means
/// the system `a w = b` has no solution.
pub struct RowBasis {
    pub rows: Vec<Array1<f64>>,
    pub rhs: Vec<f64>,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
    pub inconsistent: bool,
}

pub fn orthonormal_rows(a: &[Array1<f64>], b: &[f64], tol: f64) -> RowBasis {
    assert_eq!(a.len(), b.len());
    let mut rows: Vec<Array1<f64>> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut inconsistent = false;
    for (idx, (row, &bi)) in a.iter().zip(b.iter()).enumerate() {
        let nrm0 = norm2(row.view()).max(1e-300);
        let mut v = row.clone();
        let mut t = bi;
        for _pass in 0..2 {
            for (q, &qb) in rows.iter().zip(rhs.iter()) {
                let c = dot(q.view(), v.view());
                v.iter_mut().zip(q.iter()).for_each(|(x, y)| *x -= c * y);
                t -= c * qb;
            }
        }
        let nrm = norm2(v.view());
        if nrm <= tol * nrm0 {
            if t.abs() > tol * (1.0 + bi.abs()) {
                inconsistent = true;
            }
            dropped.push(idx);
            continue;
        }
        v.mapv_inplace(|x| x / nrm);
        rows.push(v);
        rhs.push(t / nrm);
        kept.push(idx);
    }
    RowBasis {
        rows,
        rhs,
        kept,
        dropped,
        inconsistent,
    }
}
