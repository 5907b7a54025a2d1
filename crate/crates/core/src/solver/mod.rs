//! Minimum-variance balancing weights.
//!
//! For one practice with patients i = 1..I and balance functions
//! B (I rows, L columns), the solver finds weights minimizing
//!
//! ```text
//!   sum_i (w_i - 1/I)^2
//! ```
//!
//! subject to `sum_i w_i = 1`, `|sum_i w_i B[i,l] - target_l| <= delta_l`
//! for every function, and optionally `w_i >= 0`.
//!
//! Exact balance without the sign restriction is an equality-constrained
//! projection solved in closed form from the stationarity system. The
//! nonnegative case runs an active-set iteration over the zero bounds with
//! that projection as the inner step. Positive half-widths turn the balance
//! rows into inequality pairs handled by a dual active-set iteration.
//! Feasibility is always decided by a phase-1 simplex, never by solver
//! non-convergence; at `delta = 0` with nonnegative weights that test is
//! exactly convex-hull membership of the target in the practice's rows.

mod simplex;

use crate::linalg::{self, lu_solve, orthonormal_rows};
use crate::model::{ExtrapolationStatus, Profile, NEGATIVE_WEIGHT_TOL};
use crate::transform::{basis_for, BalanceMatrix, Transform, TransformError};
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use thiserror::Error;

pub(crate) use simplex::ZERO_DELTA;
use simplex::{phase1, Phase1};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("bad problem: {0}")]
    BadProblem(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error(transparent)]
    Transform(#[from] TransformError),
}

/// One practice's balancing problem.
#[derive(Debug, Clone)]
pub struct SbwProblem {
    /// Balance-function values for the practice's patients, I rows by L
    /// columns.
    pub balance: Array2<f64>,
    /// Target value per function.
    pub target: Vec<f64>,
    /// Band half-width per function; zero means exact balance.
    pub delta: Vec<f64>,
    /// Restrict weights to be nonnegative.
    pub nonneg: bool,
}

impl SbwProblem {
    pub fn exact(balance: Array2<f64>, target: Vec<f64>, nonneg: bool) -> Self {
        let l = target.len();
        SbwProblem {
            balance,
            target,
            delta: vec![0.0; l],
            nonneg,
        }
    }

    fn validate(&self) -> Result<(), SolverError> {
        let l = self.balance.ncols();
        if self.target.len() != l || self.delta.len() != l {
            return Err(SolverError::BadProblem(format!(
                "balance has {l} functions, target has {}, delta has {}",
                self.target.len(),
                self.delta.len()
            )));
        }
        if self.balance.nrows() == 0 {
            return Err(SolverError::BadProblem("no patients".to_string()));
        }
        if self.delta.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(SolverError::BadProblem(
                "band half-widths must be finite and nonnegative".to_string(),
            ));
        }
        Ok(())
    }

    fn has_bands(&self) -> bool {
        self.delta.iter().any(|&d| d > ZERO_DELTA)
    }
}

/// Solver output. `weights` is `None` exactly when `status` is
/// `Infeasible`. `duals` holds multipliers of the equality rows in the
/// order [sum constraint, function 1, ..., function L], with respect to the
/// objective `sum (w_i - 1/I)^2`; they are reported for exact-balance
/// solves only.
#[derive(Debug, Clone)]
pub struct WeightSolution {
    pub status: ExtrapolationStatus,
    pub weights: Option<Array1<f64>>,
    pub objective: Option<f64>,
    /// Balance residual per function, weighted mean minus target.
    pub residuals: Option<Vec<f64>>,
    pub duals: Option<Vec<f64>>,
    /// Functions whose balance row was dropped as linearly dependent on
    /// earlier rows (with a consistent target).
    pub dropped: Vec<usize>,
    pub reason: Option<String>,
}

impl WeightSolution {
    fn infeasible(reason: &str) -> Self {
        WeightSolution {
            status: ExtrapolationStatus::Infeasible,
            weights: None,
            objective: None,
            residuals: None,
            duals: None,
            dropped: Vec::new(),
            reason: Some(reason.to_string()),
        }
    }

    pub fn weights_ref(&self) -> Option<&Array1<f64>> {
        self.weights.as_ref()
    }
}

fn uniform(i: usize) -> Array1<f64> {
    Array1::from_elem(i, 1.0 / i as f64)
}

fn objective_of(w: &Array1<f64>) -> f64 {
    let u = 1.0 / w.len() as f64;
    w.iter().map(|&x| (x - u) * (x - u)).sum()
}

fn residuals_of(prob: &SbwProblem, w: &Array1<f64>) -> Vec<f64> {
    (0..prob.balance.ncols())
        .map(|l| {
            let bal: f64 = (0..w.len()).map(|i| w[i] * prob.balance[[i, l]]).sum();
            bal - prob.target[l]
        })
        .collect()
}

fn sign_status(w: &Array1<f64>) -> ExtrapolationStatus {
    if w.iter().any(|&x| x < -NEGATIVE_WEIGHT_TOL) {
        ExtrapolationStatus::Extrapolated
    } else {
        ExtrapolationStatus::Interpolated
    }
}

/// Solves one practice's balancing problem.
pub fn solve_sbw(prob: &SbwProblem) -> Result<WeightSolution, SolverError> {
    prob.validate()?;
    if prob.nonneg {
        match phase1(&prob.balance, &prob.target, &prob.delta, true) {
            Phase1::Infeasible => {
                return Ok(WeightSolution::infeasible(
                    "no nonnegative weights satisfy the balance constraints",
                ))
            }
            Phase1::Stalled => {
                return Err(SolverError::NumericalFailure(
                    "phase-1 simplex stalled".to_string(),
                ))
            }
            Phase1::Feasible(witness) => {
                let mut sol = if prob.has_bands() {
                    dual_active_set(prob)?
                } else {
                    nonneg_active_set(prob, &witness)?
                };
                sol.status = ExtrapolationStatus::Interpolated;
                return Ok(sol);
            }
        }
    }
    if !prob.has_bands() {
        return exact_unrestricted(prob);
    }
    match phase1(&prob.balance, &prob.target, &prob.delta, false) {
        Phase1::Infeasible => Ok(WeightSolution::infeasible(
            "the balance constraints are mutually inconsistent",
        )),
        Phase1::Stalled => Err(SolverError::NumericalFailure(
            "phase-1 simplex stalled".to_string(),
        )),
        Phase1::Feasible(_) => {
            let mut sol = dual_active_set(prob)?;
            sol.status = sign_status(sol.weights_ref().unwrap());
            Ok(sol)
        }
    }
}

/// True when some weight vector satisfies the constraint system. With
/// nonnegative weights and zero half-widths this is membership of the
/// target in the convex hull of the practice's balance rows.
pub fn check_feasibility(prob: &SbwProblem) -> Result<bool, SolverError> {
    prob.validate()?;
    if !prob.nonneg && !prob.has_bands() {
        let (rows, rhs) = constraint_rows(prob);
        let basis = orthonormal_rows(&rows, &rhs, 1e-10);
        return Ok(!basis.inconsistent);
    }
    match phase1(&prob.balance, &prob.target, &prob.delta, prob.nonneg) {
        Phase1::Feasible(_) => Ok(true),
        Phase1::Infeasible => Ok(false),
        Phase1::Stalled => Err(SolverError::NumericalFailure(
            "phase-1 simplex stalled".to_string(),
        )),
    }
}

fn constraint_rows(prob: &SbwProblem) -> (Vec<Array1<f64>>, Vec<f64>) {
    let i = prob.balance.nrows();
    let l = prob.balance.ncols();
    let mut rows = Vec::with_capacity(l + 1);
    let mut rhs = Vec::with_capacity(l + 1);
    rows.push(Array1::ones(i));
    rhs.push(1.0);
    for c in 0..l {
        rows.push(prob.balance.column(c).to_owned());
        rhs.push(prob.target[c]);
    }
    (rows, rhs)
}

/// Exact balance without the sign restriction: the stationarity system of
/// the projection of the uniform vector onto the constraint plane, solved
/// through an orthonormalized row basis. Dependent consistent rows are
/// dropped with a warning; dependent inconsistent rows mean no solution
/// exists at all.
fn exact_unrestricted(prob: &SbwProblem) -> Result<WeightSolution, SolverError> {
    let (rows, rhs) = constraint_rows(prob);
    let basis = orthonormal_rows(&rows, &rhs, 1e-10);
    if basis.inconsistent {
        return Ok(WeightSolution::infeasible(
            "equality constraints are inconsistent (a function is constant away from its target)",
        ));
    }
    let dropped: Vec<usize> = basis.dropped.iter().map(|&r| r - 1).collect();
    if !dropped.is_empty() {
        log::warn!(
            "dropped {} dependent balance constraint(s)",
            dropped.len()
        );
    }
    let i = prob.balance.nrows();
    let u = uniform(i);
    let mut w = u.clone();
    for (q, &b) in basis.rows.iter().zip(basis.rhs.iter()) {
        let step = b - linalg::dot(q.view(), u.view());
        w.iter_mut().zip(q.iter()).for_each(|(x, y)| *x += step * y);
    }
    let duals = equality_duals(&rows, &basis.kept, &w, &u, prob.balance.ncols() + 1);
    Ok(WeightSolution {
        status: sign_status(&w),
        objective: Some(objective_of(&w)),
        residuals: Some(residuals_of(prob, &w)),
        weights: Some(w),
        duals,
        dropped,
        reason: None,
    })
}

/// Multipliers of the kept equality rows with respect to the objective
/// `sum (w_i - 1/I)^2`, padded with zeros at dropped rows.
fn equality_duals(
    rows: &[Array1<f64>],
    kept: &[usize],
    w: &Array1<f64>,
    u: &Array1<f64>,
    total: usize,
) -> Option<Vec<f64>> {
    let k = kept.len();
    let mut gram = Array2::zeros((k, k));
    let mut rhs = Array1::zeros(k);
    let grad = w - u;
    for (a, &ra) in kept.iter().enumerate() {
        for (b, &rb) in kept.iter().enumerate().skip(a) {
            let v = linalg::dot(rows[ra].view(), rows[rb].view());
            gram[[a, b]] = v;
            gram[[b, a]] = v;
        }
        rhs[a] = 2.0 * linalg::dot(rows[ra].view(), grad.view());
    }
    let lam = lu_solve(&gram, &rhs)?;
    let mut out = vec![0.0; total];
    for (a, &ra) in kept.iter().enumerate() {
        out[ra] = lam[a];
    }
    Some(out)
}

/// Active-set iteration for exact balance with nonnegative weights, in the
/// style of Lawson-Hanson: zero bounds come in and out of the active set,
/// and each inner step projects the uniform vector onto the equality
/// constraints restricted to the free patients. `witness` must be a
/// feasible point (from phase-1), which guarantees every restricted system
/// we solve is consistent.
fn nonneg_active_set(
    prob: &SbwProblem,
    witness: &[f64],
) -> Result<WeightSolution, SolverError> {
    let i_count = prob.balance.nrows();
    let l_count = prob.balance.ncols();
    let u = 1.0 / i_count as f64;
    let mut x: Array1<f64> = Array1::from_iter(witness.iter().map(|&v| v.max(0.0)));
    let mut free = vec![true; i_count];

    let solve_on = |free: &[bool]| -> (Array1<f64>, Vec<Array1<f64>>, Vec<usize>, bool) {
        let idx: Vec<usize> = (0..i_count).filter(|&i| free[i]).collect();
        let mut rows: Vec<Array1<f64>> = Vec::with_capacity(l_count + 1);
        let mut rhs: Vec<f64> = Vec::with_capacity(l_count + 1);
        rows.push(Array1::ones(idx.len()));
        rhs.push(1.0);
        for l in 0..l_count {
            rows.push(Array1::from_iter(idx.iter().map(|&i| prob.balance[[i, l]])));
            rhs.push(prob.target[l]);
        }
        let basis = orthonormal_rows(&rows, &rhs, 1e-10);
        let up = Array1::from_elem(idx.len(), u);
        let mut w = up;
        for (q, &b) in basis.rows.iter().zip(basis.rhs.iter()) {
            let step = b - u * q.sum();
            w.iter_mut().zip(q.iter()).for_each(|(a, c)| *a += step * c);
        }
        let mut full = Array1::zeros(i_count);
        for (k, &i) in idx.iter().enumerate() {
            full[i] = w[k];
        }
        (full, rows, basis.kept, basis.inconsistent)
    };

    let max_outer = 10 * (i_count + l_count) + 100;
    for _ in 0..max_outer {
        let (w, rows, kept, inconsistent) = solve_on(&free);
        if inconsistent {
            return Err(SolverError::NumericalFailure(
                "restricted equality system inconsistent despite feasibility".to_string(),
            ));
        }
        let min_free = (0..i_count)
            .filter(|&i| free[i])
            .fold(f64::INFINITY, |a, i| a.min(w[i]));
        if min_free >= -1e-11 {
            x = w.mapv(|v| v.max(0.0));
            // dual feasibility of the zero bounds
            let idx: Vec<usize> = (0..i_count).filter(|&i| free[i]).collect();
            let uf = Array1::from_elem(idx.len(), u);
            let wf = Array1::from_iter(idx.iter().map(|&i| x[i]));
            let lam = equality_duals(&rows, &kept, &wf, &uf, l_count + 1)
                .ok_or_else(|| {
                    SolverError::NumericalFailure("singular dual system".to_string())
                })?;
            let grad_scale = x.iter().map(|v| (v - u).abs()).fold(0.0_f64, f64::max);
            let mu_tol = 1e-8 * (1.0 + 2.0 * grad_scale);
            let mut worst = (-mu_tol, usize::MAX);
            for i in 0..i_count {
                if free[i] {
                    continue;
                }
                let mut at = lam[0];
                for l in 0..l_count {
                    at += lam[l + 1] * prob.balance[[i, l]];
                }
                let mu = -2.0 * u - at;
                if mu < worst.0 {
                    worst = (mu, i);
                }
            }
            if worst.1 == usize::MAX {
                let dropped_rows = kept_to_dropped(&kept, l_count + 1);
                if !dropped_rows.is_empty() {
                    log::warn!(
                        "dropped {} dependent balance constraint(s)",
                        dropped_rows.len()
                    );
                }
                let duals: Vec<f64> = {
                    let mut d = vec![0.0; l_count + 1];
                    for (slot, v) in d.iter_mut().zip(lam.iter()) {
                        *slot = *v;
                    }
                    d
                };
                return Ok(WeightSolution {
                    status: ExtrapolationStatus::Interpolated,
                    objective: Some(objective_of(&x)),
                    residuals: Some(residuals_of(prob, &x)),
                    weights: Some(x),
                    duals: Some(duals),
                    dropped: dropped_rows,
                    reason: None,
                });
            }
            free[worst.1] = true;
            continue;
        }
        // step from the current feasible point toward the projection until
        // the first free weight hits zero
        let mut alpha = 1.0_f64;
        for i in 0..i_count {
            if free[i] && w[i] < 0.0 {
                let denom = x[i] - w[i];
                if denom > 0.0 {
                    alpha = alpha.min(x[i] / denom);
                }
            }
        }
        for i in 0..i_count {
            if free[i] {
                x[i] += alpha * (w[i] - x[i]);
            }
        }
        let mut any_fixed = false;
        for i in 0..i_count {
            if free[i] && x[i] <= 1e-13 {
                free[i] = false;
                x[i] = 0.0;
                any_fixed = true;
            }
        }
        if !any_fixed {
            // guard against a stalled step; fix the most negative target
            let mut arg = usize::MAX;
            let mut best = 0.0;
            for i in 0..i_count {
                if free[i] && w[i] < best {
                    best = w[i];
                    arg = i;
                }
            }
            if arg == usize::MAX {
                return Err(SolverError::NumericalFailure(
                    "active-set step made no progress".to_string(),
                ));
            }
            free[arg] = false;
            x[arg] = 0.0;
        }
    }
    Err(SolverError::NumericalFailure(
        "active-set iteration cap exceeded".to_string(),
    ))
}

fn kept_to_dropped(kept: &[usize], total: usize) -> Vec<usize> {
    let mut dropped = Vec::new();
    let mut it = kept.iter().peekable();
    for r in 0..total {
        if it.peek() == Some(&&r) {
            it.next();
        } else if r > 0 {
            dropped.push(r - 1);
        }
    }
    dropped
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConstraintId {
    Sum,
    BandEq(usize),
    BandLo(usize),
    BandHi(usize),
    Bound(usize),
}

struct GiConstraint {
    id: ConstraintId,
    normal: Array1<f64>,
    rhs: f64,
}

/// Dual active-set iteration for problems with positive band half-widths.
/// Starts from the unconstrained minimum (the uniform vector), adds the
/// most violated constraint at each step, and drops blocking constraints
/// along the dual path. The identity Hessian makes every step a plain
/// projection.
fn dual_active_set(prob: &SbwProblem) -> Result<WeightSolution, SolverError> {
    let i_count = prob.balance.nrows();
    let l_count = prob.balance.ncols();
    let unit = |mut v: Array1<f64>, d: f64| -> Option<(Array1<f64>, f64)> {
        let n = linalg::norm2(v.view());
        if n <= 1e-300 {
            return None;
        }
        v.mapv_inplace(|x| x / n);
        Some((v, d / n))
    };

    let mut equalities: Vec<GiConstraint> = Vec::new();
    let (sum_n, sum_d) = unit(Array1::ones(i_count), 1.0).unwrap();
    equalities.push(GiConstraint {
        id: ConstraintId::Sum,
        normal: sum_n,
        rhs: sum_d,
    });
    let mut inequalities: Vec<GiConstraint> = Vec::new();
    for l in 0..l_count {
        let col = prob.balance.column(l).to_owned();
        if prob.delta[l] <= ZERO_DELTA {
            if let Some((n, d)) = unit(col, prob.target[l]) {
                equalities.push(GiConstraint {
                    id: ConstraintId::BandEq(l),
                    normal: n,
                    rhs: d,
                });
            } else if prob.target[l].abs() > 1e-9 * (1.0 + prob.target[l].abs()) {
                return Ok(WeightSolution::infeasible(
                    "a zero balance function has a nonzero target",
                ));
            }
        } else {
            if let Some((n, d)) = unit(col.clone(), prob.target[l] - prob.delta[l]) {
                inequalities.push(GiConstraint {
                    id: ConstraintId::BandLo(l),
                    normal: n,
                    rhs: d,
                });
            }
            if let Some((n, d)) = unit(-col, -(prob.target[l] + prob.delta[l])) {
                inequalities.push(GiConstraint {
                    id: ConstraintId::BandHi(l),
                    normal: n,
                    rhs: d,
                });
            }
        }
    }
    if prob.nonneg {
        for i in 0..i_count {
            let mut e = Array1::zeros(i_count);
            e[i] = 1.0;
            inequalities.push(GiConstraint {
                id: ConstraintId::Bound(i),
                normal: e,
                rhs: 0.0,
            });
        }
    }

    struct Active {
        idx: usize, // index into equalities (0..ne) then inequalities (ne..)
        lambda: f64,
        eq: bool,
    }
    let ne = equalities.len();
    let con = |actives: &Vec<Active>, k: usize| -> &GiConstraint {
        let idx = actives[k].idx;
        if idx < ne {
            &equalities[idx]
        } else {
            &inequalities[idx - ne]
        }
    };

    let mut x = uniform(i_count);
    let mut actives: Vec<Active> = Vec::new();
    let mut dropped: Vec<usize> = Vec::new();

    // r solves (N'N) r = N'n for the active normals N
    let coords = |actives: &Vec<Active>, n: &Array1<f64>| -> Option<Vec<f64>> {
        let k = actives.len();
        if k == 0 {
            return Some(Vec::new());
        }
        let mut gram = Array2::zeros((k, k));
        let mut rhs = Array1::zeros(k);
        for a in 0..k {
            let na = &con(actives, a).normal;
            for b in a..k {
                let v = linalg::dot(na.view(), con(actives, b).normal.view());
                gram[[a, b]] = v;
                gram[[b, a]] = v;
            }
            rhs[a] = linalg::dot(na.view(), n.view());
        }
        lu_solve(&gram, &rhs).map(|v| v.to_vec())
    };

    let max_iter = 20 * (i_count + inequalities.len() + ne) + 200;
    let mut iter = 0usize;

    // install equality constraints first; their multipliers are free-signed
    // and they are never dropped
    for e in 0..ne {
        iter += 1;
        if iter > max_iter {
            return Err(SolverError::NumericalFailure(
                "dual active-set iteration cap exceeded".to_string(),
            ));
        }
        let n = equalities[e].normal.clone();
        let d = equalities[e].rhs;
        let r = coords(&actives, &n).ok_or_else(|| {
            SolverError::NumericalFailure("singular active-set system".to_string())
        })?;
        let mut z = n.clone();
        for (k, rk) in r.iter().enumerate() {
            let nk = &con(&actives, k).normal;
            z.iter_mut().zip(nk.iter()).for_each(|(a, b)| *a -= rk * b);
        }
        let zz = linalg::dot(z.view(), z.view());
        let resid = d - linalg::dot(n.view(), x.view());
        if zz <= 1e-16 {
            if resid.abs() > 1e-9 * (1.0 + d.abs()) {
                return Ok(WeightSolution::infeasible(
                    "equality constraints are inconsistent",
                ));
            }
            if let ConstraintId::BandEq(l) = equalities[e].id {
                dropped.push(l);
            }
            continue;
        }
        let t = resid / zz;
        x.iter_mut().zip(z.iter()).for_each(|(a, b)| *a += t * b);
        for (k, rk) in r.iter().enumerate() {
            actives[k].lambda -= t * rk;
        }
        actives.push(Active {
            idx: e,
            lambda: t,
            eq: true,
        });
    }

    loop {
        iter += 1;
        if iter > max_iter {
            return Err(SolverError::NumericalFailure(
                "dual active-set iteration cap exceeded".to_string(),
            ));
        }
        // most violated inactive inequality
        let mut pick: Option<(usize, f64)> = None;
        for (q, c) in inequalities.iter().enumerate() {
            if actives.iter().any(|a| a.idx == ne + q) {
                continue;
            }
            let v = c.rhs - linalg::dot(c.normal.view(), x.view());
            if v > 1e-10 && pick.map_or(true, |(_, pv)| v > pv) {
                pick = Some((q, v));
            }
        }
        let Some((q, _)) = pick else {
            break;
        };
        let n = inequalities[q].normal.clone();
        let d = inequalities[q].rhs;
        let mut lam_plus = 0.0_f64;
        loop {
            iter += 1;
            if iter > max_iter {
                return Err(SolverError::NumericalFailure(
                    "dual active-set iteration cap exceeded".to_string(),
                ));
            }
            let r = coords(&actives, &n).ok_or_else(|| {
                SolverError::NumericalFailure("singular active-set system".to_string())
            })?;
            let mut z = n.clone();
            for (k, rk) in r.iter().enumerate() {
                let nk = &con(&actives, k).normal;
                z.iter_mut().zip(nk.iter()).for_each(|(a, b)| *a -= rk * b);
            }
            let zz = linalg::dot(z.view(), z.view());
            // dual blocking step over active inequalities
            let mut block: Option<(usize, f64)> = None;
            for (k, a) in actives.iter().enumerate() {
                if a.eq || r[k] <= 1e-12 {
                    continue;
                }
                let t = a.lambda / r[k];
                if block.map_or(true, |(_, bt)| t < bt) {
                    block = Some((k, t));
                }
            }
            if zz <= 1e-16 {
                let Some((kb, t1)) = block else {
                    return Ok(WeightSolution::infeasible(
                        "the balance bands and sign restriction are mutually inconsistent",
                    ));
                };
                for (k, rk) in r.iter().enumerate() {
                    actives[k].lambda -= t1 * rk;
                }
                lam_plus += t1;
                actives.remove(kb);
                continue;
            }
            let t2 = (d - linalg::dot(n.view(), x.view())) / zz;
            let (t, full) = match block {
                Some((_, t1)) if t1 < t2 => (t1, false),
                _ => (t2, true),
            };
            x.iter_mut().zip(z.iter()).for_each(|(a, b)| *a += t * b);
            for (k, rk) in r.iter().enumerate() {
                actives[k].lambda -= t * rk;
            }
            lam_plus += t;
            if full {
                actives.push(Active {
                    idx: ne + q,
                    lambda: lam_plus,
                    eq: false,
                });
                break;
            }
            let (kb, _) = block.unwrap();
            actives.remove(kb);
        }
    }

    if prob.nonneg {
        x.mapv_inplace(|v| if v < 0.0 && v > -1e-11 { 0.0 } else { v });
    }
    if !dropped.is_empty() {
        log::warn!("dropped {} dependent balance constraint(s)", dropped.len());
    }
    Ok(WeightSolution {
        status: sign_status(&x),
        objective: Some(objective_of(&x)),
        residuals: Some(residuals_of(prob, &x)),
        weights: Some(x),
        duals: None,
        dropped,
        reason: None,
    })
}

/// Band half-widths as a fraction of each function's standard deviation
/// over the target sample (all rows when the profile has no backing rows).
pub fn delta_from_sd_fraction(
    bm: &BalanceMatrix,
    rows: Option<&[usize]>,
    fraction: f64,
) -> Vec<f64> {
    let l = bm.l();
    if fraction <= 0.0 {
        return vec![0.0; l];
    }
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..bm.values.nrows()).collect();
            &all
        }
    };
    let m = rows.len() as f64;
    (0..l)
        .map(|j| {
            let mean: f64 = rows.iter().map(|&r| bm.values[[r, j]]).sum::<f64>() / m;
            let ss: f64 = rows
                .iter()
                .map(|&r| (bm.values[[r, j]] - mean) * (bm.values[[r, j]] - mean))
                .sum();
            let sd = if m > 1.0 { (ss / (m - 1.0)).sqrt() } else { 0.0 };
            fraction * sd
        })
        .collect()
}

/// Per-practice solver problems for a dataset under a transform basis.
pub(crate) fn practice_problems(
    d: &crate::model::Dataset,
    profile: &Profile,
    t: &Transform,
    nonneg: bool,
    delta_fraction: f64,
) -> Result<Vec<SbwProblem>, SolverError> {
    let (bm, target) = basis_for(d, t, profile)?;
    let rows_opt = backing_rows(profile, d.n());
    let delta = delta_from_sd_fraction(&bm, rows_opt.as_deref(), delta_fraction);
    let mut out = Vec::with_capacity(d.practice_count());
    for p in 0..d.practice_count() {
        let rows = d.practice_rows(p);
        let mut balance = Array2::zeros((rows.len(), bm.l()));
        for (k, &r) in rows.iter().enumerate() {
            for j in 0..bm.l() {
                balance[[k, j]] = bm.values[[r, j]];
            }
        }
        out.push(SbwProblem {
            balance,
            target: target.clone(),
            delta: delta.clone(),
            nonneg,
        });
    }
    Ok(out)
}

/// Solves the weight problem of every practice at the given profile;
/// solver failures become per-practice Infeasible results with a reason.
pub fn practice_weight_solutions(
    d: &crate::model::Dataset,
    profile: &Profile,
    t: &Transform,
    nonneg: bool,
    delta_fraction: f64,
) -> Result<Vec<WeightSolution>, SolverError> {
    let problems = practice_problems(d, profile, t, nonneg, delta_fraction)?;
    Ok(problems
        .par_iter()
        .map(|prob| {
            solve_sbw(prob)
                .unwrap_or_else(|e| WeightSolution::infeasible(&format!("solver failed: {e}")))
        })
        .collect())
}

pub(crate) fn backing_rows(profile: &Profile, n: usize) -> Option<Vec<usize>> {
    use crate::model::Provenance::*;
    match &profile.provenance {
        SystemMean => Some((0..n).collect()),
        SampleMean { rows } => Some(rows.clone()),
        Patient { row } => Some(vec![*row]),
        Custom => None,
    }
}

/// Extrapolation status of every practice at the given profile: with the
/// sign restriction, feasible or not; without it, the sign pattern of the
/// exactly-balancing weights.
pub fn classify_practices(
    d: &crate::model::Dataset,
    profile: &Profile,
    t: &Transform,
    nonneg: bool,
    delta_fraction: f64,
) -> Result<Vec<ExtrapolationStatus>, SolverError> {
    let problems = practice_problems(d, profile, t, nonneg, delta_fraction)?;
    problems
        .par_iter()
        .map(|prob| {
            if nonneg {
                Ok(if check_feasibility(prob)? {
                    ExtrapolationStatus::Interpolated
                } else {
                    ExtrapolationStatus::Infeasible
                })
            } else {
                Ok(solve_sbw(prob)?.status)
            }
        })
        .collect()
}
