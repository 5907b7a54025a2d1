//! Phase-1 simplex feasibility test for the balancing-weight constraint
//! system: does any weight vector satisfy the sum constraint, the balance
//! bands, and (optionally) nonnegativity?
//!
//! The test is a plain dense tableau simplex minimizing the sum of
//! artificial variables, with Bland's rule for termination. Free weights
//! (the unrestricted case) are split into positive and negative parts.

use ndarray::Array2;

const COST_TOL: f64 = 1e-11;
const PIVOT_TOL: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Phase1 {
    /// A feasible weight vector (length I) found by the simplex.
    Feasible(Vec<f64>),
    Infeasible,
    /// Iteration cap hit; should not happen with Bland's rule.
    Stalled,
}

impl Phase1 {
    #[cfg(test)]
    pub(crate) fn is_feasible(&self) -> bool {
        matches!(self, Phase1::Feasible(_))
    }
}

/// Treat band half-widths at or below this as exact equality constraints.
pub(crate) const ZERO_DELTA: f64 = 1e-15;

pub(crate) fn phase1(
    balance: &Array2<f64>,
    target: &[f64],
    delta: &[f64],
    nonneg: bool,
) -> Phase1 {
    let i_count = balance.nrows();
    let l_count = balance.ncols();
    assert_eq!(target.len(), l_count);
    assert_eq!(delta.len(), l_count);
    if i_count == 0 {
        return Phase1::Infeasible;
    }
    let nw = if nonneg { i_count } else { 2 * i_count };
    let band_rows: usize = delta.iter().filter(|&&d| d > ZERO_DELTA).count();
    let eq_rows = l_count - band_rows;
    let n_slack = 2 * band_rows;
    let nv = nw + n_slack;
    let m_max = 1 + eq_rows + 2 * band_rows;

    // rows[r] = (structural coefficients, rhs)
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(m_max);
    let mut coef_row = |col_vals: &dyn Fn(usize) -> f64, rhs: f64, slack: Option<(usize, f64)>| {
        let mut row = vec![0.0; nv];
        for i in 0..i_count {
            let c = col_vals(i);
            row[i] = c;
            if !nonneg {
                row[i_count + i] = -c;
            }
        }
        if let Some((s, sign)) = slack {
            row[nw + s] = sign;
        }
        rows.push((row, rhs));
    };
    coef_row(&|_i| 1.0, 1.0, None);
    let mut slack_idx = 0usize;
    for l in 0..l_count {
        let colmax = (0..i_count).fold(0.0_f64, |a, i| a.max(balance[[i, l]].abs()));
        if colmax <= ZERO_DELTA {
            // zero column: feasible iff the target band contains zero
            if target[l].abs() > delta[l] + 1e-9 * (1.0 + target[l].abs()) {
                return Phase1::Infeasible;
            }
            continue;
        }
        if delta[l] <= ZERO_DELTA {
            coef_row(&|i| balance[[i, l]], target[l], None);
        } else {
            coef_row(
                &|i| balance[[i, l]],
                target[l] + delta[l],
                Some((slack_idx, 1.0)),
            );
            slack_idx += 1;
            coef_row(
                &|i| balance[[i, l]],
                target[l] - delta[l],
                Some((slack_idx, -1.0)),
            );
            slack_idx += 1;
        }
    }
    let m = rows.len();

    // normalize rows and flip signs so every rhs is nonnegative
    for (row, rhs) in rows.iter_mut() {
        let scale = row.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1e-12);
        row.iter_mut().for_each(|v| *v /= scale);
        *rhs /= scale;
        if *rhs < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
            *rhs = -*rhs;
        }
    }

    // tableau with artificial columns appended
    let width = nv + m + 1;
    let mut tab = vec![vec![0.0; width]; m];
    for (r, (row, rhs)) in rows.iter().enumerate() {
        tab[r][..nv].copy_from_slice(row);
        tab[r][nv + r] = 1.0;
        tab[r][width - 1] = *rhs;
    }
    let mut basis: Vec<usize> = (0..m).map(|r| nv + r).collect();
    // reduced costs for minimizing the artificial sum: with the artificial
    // basis, structural columns get minus their column sum and the basic
    // artificial columns get zero
    let mut cost = vec![0.0; width];
    for (j, cj) in cost.iter_mut().enumerate() {
        if j < nv || j == width - 1 {
            let s: f64 = (0..m).map(|r| tab[r][j]).sum();
            *cj = -s;
        }
    }

    let max_iter = 200 * (m + nv) + 2000;
    for _ in 0..max_iter {
        // Bland: entering = lowest-index column with negative reduced cost
        let mut enter = None;
        for (j, &cj) in cost.iter().enumerate().take(nv + m) {
            if cj < -COST_TOL {
                enter = Some(j);
                break;
            }
        }
        let Some(j) = enter else {
            let obj = -cost[width - 1];
            return finish(obj, &tab, &basis, nonneg, i_count, nw, width);
        };
        let mut leave: Option<(usize, f64)> = None;
        for r in 0..m {
            if tab[r][j] > PIVOT_TOL {
                let ratio = tab[r][width - 1] / tab[r][j];
                match leave {
                    None => leave = Some((r, ratio)),
                    Some((lr, lratio)) => {
                        if ratio < lratio - 1e-12
                            || ((ratio - lratio).abs() <= 1e-12 && basis[r] < basis[lr])
                        {
                            leave = Some((r, ratio));
                        }
                    }
                }
            }
        }
        let Some((r, _)) = leave else {
            // the artificial objective is bounded below by zero, so an
            // unbounded ray means numerical breakdown
            return Phase1::Stalled;
        };
        // pivot on (r, j)
        let piv = tab[r][j];
        for v in tab[r].iter_mut() {
            *v /= piv;
        }
        for rr in 0..m {
            if rr != r {
                let f = tab[rr][j];
                if f != 0.0 {
                    for c in 0..width {
                        tab[rr][c] -= f * tab[r][c];
                    }
                }
            }
        }
        let f = cost[j];
        if f != 0.0 {
            for c in 0..width {
                cost[c] -= f * tab[r][c];
            }
        }
        basis[r] = j;
    }
    Phase1::Stalled
}

fn finish(
    obj: f64,
    tab: &[Vec<f64>],
    basis: &[usize],
    nonneg: bool,
    i_count: usize,
    nw: usize,
    width: usize,
) -> Phase1 {
    let rhs_max = tab
        .iter()
        .fold(0.0_f64, |a, row| a.max(row[width - 1].abs()));
    if obj > 1e-8 * (1.0 + rhs_max) {
        return Phase1::Infeasible;
    }
    let mut w = vec![0.0; i_count];
    for (r, &b) in basis.iter().enumerate() {
        if b < i_count {
            w[b] += tab[r][width - 1];
        } else if !nonneg && b < nw {
            w[b - i_count] -= tab[r][width - 1];
        }
    }
    Phase1::Feasible(w)
}
