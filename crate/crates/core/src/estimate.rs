//! Per-practice standardized outcome estimators.
//!
//! Every estimator answers the same question: what mean outcome would
//! practice p have produced for a patient population described by the
//! target profile? The methods differ in how they move from p's own case
//! mix to the target:
//!
//! * `Fe` fits one pooled regression with practice indicators and predicts
//!   at the profile.
//! * `Mr` fits a separate regression per practice.
//! * `SbwNonneg` / `SbwUnrestricted` reweight each practice's own patients
//!   to the profile and take the weighted outcome mean.
//! * `SbwFe` balances each practice's non-null functions by unrestricted
//!   weights, then corrects for the null ones through a pooled regression.
//! * `SbwWr` truncates those weights at zero and feeds them into a pooled
//!   weighted regression that predicts at the profile.
//!
//! All regression-based methods are linear in the outcome vector, so each
//! per-practice estimate has implied patient-level weights `c` with
//! estimate = c'Y; the sign pattern of `c` is the extrapolation diagnostic
//! and `c` drives the robust standard errors.

use crate::linalg::{dot, least_squares, LsFit};
use crate::model::{
    detect_null_functions, Dataset, ExtrapolationStatus, ModelError, NullPartition, Profile,
    NEGATIVE_WEIGHT_TOL,
};
use crate::solver::{practice_problems, solve_sbw, SbwProblem, SolverError};
use crate::transform::{basis_for, Transform, TransformError, TransformMode};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959963984540054;

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fe,
    Mr,
    SbwNonneg,
    SbwUnrestricted,
    SbwFe,
    SbwWr,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Fe,
        Method::Mr,
        Method::SbwNonneg,
        Method::SbwUnrestricted,
        Method::SbwFe,
        Method::SbwWr,
    ];

    /// Method family tag.
    pub fn tag(self) -> &'static str {
        match self {
            Method::Fe => "FE",
            Method::Mr => "MR",
            Method::SbwNonneg | Method::SbwUnrestricted => "SBW",
            Method::SbwFe => "SBW+FE",
            Method::SbwWr => "SBW+WR",
        }
    }

    /// Unambiguous display label; the two weighting variants carry their
    /// weight domain.
    pub fn label(self) -> &'static str {
        match self {
            Method::Fe => "FE",
            Method::Mr => "MR",
            Method::SbwNonneg => "SBW(R0+)",
            Method::SbwUnrestricted => "SBW(R)",
            Method::SbwFe => "SBW+FE",
            Method::SbwWr => "SBW+WR",
        }
    }

    /// Whether the method produces an estimate even for practices whose
    /// own patients cannot be reweighted to the profile.
    pub fn model_extrapolating(self) -> bool {
        !matches!(self, Method::SbwNonneg | Method::SbwUnrestricted)
    }

    pub fn parse(s: &str) -> Option<Method> {
        match s.to_ascii_lowercase().as_str() {
            "fe" => Some(Method::Fe),
            "mr" => Some(Method::Mr),
            "sbw" | "sbw-nonneg" => Some(Method::SbwNonneg),
            "sbw-r" | "sbw-unrestricted" => Some(Method::SbwUnrestricted),
            "sbw-fe" => Some(Method::SbwFe),
            "sbw-wr" => Some(Method::SbwWr),
            _ => None,
        }
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            Method::Fe => "fe",
            Method::Mr => "mr",
            Method::SbwNonneg => "sbw-nonneg",
            Method::SbwUnrestricted => "sbw-r",
            Method::SbwFe => "sbw-fe",
            Method::SbwWr => "sbw-wr",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

pub fn basis_tag(mode: TransformMode) -> &'static str {
    match mode {
        TransformMode::Raw => "X",
        TransformMode::PcAugmented | TransformMode::PcSecondMoment => "X~",
    }
}

/// How the two-step balanced estimator turns its pooled fit into a
/// per-practice value: correct the weighted mean at the profile, or
/// average fitted values over the practice's own patients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictionMode {
    ProfileCorrected,
    Literal,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub draws: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct EstimateOptions {
    /// Balance band half-widths as a fraction of each function's standard
    /// deviation over the target sample. Zero means exact balance.
    pub delta_fraction: f64,
    pub layered_mode: PredictionMode,
    /// Let `Mr` fall back to a column-dropping fit for singular practice
    /// designs instead of abstaining.
    pub mr_pseudoinverse: bool,
    /// Replace analytic standard errors with a within-practice patient
    /// resampling bootstrap (weighting methods only).
    pub bootstrap: Option<BootstrapConfig>,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            delta_fraction: 0.0,
            layered_mode: PredictionMode::ProfileCorrected,
            mr_pseudoinverse: false,
            bootstrap: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PracticeEstimate {
    pub practice: String,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub status: ExtrapolationStatus,
    pub rank: Option<usize>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateTable {
    pub method: Method,
    pub basis: String,
    pub profile: String,
    pub practices: Vec<PracticeEstimate>,
}

impl EstimateTable {
    pub fn estimated(&self) -> usize {
        self.practices.iter().filter(|c| c.estimate.is_some()).count()
    }

    pub fn skipped(&self) -> usize {
        self.practices.len() - self.estimated()
    }

    pub fn estimates(&self) -> Vec<Option<f64>> {
        self.practices.iter().map(|c| c.estimate).collect()
    }

    pub fn statuses(&self) -> Vec<ExtrapolationStatus> {
        self.practices.iter().map(|c| c.status).collect()
    }

    pub fn summary_line(&self) -> String {
        let mut extrap = 0;
        let mut infeas = 0;
        for c in &self.practices {
            match c.status {
                ExtrapolationStatus::Extrapolated => extrap += 1,
                ExtrapolationStatus::Infeasible => infeas += 1,
                ExtrapolationStatus::Interpolated => {}
            }
        }
        format!(
            "method={} basis={} profile={}: {} estimated, {} extrapolated, {} infeasible",
            self.method.label(),
            self.basis,
            self.profile,
            self.estimated(),
            extrap,
            infeas
        )
    }
}

/// Ranks 1..m over the estimated practices, ascending in the estimate,
/// ties broken by practice order.
pub fn assign_ranks(practices: &mut [PracticeEstimate]) {
    let mut idx: Vec<usize> = (0..practices.len())
        .filter(|&i| practices[i].estimate.is_some())
        .collect();
    idx.sort_by(|&a, &b| {
        let ea = practices[a].estimate.unwrap();
        let eb = practices[b].estimate.unwrap();
        ea.partial_cmp(&eb).unwrap().then(a.cmp(&b))
    });
    for p in practices.iter_mut() {
        p.rank = None;
    }
    for (r, &i) in idx.iter().enumerate() {
        practices[i].rank = Some(r + 1);
    }
}

fn cell(
    label: &str,
    estimate: Option<f64>,
    se: Option<f64>,
    status: ExtrapolationStatus,
    note: Option<String>,
) -> PracticeEstimate {
    let ci = match (estimate, se) {
        (Some(e), Some(s)) => Some((e - Z_95 * s, e + Z_95 * s)),
        _ => None,
    };
    PracticeEstimate {
        practice: label.to_string(),
        estimate,
        se,
        ci,
        status,
        rank: None,
        note,
    }
}

fn finish(
    method: Method,
    t: &Transform,
    profile: &Profile,
    mut practices: Vec<PracticeEstimate>,
) -> EstimateTable {
    assign_ranks(&mut practices);
    EstimateTable {
        method,
        basis: basis_tag(t.mode).to_string(),
        profile: profile.name.clone(),
        practices,
    }
}

/// A fitted linear-in-outcome estimator: the design, the least-squares
/// fit, optional row weights, and the dataset rows behind each design row
/// (`None` when the design covers the whole dataset in order).
pub struct LinearFit {
    fit: LsFit,
    design: Array2<f64>,
    row_weights: Option<Array1<f64>>,
    rows: Option<Vec<usize>>,
    n: usize,
}

impl LinearFit {
    pub fn new(
        design: Array2<f64>,
        y: &Array1<f64>,
        row_weights: Option<Array1<f64>>,
        rows: Option<Vec<usize>>,
        n: usize,
    ) -> LinearFit {
        let fit = least_squares(&design, y, row_weights.as_ref());
        LinearFit {
            fit,
            design,
            row_weights,
            rows,
            n,
        }
    }

    pub fn rank_deficient(&self) -> bool {
        !self.fit.dropped.is_empty()
    }

    pub fn dropped(&self) -> &[usize] {
        &self.fit.dropped
    }

    pub fn coef(&self) -> &Array1<f64> {
        &self.fit.coef
    }

    pub fn predict(&self, x_row: &Array1<f64>) -> f64 {
        self.fit.predict_row(x_row)
    }

    /// Residuals over the design rows.
    pub fn residuals(&self, y: &Array1<f64>) -> Array1<f64> {
        let m = self.design.nrows();
        let mut r = Array1::zeros(m);
        for i in 0..m {
            let mut f = 0.0;
            for &j in &self.fit.kept {
                f += self.design[[i, j]] * self.fit.coef[j];
            }
            r[i] = y[i] - f;
        }
        r
    }

    /// The patient-level coefficients `c` of the prediction at `x_row` as
    /// a linear functional of the outcome vector, embedded at the design's
    /// dataset rows; prediction = c'Y exactly.
    pub fn implied_weights(&self, x_row: &Array1<f64>) -> Array1<f64> {
        let v = self.fit.gram_solve(&self.fit.restrict(x_row));
        let mut c = Array1::zeros(self.n);
        for local in 0..self.design.nrows() {
            let mut s = 0.0;
            for (k, &j) in self.fit.kept.iter().enumerate() {
                s += self.design[[local, j]] * v[k];
            }
            if let Some(w) = &self.row_weights {
                s *= w[local];
            }
            let global = match &self.rows {
                Some(map) => map[local],
                None => local,
            };
            c[global] = s;
        }
        c
    }
}

fn weight_status<'a, I: IntoIterator<Item = &'a f64>>(weights: I) -> ExtrapolationStatus {
    for &w in weights {
        if w < -NEGATIVE_WEIGHT_TOL {
            return ExtrapolationStatus::Extrapolated;
        }
    }
    ExtrapolationStatus::Interpolated
}

/// Heteroskedasticity-robust standard error of c'Y from implied weights
/// and residuals.
pub fn linear_se(c: &Array1<f64>, residuals: &Array1<f64>) -> f64 {
    c.iter()
        .zip(residuals.iter())
        .map(|(ci, ri)| ci * ci * ri * ri)
        .sum::<f64>()
        .sqrt()
}

/// Standard error of the weighted mean around its own estimate. With
/// uniform weights this equals the classical standard error of the mean
/// times sqrt((n-1)/n). Returns `None` when fewer than two patients carry
/// weight.
pub fn hajek_se(w: &Array1<f64>, y: &[f64], mu: f64) -> Option<f64> {
    let support = w.iter().filter(|&&v| v != 0.0).count();
    if support < 2 {
        return None;
    }
    Some(
        w.iter()
            .zip(y.iter())
            .map(|(&wi, &yi)| wi * wi * (yi - mu) * (yi - mu))
            .sum::<f64>()
            .sqrt(),
    )
}

fn design_with_indicators(d: &Dataset, left: &Array2<f64>) -> Array2<f64> {
    let n = d.n();
    let l = left.ncols();
    let pc = d.practice_count();
    let mut m = Array2::zeros((n, l + pc));
    for i in 0..n {
        for j in 0..l {
            m[[i, j]] = left[[i, j]];
        }
        m[[i, l + d.assignment[i]]] = 1.0;
    }
    m
}

fn profile_row(target: &[f64], width: usize, indicator: usize) -> Array1<f64> {
    let mut row = Array1::zeros(width);
    for (j, &v) in target.iter().enumerate() {
        row[j] = v;
    }
    row[indicator] = 1.0;
    row
}

fn practice_rows_vec(d: &Dataset) -> Vec<Vec<usize>> {
    (0..d.practice_count())
        .map(|p| d.practice_rows(p).to_vec())
        .collect()
}

/// Pooled regression on the balance functions and practice indicators,
/// evaluated at the profile for each practice.
pub fn estimate_fe(
    d: &Dataset,
    profile: &Profile,
    t: &Transform,
    _opts: &EstimateOptions,
) -> Result<EstimateTable, EstimateError> {
    let y = d.outcome_ref()?.clone();
    let (bm, target) = basis_for(d, t, profile)?;
    let l = bm.l();
    let pc = d.practice_count();
    let design = design_with_indicators(d, &bm.values);
    let lf = LinearFit::new(design, &y, None, None, d.n());
    if lf.rank_deficient() {
        log::warn!(
            "pooled design rank deficient; dropped {} column(s)",
            lf.dropped().len()
        );
    }
    let residuals = lf.residuals(&y);
    let cells: Vec<PracticeEstimate> = (0..pc)
        .into_par_iter()
        .map(|p| {
            let row = profile_row(&target, l + pc, l + p);
            let c = lf.implied_weights(&row);
            let est = dot(c.view(), y.view());
            let se = linear_se(&c, &residuals);
            cell(
                &d.practice_labels[p],
                Some(est),
                Some(se),
                weight_status(c.iter()),
                None,
            )
        })
        .collect();
    Ok(finish(Method::Fe, t, profile, cells))
}

/// One regression per practice, evaluated at the profile. Practices whose
/// design is singular abstain (status Infeasible) unless the
/// column-dropping fallback is enabled.
pub fn estimate_mr(
    d: &Dataset,
    profile: &Profile,
    t: &Transform,
    opts: &EstimateOptions,
) -> Result<EstimateTable, EstimateError> {
    let y = d.outcome_ref()?.clone();
    let (bm, target) = basis_for(d, t, profile)?;
    let l = bm.l();
    let cells: Vec<PracticeEstimate> = (0..d.practice_count())
        .into_par_iter()
        .map(|p| {
            let rows = d.practice_rows(p);
            let ip = rows.len();
            let mut design = Array2::zeros((ip, l + 1));
            let mut yp = Array1::zeros(ip);
            for (k, &r) in rows.iter().enumerate() {
                design[[k, 0]] = 1.0;
                for j in 0..l {
                    design[[k, j + 1]] = bm.values[[r, j]];
                }
                yp[k] = y[r];
            }
            let lf = LinearFit::new(design, &yp, None, Some(rows.to_vec()), d.n());
            if lf.rank_deficient() && !opts.mr_pseudoinverse {
                return cell(
                    &d.practice_labels[p],
                    None,
                    None,
                    ExtrapolationStatus::Infeasible,
                    Some("singular design".to_string()),
                );
            }
            let note = if lf.rank_deficient() {
                Some("singular design, dependent columns dropped".to_string())
            } else {
                None
            };
            let mut row = Array1::zeros(l + 1);
            row[0] = 1.0;
            for j in 0..l {
                row[j + 1] = target[j];
            }
            let c = lf.implied_weights(&row);
            let est = dot(c.view(), y.view());
            let rp = lf.residuals(&yp);
            let se = rows
                .iter()
                .enumerate()
                .map(|(k, &r)| c[r] * c[r] * rp[k] * rp[k])
                .sum::<f64>()
                .sqrt();
            cell(
                &d.practice_labels[p],
                Some(est),
                Some(se),
                weight_status(c.iter()),
                note,
            )
        })
        .collect();
    Ok(finish(Method::Mr, t, profile, cells))
}

fn bootstrap_se(
    prob: &SbwProblem,
    yp: &[f64],
    cfg: BootstrapConfig,
    practice: usize,
) -> (Option<f64>, Option<String>) {
    let i = prob.balance.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(practice as u64);
    let mut vals = Vec::with_capacity(cfg.draws);
    let mut failed = 0usize;
    for _ in 0..cfg.draws {
        let idx: Vec<usize> = (0..i).map(|_| rng.gen_range(0..i)).collect();
        let mut balance = Array2::zeros((i, prob.balance.ncols()));
        for (k, &r) in idx.iter().enumerate() {
            for j in 0..prob.balance.ncols() {
                balance[[k, j]] = prob.balance[[r, j]];
            }
        }
        let resampled = SbwProblem {
            balance,
            target: prob.target.clone(),
            delta: prob.delta.clone(),
            nonneg: prob.nonneg,
        };
        match solve_sbw(&resampled) {
            Ok(sol) => match sol.weights {
                Some(w) => {
                    vals.push((0..i).map(|k| w[k] * yp[idx[k]]).sum::<f64>());
                }
                None => failed += 1,
            },
            Err(_) => failed += 1,
        }
    }
    if vals.len() < 2 {
        return (None, Some("bootstrap produced fewer than two solvable resamples".to_string()));
    }
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64;
    let note = if failed > 0 {
        Some(format!("{failed} of {} bootstrap resamples infeasible", cfg.draws))
    } else {
        None
    };
    (Some(var.sqrt()), note)
}

/// Weighted outcome mean per practice with balancing weights toward the
/// profile. With the sign restriction, infeasible practices are left
/// unestimated; without it the estimate may leave the practice's outcome
/// range.
pub fn estimate_sbw(
    d: &Dataset,
    profile: &Profile,
    t: &Transform,
    nonneg: bool,
    opts: &EstimateOptions,
) -> Result<EstimateTable, EstimateError> {
    let y = d.outcome_ref()?.clone();
    let problems = practice_problems(d, profile, t, nonneg, opts.delta_fraction)?;
    let cells: Vec<PracticeEstimate> = problems
        .par_iter()
        .enumerate()
        .map(|(p, prob)| {
            let label = &d.practice_labels[p];
            let sol = match solve_sbw(prob) {
                Ok(sol) => sol,
                Err(e) => {
                    return cell(
                        label,
                        None,
                        None,
                        ExtrapolationStatus::Infeasible,
                        Some(format!("solver failure: {e}")),
                    )
                }
            };
            match sol.weights {
                Some(w) => {
                    let rows = d.practice_rows(p);
                    let yp: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
                    let mu: f64 = w.iter().zip(yp.iter()).map(|(&wi, &yi)| wi * yi).sum();
                    let (se, mut note) = match opts.bootstrap {
                        Some(cfg) => bootstrap_se(prob, &yp, cfg, p),
                        None => (hajek_se(&w, &yp, mu), None),
                    };
                    if se.is_none() && note.is_none() {
                        note = Some("degenerate variance".to_string());
                    }
                    cell(label, Some(mu), se, sol.status, note)
                }
                None => cell(label, None, None, sol.status, sol.reason.clone()),
            }
        })
        .collect();
    let method = if nonneg {
        Method::SbwNonneg
    } else {
        Method::SbwUnrestricted
    };
    Ok(finish(method, t, profile, cells))
}

/// Null partition of the balance functions (rather than the raw
/// covariates) at the given profile, which is what the layered estimators
/// condition on.
pub fn balance_null_partition(
    d: &Dataset,
    profile: &Profile,
    t: &Transform,
) -> Result<NullPartition, EstimateError> {
    let (bm, target) = basis_for(d, t, profile)?;
    Ok(detect_null_functions(
        &bm.values,
        &bm.names,
        &bm.kinds,
        &practice_rows_vec(d),
        &target,
    ))
}

struct Step1 {
    /// Per patient: the weight its own practice's solve assigned it.
    per_patient: Array1<f64>,
    status: Vec<ExtrapolationStatus>,
    notes: Vec<Option<String>>,
}

/// Unrestricted balancing weights per practice over that practice's
/// non-null functions. Practices whose constraints are unsatisfiable fall
/// back to uniform weights with a warning.
fn layered_step1(
    d: &Dataset,
    bm: &crate::transform::BalanceMatrix,
    target: &[f64],
    np: &NullPartition,
    profile: &Profile,
    delta_fraction: f64,
) -> Result<Step1, EstimateError> {
    let rows_opt = crate::solver::backing_rows(profile, d.n());
    let delta = crate::solver::delta_from_sd_fraction(bm, rows_opt.as_deref(), delta_fraction);
    let results: Vec<(Array1<f64>, ExtrapolationStatus, Option<String>)> = (0..d
        .practice_count())
        .into_par_iter()
        .map(|p| {
            let rows = d.practice_rows(p);
            let keep: Vec<usize> = (0..bm.l())
                .filter(|&j| !np.per_practice[p].is_null(j))
                .collect();
            let mut balance = Array2::zeros((rows.len(), keep.len()));
            for (k, &r) in rows.iter().enumerate() {
                for (jj, &j) in keep.iter().enumerate() {
                    balance[[k, jj]] = bm.values[[r, j]];
                }
            }
            let prob = SbwProblem {
                balance,
                target: keep.iter().map(|&j| target[j]).collect(),
                delta: keep.iter().map(|&j| delta[j]).collect(),
                nonneg: false,
            };
            match solve_sbw(&prob) {
                Ok(sol) => match sol.weights {
                    Some(w) => (w, sol.status, None),
                    None => {
                        log::warn!(
                            "practice {}: balance constraints unsatisfiable, using uniform weights",
                            d.practice_labels[p]
                        );
                        (
                            Array1::from_elem(rows.len(), 1.0 / rows.len() as f64),
                            ExtrapolationStatus::Infeasible,
                            Some("unsatisfiable constraints; uniform weights used".to_string()),
                        )
                    }
                },
                Err(e) => {
                    log::warn!("practice {}: solver failure ({e}), using uniform weights",
                        d.practice_labels[p]);
                    (
                        Array1::from_elem(rows.len(), 1.0 / rows.len() as f64),
                        ExtrapolationStatus::Infeasible,
                        Some(format!("solver failure: {e}; uniform weights used")),
                    )
                }
            }
        })
        .collect();
    let mut per_patient = Array1::zeros(d.n());
    let mut status = Vec::with_capacity(results.len());
    let mut notes = Vec::with_capacity(results.len());
    for (p, (w, st, note)) in results.into_iter().enumerate() {
        for (k, &r) in d.practice_rows(p).iter().enumerate() {
            per_patient[r] = w[k];
        }
        status.push(st);
        notes.push(note);
    }
    Ok(Step1 {
        per_patient,
        status,
        notes,
    })
}

/// Balancing weights on each practice's non-null functions, then a pooled
/// regression on the null functions, the weights, and practice indicators.
/// The default profile-corrected prediction adds the null-coefficient
/// correction to the weighted outcome mean; the literal mode averages the
/// pooled fit's fitted values over the practice.
pub fn estimate_layered_fe(
    d: &Dataset,
    profile: &Profile,
    t: &Transform,
    np: &NullPartition,
    opts: &EstimateOptions,
) -> Result<EstimateTable, EstimateError> {
    let y = d.outcome_ref()?.clone();
    let (bm, target) = basis_for(d, t, profile)?;
    let s1 = layered_step1(d, &bm, &target, np, profile, opts.delta_fraction)?;
    let union = np.null_union();
    let u = union.len();
    let n = d.n();
    let mut left = Array2::zeros((n, u + 1));
    for i in 0..n {
        for (jj, &j) in union.iter().enumerate() {
            left[[i, jj]] = bm.values[[i, j]];
        }
        left[[i, u]] = s1.per_patient[i];
    }
    let design = design_with_indicators(d, &left);
    let lf = LinearFit::new(design, &y, None, None, n);
    if lf.rank_deficient() {
        log::warn!(
            "pooled layered design rank deficient; dropped {} column(s)",
            lf.dropped().len()
        );
    }
    let residuals = lf.residuals(&y);
    let pc = d.practice_count();
    let width = u + 1 + pc;
    let cells: Vec<PracticeEstimate> = (0..pc)
        .into_par_iter()
        .map(|p| {
            let rows = d.practice_rows(p);
            let hajek: f64 = rows.iter().map(|&r| s1.per_patient[r] * y[r]).sum();
            let (est, c) = match opts.layered_mode {
                PredictionMode::ProfileCorrected => {
                    // correction row: per null-union function, the gap
                    // between the profile and the weighted practice mean
                    let mut row = Array1::zeros(width);
                    for (jj, &j) in union.iter().enumerate() {
                        let m_pj: f64 =
                            rows.iter().map(|&r| s1.per_patient[r] * bm.values[[r, j]]).sum();
                        row[jj] = target[j] - m_pj;
                    }
                    let mut c = lf.implied_weights(&row);
                    let correction = dot(c.view(), y.view());
                    for &r in rows {
                        c[r] += s1.per_patient[r];
                    }
                    (hajek + correction, c)
                }
                PredictionMode::Literal => {
                    let mut mean_row = Array1::zeros(width);
                    for &r in rows {
                        for (jj, &j) in union.iter().enumerate() {
                            mean_row[jj] += bm.values[[r, j]];
                        }
                        mean_row[u] += s1.per_patient[r];
                    }
                    mean_row.mapv_inplace(|v| v / rows.len() as f64);
                    mean_row[u + 1 + p] = 1.0;
                    let c = lf.implied_weights(&mean_row);
                    (lf.predict(&mean_row), c)
                }
            };
            let se = linear_se(&c, &residuals);
            cell(
                &d.practice_labels[p],
                Some(est),
                Some(se),
                s1.status[p],
                s1.notes[p].clone(),
            )
        })
        .collect();
    Ok(finish(Method::SbwFe, t, profile, cells))
}

/// Balancing weights truncated at zero feeding a pooled weighted
/// regression on the full basis with practice indicators, evaluated at
/// the profile.
pub fn estimate_layered_wr(
    d: &Dataset,
    profile: &Profile,
    t: &Transform,
    np: &NullPartition,
    opts: &EstimateOptions,
) -> Result<EstimateTable, EstimateError> {
    let y = d.outcome_ref()?.clone();
    let (bm, target) = basis_for(d, t, profile)?;
    let s1 = layered_step1(d, &bm, &target, np, profile, opts.delta_fraction)?;
    let mut omega = s1.per_patient.mapv(|v| v.max(0.0));
    let pc = d.practice_count();
    let mut notes: Vec<Option<String>> = s1.notes.clone();
    for p in 0..pc {
        let rows = d.practice_rows(p);
        if rows.iter().all(|&r| omega[r] == 0.0) {
            log::warn!(
                "practice {}: all weights truncated to zero, using uniform weights",
                d.practice_labels[p]
            );
            let w = 1.0 / rows.len() as f64;
            for &r in rows {
                omega[r] = w;
            }
            let msg = "all weights truncated to zero; uniform weights used".to_string();
            notes[p] = Some(match notes[p].take() {
                Some(prev) => format!("{prev}; {msg}"),
                None => msg,
            });
        }
    }
    let l = bm.l();
    let design = design_with_indicators(d, &bm.values);
    let lf = LinearFit::new(design, &y, Some(omega), None, d.n());
    if lf.rank_deficient() {
        log::warn!(
            "pooled weighted design rank deficient; dropped {} column(s)",
            lf.dropped().len()
        );
    }
    let residuals = lf.residuals(&y);
    let cells: Vec<PracticeEstimate> = (0..pc)
        .into_par_iter()
        .map(|p| {
            let row = profile_row(&target, l + pc, l + p);
            let c = lf.implied_weights(&row);
            let est = dot(c.view(), y.view());
            let se = linear_se(&c, &residuals);
            cell(
                &d.practice_labels[p],
                Some(est),
                Some(se),
                weight_status(c.iter()),
                notes[p].clone(),
            )
        })
        .collect();
    Ok(finish(Method::SbwWr, t, profile, cells))
}

/// Runs one method end to end, deriving the null partition when the
/// method needs it.
pub fn estimate(
    d: &Dataset,
    profile: &Profile,
    t: &Transform,
    method: Method,
    opts: &EstimateOptions,
) -> Result<EstimateTable, EstimateError> {
    match method {
        Method::Fe => estimate_fe(d, profile, t, opts),
        Method::Mr => estimate_mr(d, profile, t, opts),
        Method::SbwNonneg => estimate_sbw(d, profile, t, true, opts),
        Method::SbwUnrestricted => estimate_sbw(d, profile, t, false, opts),
        Method::SbwFe => {
            let np = balance_null_partition(d, profile, t)?;
            estimate_layered_fe(d, profile, t, &np, opts)
        }
        Method::SbwWr => {
            let np = balance_null_partition(d, profile, t)?;
            estimate_layered_wr(d, profile, t, &np, opts)
        }
    }
}
