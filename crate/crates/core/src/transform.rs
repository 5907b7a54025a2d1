//! Covariate transform: principal components of the standardized
//! covariates, retained up to a cumulative explained-variance threshold,
//! and the balance-function bases built from them.
//!
//! Three bases are supported:
//! * `Raw` passes the covariates through unchanged.
//! * `PcAugmented` appends the retained component scores.
//! * `PcSecondMoment` additionally appends squares and pairwise products of
//!   the retained scores, so balancing the basis controls the second
//!   moments of the component scores as well as their means.

use crate::linalg;
use crate::model::{ColumnKind, ColumnSpec, Dataset, ModelError, Profile, ProfileBasis, Provenance};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.8;

/// Slack applied when comparing cumulative explained variance to the
/// threshold, so exact ties (e.g. 8 of 10 equal eigenvalues at 0.8) are
/// not lost to rounding.
const THRESHOLD_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformMode {
    Raw,
    PcAugmented,
    PcSecondMoment,
}

impl std::fmt::Display for TransformMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TransformMode::Raw => "raw",
            TransformMode::PcAugmented => "pc-augmented",
            TransformMode::PcSecondMoment => "pc-second-moment",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("need more rows than covariates for the component fit (n={n}, k={k})")]
    TooFewRows { n: usize, k: usize },
    #[error("all covariates have zero variance")]
    DegenerateCovariance,
    #[error("variance threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("dataset columns do not match the fitted transform")]
    ColumnMismatch,
    #[error("profile '{0}' has no backing rows; second-moment targets are undefined for it")]
    TargetUnavailable(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A fitted covariate transform. Serializable so a fit on one dataset can
/// be applied to later ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Transform {
    pub mode: TransformMode,
    pub threshold: f64,
    pub columns: Vec<ColumnSpec>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    /// Covariate indices that entered the component fit (positive variance).
    pub used: Vec<usize>,
    /// Names of zero-variance covariates excluded from the fit.
    pub zero_variance: Vec<String>,
    /// Orthonormal loadings, `used.len()` rows by `m` columns.
    pub loadings: Vec<Vec<f64>>,
    /// Explained-variance ratios for all components, descending.
    pub explained: Vec<f64>,
    /// Number of retained components.
    pub m: usize,
}

impl Transform {
    pub fn retained(&self) -> usize {
        self.m
    }

    fn check_columns(&self, d: &Dataset) -> Result<(), TransformError> {
        if self.columns == d.columns {
            Ok(())
        } else {
            Err(TransformError::ColumnMismatch)
        }
    }

    /// Component scores for one raw covariate row.
    pub fn score_row(&self, row: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.m];
        for (ui, &j) in self.used.iter().enumerate() {
            let s = (row[j] - self.means[j]) / self.sds[j];
            for (c, zc) in z.iter_mut().enumerate() {
                *zc += s * self.loadings[ui][c];
            }
        }
        z
    }

    /// Component scores for every row of a dataset.
    pub fn scores(&self, d: &Dataset) -> Result<Array2<f64>, TransformError> {
        self.check_columns(d)?;
        let n = d.n();
        let mut out = Array2::zeros((n, self.m));
        let mut buf = vec![0.0; d.k()];
        for i in 0..n {
            for j in 0..d.k() {
                buf[j] = d.covariates[[i, j]];
            }
            let z = self.score_row(&buf);
            for c in 0..self.m {
                out[[i, c]] = z[c];
            }
        }
        Ok(out)
    }

    /// Names of the balance functions this transform produces, in order.
    pub fn function_names(&self, d: &Dataset) -> Vec<String> {
        let mut names = d.column_names();
        if matches!(
            self.mode,
            TransformMode::PcAugmented | TransformMode::PcSecondMoment
        ) {
            for c in 0..self.m {
                names.push(format!("pc{}", c + 1));
            }
        }
        if self.mode == TransformMode::PcSecondMoment {
            for a in 0..self.m {
                for b in a..self.m {
                    names.push(format!("pc{}*pc{}", a + 1, b + 1));
                }
            }
        }
        names
    }

    /// Column kinds for the balance functions (derived columns are
    /// continuous).
    pub fn function_kinds(&self, d: &Dataset) -> Vec<ColumnKind> {
        let mut kinds: Vec<ColumnKind> = d.columns.iter().map(|c| c.kind).collect();
        let extra = self.function_names(d).len() - kinds.len();
        kinds.extend(std::iter::repeat(ColumnKind::Continuous).take(extra));
        kinds
    }
}

/// The balance-function matrix for a dataset under a fitted transform.
#[derive(Debug, Clone)]
pub struct BalanceMatrix {
    pub names: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    pub values: Array2<f64>,
}

impl BalanceMatrix {
    pub fn l(&self) -> usize {
        self.names.len()
    }
}

/// Fits the transform on a dataset: standardizes each positive-variance
/// covariate, eigendecomposes the resulting correlation matrix, and keeps
/// the smallest number of leading components whose cumulative explained
/// variance reaches the threshold. Each loading vector is oriented so its
/// largest-magnitude entry is positive.
pub fn fit_transform(
    d: &Dataset,
    mode: TransformMode,
    threshold: f64,
) -> Result<Transform, TransformError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(TransformError::InvalidThreshold(threshold));
    }
    let n = d.n();
    let k = d.k();
    let means: Vec<f64> = (0..k)
        .map(|j| d.covariates.column(j).sum() / n as f64)
        .collect();
    let sds: Vec<f64> = (0..k)
        .map(|j| {
            let col = d.covariates.column(j);
            let ss: f64 = col.iter().map(|v| (v - means[j]) * (v - means[j])).sum();
            if n > 1 {
                (ss / (n as f64 - 1.0)).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let used: Vec<usize> = (0..k).filter(|&j| sds[j] > 0.0).collect();
    let zero_variance: Vec<String> = (0..k)
        .filter(|&j| sds[j] == 0.0)
        .map(|j| d.columns[j].name.clone())
        .collect();
    if mode == TransformMode::Raw {
        return Ok(Transform {
            mode,
            threshold,
            columns: d.columns.clone(),
            means,
            sds,
            used,
            zero_variance,
            loadings: Vec::new(),
            explained: Vec::new(),
            m: 0,
        });
    }
    if n <= k {
        return Err(TransformError::TooFewRows { n, k });
    }
    if used.is_empty() {
        return Err(TransformError::DegenerateCovariance);
    }
    if !zero_variance.is_empty() {
        log::warn!(
            "excluding zero-variance covariates from the component fit: {}",
            zero_variance.join(", ")
        );
    }
    let ku = used.len();
    let mut std_mat = Array2::zeros((n, ku));
    for (uj, &j) in used.iter().enumerate() {
        for i in 0..n {
            std_mat[[i, uj]] = (d.covariates[[i, j]] - means[j]) / sds[j];
        }
    }
    let corr = std_mat.t().dot(&std_mat) / (n as f64 - 1.0);
    let (vals, vecs) = linalg::sym_eigen(&corr);
    let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    if total <= 0.0 {
        return Err(TransformError::DegenerateCovariance);
    }
    let explained: Vec<f64> = vals.iter().map(|v| v.max(0.0) / total).collect();
    let mut m = ku;
    let mut cum = 0.0;
    for (i, r) in explained.iter().enumerate() {
        cum += r;
        if cum >= threshold - THRESHOLD_SLACK {
            m = i + 1;
            break;
        }
    }
    let mut loadings = vec![vec![0.0; m]; ku];
    for c in 0..m {
        // orient: largest-magnitude entry positive
        let mut arg = 0;
        let mut best = 0.0_f64;
        for r in 0..ku {
            if vecs[[r, c]].abs() > best {
                best = vecs[[r, c]].abs();
                arg = r;
            }
        }
        let flip = if vecs[[arg, c]] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..ku {
            loadings[r][c] = flip * vecs[[r, c]];
        }
    }
    Ok(Transform {
        mode,
        threshold,
        columns: d.columns.clone(),
        means,
        sds,
        used,
        zero_variance,
        loadings,
        explained,
        m,
    })
}

/// Builds the balance-function matrix for a dataset under a fitted
/// transform.
pub fn balance_functions(d: &Dataset, t: &Transform) -> Result<BalanceMatrix, TransformError> {
    t.check_columns(d)?;
    let names = t.function_names(d);
    let kinds = t.function_kinds(d);
    let n = d.n();
    let l = names.len();
    let mut values = Array2::zeros((n, l));
    for i in 0..n {
        for j in 0..d.k() {
            values[[i, j]] = d.covariates[[i, j]];
        }
    }
    if matches!(
        t.mode,
        TransformMode::PcAugmented | TransformMode::PcSecondMoment
    ) {
        let scores = t.scores(d)?;
        for i in 0..n {
            for c in 0..t.m {
                values[[i, d.k() + c]] = scores[[i, c]];
            }
        }
        if t.mode == TransformMode::PcSecondMoment {
            let mut col = d.k() + t.m;
            for a in 0..t.m {
                for b in a..t.m {
                    for i in 0..n {
                        values[[i, col]] = scores[[i, a]] * scores[[i, b]];
                    }
                    col += 1;
                }
            }
        }
    }
    Ok(BalanceMatrix {
        names,
        kinds,
        values,
    })
}

/// Maps a raw-basis profile into the transform's balance-function basis by
/// applying the identical mapping to the profile's backing rows and
/// averaging (or to the single patient row). Profiles without backing rows
/// can carry linear component targets but have no second moments, so they
/// are rejected in `PcSecondMoment` mode.
pub fn transformed_profile(
    t: &Transform,
    d: &Dataset,
    profile: &Profile,
) -> Result<Profile, TransformError> {
    t.check_columns(d)?;
    let raw = profile.aligned_values(d)?;
    let names = t.function_names(d);
    let mut values = raw.clone();
    if t.mode == TransformMode::Raw {
        return Ok(Profile {
            name: profile.name.clone(),
            basis: ProfileBasis::Transformed,
            names,
            values,
            provenance: profile.provenance.clone(),
        });
    }
    let rows: Option<Vec<usize>> = match &profile.provenance {
        Provenance::SystemMean => Some((0..d.n()).collect()),
        Provenance::SampleMean { rows } => Some(rows.clone()),
        Provenance::Patient { row } => Some(vec![*row]),
        Provenance::Custom => None,
    };
    match rows {
        Some(rows) => {
            let m = rows.len() as f64;
            let scores: Vec<Vec<f64>> = rows
                .iter()
                .map(|&r| t.score_row(&d.covariates.row(r).to_vec()))
                .collect();
            for c in 0..t.m {
                values.push(scores.iter().map(|z| z[c]).sum::<f64>() / m);
            }
            if t.mode == TransformMode::PcSecondMoment {
                for a in 0..t.m {
                    for b in a..t.m {
                        values.push(scores.iter().map(|z| z[a] * z[b]).sum::<f64>() / m);
                    }
                }
            }
        }
        None => {
            if t.mode == TransformMode::PcSecondMoment {
                return Err(TransformError::TargetUnavailable(profile.name.clone()));
            }
            let z = t.score_row(&raw);
            values.extend_from_slice(&z);
        }
    }
    Ok(Profile {
        name: profile.name.clone(),
        basis: ProfileBasis::Transformed,
        names,
        values,
        provenance: profile.provenance.clone(),
    })
}

/// Fits a transform and returns both the balance functions and the profile
/// mapped into the same basis.
pub fn basis_for(
    d: &Dataset,
    t: &Transform,
    profile: &Profile,
) -> Result<(BalanceMatrix, Vec<f64>), TransformError> {
    let b = balance_functions(d, t)?;
    let tp = transformed_profile(t, d, profile)?;
    Ok((b, tp.values))
}
