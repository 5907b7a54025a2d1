//! Patient-level data model: datasets grouped by practice, covariate
//! profiles to standardize to, and the practice-level feasibility states.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;
use thiserror::Error;

/// Tolerance below which a weight is not considered negative.
pub const NEGATIVE_WEIGHT_TOL: f64 = 1e-12;

/// Absolute tolerance for constancy of binary columns; continuous columns
/// scale this by the full-dataset column standard deviation.
pub const NULL_CONSTANT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

impl ColumnSpec {
    pub fn continuous(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: ColumnKind::Continuous,
        }
    }
    pub fn binary(name: &str) -> Self {
        Self {
            name: name.to_string(),
            kind: ColumnKind::Binary,
        }
    }
}

/// One patient row before assembly into a [`Dataset`].
#[derive(Debug, Clone)]
pub struct PatientRecord {
    pub patient_id: String,
    pub practice: String,
    pub outcome: Option<f64>,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("record {row} has {got} covariates, expected {expected}")]
    MissingColumn {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-binary value {value} in binary column '{column}' at record {row}")]
    NonBinaryValue {
        column: String,
        row: usize,
        value: f64,
    },
    #[error("dataset has no patients")]
    EmptyDataset,
    #[error("practice '{label}' has no patients")]
    EmptyPractice { label: String },
    #[error("some records have outcomes and others do not")]
    PartialOutcomes,
    #[error("dataset has no outcome column")]
    MissingOutcome,
    #[error("profile names do not match dataset covariates: {detail}")]
    ProfileMismatch { detail: String },
    #[error("binary covariate '{column}' has profile value {value} outside [0, 1]")]
    ProfileValueOutOfRange { column: String, value: f64 },
}

/// Orders practice labels numerically when both parse as integers,
/// numeric before non-numeric otherwise, and lexicographically within
/// the non-numeric group.
pub fn practice_label_cmp(a: &str, b: &str) -> Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// A patient-level dataset grouped into practices.
///
/// Practices are indexed densely in ascending label order; `assignment`
/// maps each row to its practice index.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub columns: Vec<ColumnSpec>,
    pub covariates: Array2<f64>,
    pub outcome: Option<Array1<f64>>,
    pub patient_ids: Vec<String>,
    pub practice_labels: Vec<String>,
    pub assignment: Vec<usize>,
    practice_rows: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn k(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn practice_count(&self) -> usize {
        self.practice_labels.len()
    }

    pub fn practice_rows(&self, p: usize) -> &[usize] {
        &self.practice_rows[p]
    }

    pub fn practice_size(&self, p: usize) -> usize {
        self.practice_rows[p].len()
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn outcome_ref(&self) -> Result<&Array1<f64>, ModelError> {
        self.outcome.as_ref().ok_or(ModelError::MissingOutcome)
    }

    /// Sample standard deviation of each covariate over the full dataset.
    pub fn column_sds(&self) -> Array1<f64> {
        let n = self.n() as f64;
        let mut out = Array1::zeros(self.k());
        for j in 0..self.k() {
            let col = self.covariates.column(j);
            let mean = col.sum() / n;
            let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            out[j] = if n > 1.0 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
        }
        out
    }

    /// Drops practices with fewer than `floor` patients, reindexing the rest.
    pub fn filter_min_size(&self, floor: usize) -> Result<Dataset, ModelError> {
        let keep: Vec<usize> = (0..self.practice_count())
            .filter(|&p| self.practice_size(p) >= floor)
            .collect();
        if keep.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let rows: Vec<usize> = keep
            .iter()
            .flat_map(|&p| self.practice_rows(p).iter().copied())
            .collect();
        let columns = self.columns.clone();
        let records: Vec<PatientRecord> = rows
            .iter()
            .map(|&r| PatientRecord {
                patient_id: self.patient_ids[r].clone(),
                practice: self.practice_labels[self.assignment[r]].clone(),
                outcome: self.outcome.as_ref().map(|y| y[r]),
                covariates: self.covariates.row(r).to_vec(),
            })
            .collect();
        build_dataset(columns, records)
    }
}

/// Assembles a dataset from per-patient records, validating binary columns
/// and grouping rows by practice in ascending label order.
pub fn build_dataset(
    columns: Vec<ColumnSpec>,
    records: Vec<PatientRecord>,
) -> Result<Dataset, ModelError> {
    if records.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let k = columns.len();
    let n = records.len();
    let mut covariates = Array2::zeros((n, k));
    for (i, rec) in records.iter().enumerate() {
        if rec.covariates.len() != k {
            return Err(ModelError::MissingColumn {
                row: i,
                got: rec.covariates.len(),
                expected: k,
            });
        }
        for (j, (&v, spec)) in rec.covariates.iter().zip(columns.iter()).enumerate() {
            if spec.kind == ColumnKind::Binary && v != 0.0 && v != 1.0 {
                return Err(ModelError::NonBinaryValue {
                    column: spec.name.clone(),
                    row: i,
                    value: v,
                });
            }
            covariates[[i, j]] = v;
        }
    }
    let with_outcome = records.iter().filter(|r| r.outcome.is_some()).count();
    let outcome = if with_outcome == n {
        Some(Array1::from_iter(
            records.iter().map(|r| r.outcome.unwrap()),
        ))
    } else if with_outcome == 0 {
        None
    } else {
        return Err(ModelError::PartialOutcomes);
    };

    let mut by_label: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, rec) in records.iter().enumerate() {
        by_label.entry(rec.practice.clone()).or_default().push(i);
    }
    let mut labels: Vec<String> = by_label.keys().cloned().collect();
    labels.sort_by(|a, b| practice_label_cmp(a, b));
    let mut practice_rows = Vec::with_capacity(labels.len());
    let mut assignment = vec![0usize; n];
    for (p, label) in labels.iter().enumerate() {
        let rows = by_label.remove(label).unwrap();
        if rows.is_empty() {
            return Err(ModelError::EmptyPractice {
                label: label.clone(),
            });
        }
        for &r in &rows {
            assignment[r] = p;
        }
        practice_rows.push(rows);
    }
    Ok(Dataset {
        columns,
        covariates,
        outcome,
        patient_ids: records.into_iter().map(|r| r.patient_id).collect(),
        practice_labels: labels,
        assignment,
        practice_rows,
    })
}

/// Where a profile's values came from; mappings into derived bases need
/// the underlying rows, so the provenance is kept with the profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    /// Mean over every patient in the dataset.
    SystemMean,
    /// Mean over an explicit row subset (for example one practice).
    SampleMean { rows: Vec<usize> },
    /// A single patient row.
    Patient { row: usize },
    /// Free-standing values with no backing rows.
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileBasis {
    Raw,
    Transformed,
}

/// A named covariate profile: the point (or population summary) that every
/// practice's outcome is standardized to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub basis: ProfileBasis,
    pub names: Vec<String>,
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

impl Profile {
    pub fn custom(name: &str, names: Vec<String>, values: Vec<f64>) -> Self {
        Profile {
            name: name.to_string(),
            basis: ProfileBasis::Raw,
            names,
            values,
            provenance: Provenance::Custom,
        }
    }

    pub fn value(&self, column: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == column)
            .map(|i| self.values[i])
    }

    /// Checks that the profile covers exactly the dataset's covariates (in
    /// any order) and that binary values lie in [0, 1]. Returns the values
    /// reordered to the dataset's column order.
    pub fn aligned_values(&self, d: &Dataset) -> Result<Vec<f64>, ModelError> {
        if self.basis != ProfileBasis::Raw {
            return Err(ModelError::ProfileMismatch {
                detail: "expected a raw-basis profile".to_string(),
            });
        }
        let mut out = Vec::with_capacity(d.k());
        for spec in &d.columns {
            let v = self
                .value(&spec.name)
                .ok_or_else(|| ModelError::ProfileMismatch {
                    detail: format!("missing covariate '{}'", spec.name),
                })?;
            if spec.kind == ColumnKind::Binary && !(0.0..=1.0).contains(&v) {
                return Err(ModelError::ProfileValueOutOfRange {
                    column: spec.name.clone(),
                    value: v,
                });
            }
            out.push(v);
        }
        if self.names.len() != d.k() {
            return Err(ModelError::ProfileMismatch {
                detail: format!(
                    "profile has {} entries, dataset has {} covariates",
                    self.names.len(),
                    d.k()
                ),
            });
        }
        Ok(out)
    }
}

/// Mean of every covariate over all patients.
pub fn system_profile(d: &Dataset) -> Profile {
    let n = d.n() as f64;
    let values = (0..d.k()).map(|j| d.covariates.column(j).sum() / n).collect();
    Profile {
        name: "system".to_string(),
        basis: ProfileBasis::Raw,
        names: d.column_names(),
        values,
        provenance: Provenance::SystemMean,
    }
}

/// Mean of every covariate over an explicit row subset.
pub fn sample_profile(d: &Dataset, name: &str, rows: Vec<usize>) -> Result<Profile, ModelError> {
    if rows.is_empty() {
        return Err(ModelError::EmptyPractice {
            label: name.to_string(),
        });
    }
    let m = rows.len() as f64;
    let values = (0..d.k())
        .map(|j| rows.iter().map(|&r| d.covariates[[r, j]]).sum::<f64>() / m)
        .collect();
    Ok(Profile {
        name: name.to_string(),
        basis: ProfileBasis::Raw,
        names: d.column_names(),
        values,
        provenance: Provenance::SampleMean { rows },
    })
}

/// The covariate row of a single patient.
pub fn patient_profile(d: &Dataset, name: &str, row: usize) -> Profile {
    Profile {
        name: name.to_string(),
        basis: ProfileBasis::Raw,
        names: d.column_names(),
        values: d.covariates.row(row).to_vec(),
        provenance: Provenance::Patient { row },
    }
}

/// Practice-level status of an estimate relative to the profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtrapolationStatus {
    /// Weights (explicit or implied) are all nonnegative.
    Interpolated,
    /// Some weight is negative: the estimate leaves the practice's support.
    Extrapolated,
    /// No weights satisfying the constraints exist; no estimate.
    Infeasible,
}

impl std::fmt::Display for ExtrapolationStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ExtrapolationStatus::Interpolated => "interpolated",
            ExtrapolationStatus::Extrapolated => "extrapolated",
            ExtrapolationStatus::Infeasible => "infeasible",
        };
        f.write_str(s)
    }
}

/// Per-practice null functions: columns constant within the practice at a
/// value different from the target.
#[derive(Debug, Clone, Default)]
pub struct PracticeNulls {
    /// Indices into the function list, ascending.
    pub null: Vec<usize>,
    /// The constant value the practice sits at, parallel to `null`.
    pub constants: Vec<f64>,
}

impl PracticeNulls {
    pub fn is_null(&self, function: usize) -> bool {
        self.null.binary_search(&function).is_ok()
    }
}

#[derive(Debug, Clone)]
pub struct NullPartition {
    pub function_names: Vec<String>,
    pub per_practice: Vec<PracticeNulls>,
    /// Per function: number of practices where it is null.
    pub census: Vec<usize>,
}

impl NullPartition {
    /// Functions that are null for at least one practice, ascending.
    pub fn null_union(&self) -> Vec<usize> {
        (0..self.census.len()).filter(|&j| self.census[j] > 0).collect()
    }
}

/// Detects null functions for each practice over an arbitrary named column
/// matrix. A function is null for a practice when it is constant within the
/// practice (tolerance 1e-9 for binary columns, 1e-9 times the full-dataset
/// column standard deviation for continuous ones) at a value that differs
/// from the target by more than the same tolerance.
pub fn detect_null_functions(
    values: &Array2<f64>,
    names: &[String],
    kinds: &[ColumnKind],
    practice_rows: &[Vec<usize>],
    targets: &[f64],
) -> NullPartition {
    let l = names.len();
    assert_eq!(values.ncols(), l);
    assert_eq!(kinds.len(), l);
    assert_eq!(targets.len(), l);
    let n = values.nrows() as f64;
    let mut tol = vec![NULL_CONSTANT_TOL; l];
    for j in 0..l {
        if kinds[j] == ColumnKind::Continuous {
            let col = values.column(j);
            let mean = col.sum() / n;
            let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            let sd = if n > 1.0 { (ss / (n - 1.0)).sqrt() } else { 0.0 };
            tol[j] = NULL_CONSTANT_TOL * sd;
        }
    }
    let mut per_practice = Vec::with_capacity(practice_rows.len());
    let mut census = vec![0usize; l];
    for rows in practice_rows {
        let mut nulls = PracticeNulls::default();
        for j in 0..l {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &r in rows {
                let v = values[[r, j]];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo <= tol[j] && (lo - targets[j]).abs() > tol[j] {
                nulls.null.push(j);
                nulls.constants.push(lo);
                census[j] += 1;
            }
        }
        per_practice.push(nulls);
    }
    NullPartition {
        function_names: names.to_vec(),
        per_practice,
        census,
    }
}

/// Null-covariate detection on the raw covariates of a dataset.
pub fn detect_null_covariates(d: &Dataset, profile: &Profile) -> Result<NullPartition, ModelError> {
    let targets = profile.aligned_values(d)?;
    let kinds: Vec<ColumnKind> = d.columns.iter().map(|c| c.kind).collect();
    let practice_rows: Vec<Vec<usize>> = (0..d.practice_count())
        .map(|p| d.practice_rows(p).to_vec())
        .collect();
    Ok(detect_null_functions(
        &d.covariates,
        &d.column_names(),
        &kinds,
        &practice_rows,
        &targets,
    ))
}
