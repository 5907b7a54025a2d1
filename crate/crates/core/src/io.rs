//! File formats and persistence: patient CSV with a sidecar schema,
//! profile files, serialized transforms, artifact writing with a hashed
//! manifest, and the reference fixtures for the oncology case-study
//! layout.
//!
//! Schema, profile, and config files share one flat key-value syntax:
//! one `key = value` pair per line, `#` comments, blank lines ignored.
//! Lines split at the last `=` so covariate names like
//! "Charlson Comorbidity Index (>=3)" stay intact; values therefore must
//! not contain `=`.

use crate::metrics::TransitionMatrix;
use crate::model::{
    build_dataset, ColumnKind, ColumnSpec, Dataset, ModelError, PatientRecord, Profile,
};
use crate::transform::Transform;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: column '{column}': {detail}")]
    Parse {
        path: String,
        line: u64,
        column: String,
        detail: String,
    },
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("duplicate patient id '{0}'")]
    DuplicatePatientId(String),
    #[error("{path}: {detail}")]
    BadFile { path: String, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Splits a flat key-value line at the last `=`; returns None for blank
/// and comment lines.
pub fn split_key_value(line: &str) -> Option<(&str, &str)> {
    let t = line.trim();
    if t.is_empty() || t.starts_with('#') {
        return None;
    }
    let pos = t.rfind('=')?;
    Some((t[..pos].trim_end(), t[pos + 1..].trim_start()))
}

/// Sidecar schema describing a patient CSV: which columns hold the ids
/// and the outcome, and the name and kind of every covariate column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub patient_id: String,
    pub practice_id: String,
    pub outcome: Option<String>,
    pub covariates: Vec<ColumnSpec>,
}

impl CsvSchema {
    pub fn parse(text: &str, path_label: &str) -> Result<CsvSchema, IoError> {
        let mut patient_id = None;
        let mut practice_id = None;
        let mut outcome = None;
        let mut covariates = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let Some((key, value)) = split_key_value(line) else {
                continue;
            };
            if value.contains('=') {
                return Err(IoError::BadFile {
                    path: path_label.to_string(),
                    detail: format!("line {}: value contains '='", lineno + 1),
                });
            }
            match key {
                "patient_id" => patient_id = Some(value.to_string()),
                "practice_id" => practice_id = Some(value.to_string()),
                "outcome" => outcome = Some(value.to_string()),
                other => {
                    if let Some(name) = other.strip_prefix("covariate.") {
                        let kind = match value {
                            "continuous" => ColumnKind::Continuous,
                            "binary" => ColumnKind::Binary,
                            bad => {
                                return Err(IoError::BadFile {
                                    path: path_label.to_string(),
                                    detail: format!(
                                        "line {}: kind '{bad}' is not continuous or binary",
                                        lineno + 1
                                    ),
                                })
                            }
                        };
                        covariates.push(ColumnSpec {
                            name: name.to_string(),
                            kind,
                        });
                    } else {
                        return Err(IoError::BadFile {
                            path: path_label.to_string(),
                            detail: format!("line {}: unknown key '{other}'", lineno + 1),
                        });
                    }
                }
            }
        }
        let patient_id = patient_id.ok_or_else(|| IoError::BadFile {
            path: path_label.to_string(),
            detail: "missing patient_id entry".to_string(),
        })?;
        let practice_id = practice_id.ok_or_else(|| IoError::BadFile {
            path: path_label.to_string(),
            detail: "missing practice_id entry".to_string(),
        })?;
        if covariates.is_empty() {
            return Err(IoError::BadFile {
                path: path_label.to_string(),
                detail: "no covariate entries".to_string(),
            });
        }
        let mut seen = HashSet::new();
        for c in &covariates {
            if !seen.insert(c.name.as_str()) {
                return Err(IoError::SchemaViolation(format!(
                    "covariate '{}' declared twice",
                    c.name
                )));
            }
        }
        Ok(CsvSchema {
            patient_id,
            practice_id,
            outcome,
            covariates,
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "patient_id = {}", self.patient_id);
        let _ = writeln!(out, "practice_id = {}", self.practice_id);
        if let Some(o) = &self.outcome {
            let _ = writeln!(out, "outcome = {o}");
        }
        for c in &self.covariates {
            let kind = match c.kind {
                ColumnKind::Continuous => "continuous",
                ColumnKind::Binary => "binary",
            };
            let _ = writeln!(out, "covariate.{} = {kind}", c.name);
        }
        out
    }

    pub fn read(path: &Path) -> Result<CsvSchema, IoError> {
        let text = fs::read_to_string(path)?;
        CsvSchema::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Schema matching a dataset's own columns, with the default id
    /// column names; used when persisting generated data.
    pub fn for_dataset(d: &Dataset, outcome: Option<&str>) -> CsvSchema {
        CsvSchema {
            patient_id: "patient_id".to_string(),
            practice_id: "practice_id".to_string(),
            outcome: outcome.map(str::to_string),
            covariates: d.columns.clone(),
        }
    }
}

fn parse_cell(
    raw: &str,
    path: &str,
    line: u64,
    column: &str,
) -> Result<f64, IoError> {
    raw.trim().parse::<f64>().map_err(|_| IoError::Parse {
        path: path.to_string(),
        line,
        column: column.to_string(),
        detail: format!("'{raw}' is not a number"),
    })
}

/// Reads a patient CSV against its schema and drops practices below the
/// size floor (0 keeps everything). Logs the practice census.
pub fn read_patients(path: &Path, schema: &CsvSchema, floor: usize) -> Result<Dataset, IoError> {
    let label = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut seen = HashSet::new();
    for h in headers.iter() {
        if !seen.insert(h) {
            return Err(IoError::SchemaViolation(format!(
                "header column '{h}' appears twice"
            )));
        }
    }
    let col_index = |name: &str| -> Result<usize, IoError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| IoError::SchemaViolation(format!("missing column '{name}'")))
    };
    let id_at = col_index(&schema.patient_id)?;
    let practice_at = col_index(&schema.practice_id)?;
    let outcome_at = match &schema.outcome {
        Some(name) => Some(col_index(name)?),
        None => None,
    };
    let cov_at: Vec<usize> = schema
        .covariates
        .iter()
        .map(|c| col_index(&c.name))
        .collect::<Result<_, _>>()?;
    let declared = 2 + usize::from(outcome_at.is_some()) + cov_at.len();
    if headers.len() != declared {
        return Err(IoError::SchemaViolation(format!(
            "{} columns in header but schema declares {declared}",
            headers.len()
        )));
    }

    let mut ids = HashSet::new();
    let mut records = Vec::new();
    for result in reader.records() {
        let record = result?;
        let line = record.position().map_or(0, |p| p.line());
        let patient_id = record[id_at].to_string();
        if !ids.insert(patient_id.clone()) {
            return Err(IoError::DuplicatePatientId(patient_id));
        }
        let outcome = match outcome_at {
            Some(at) => {
                let raw = record[at].trim();
                if raw.is_empty() {
                    None
                } else {
                    Some(parse_cell(
                        raw,
                        &label,
                        line,
                        schema.outcome.as_deref().unwrap_or("outcome"),
                    )?)
                }
            }
            None => None,
        };
        let covariates = schema
            .covariates
            .iter()
            .zip(cov_at.iter())
            .map(|(c, &at)| parse_cell(&record[at], &label, line, &c.name))
            .collect::<Result<Vec<f64>, IoError>>()?;
        records.push(PatientRecord {
            patient_id,
            practice: record[practice_at].to_string(),
            outcome,
            covariates,
        });
    }
    let full = build_dataset(schema.covariates.clone(), records)?;
    log::info!(
        "{label}: {} patients in {} practices",
        full.n(),
        full.practice_count()
    );
    if floor == 0 {
        return Ok(full);
    }
    let kept = full.filter_min_size(floor)?;
    if kept.practice_count() < full.practice_count() {
        let dropped: Vec<String> = full
            .practice_labels
            .iter()
            .enumerate()
            .filter(|(p, _)| full.practice_size(*p) < floor)
            .map(|(p, l)| format!("{l}({})", full.practice_size(p)))
            .collect();
        log::info!(
            "{label}: dropped {} practices below {floor} patients: {}",
            dropped.len(),
            dropped.join(", ")
        );
    }
    Ok(kept)
}

/// Writes a dataset back to CSV under the schema's column names. Floats
/// use the shortest round-trip representation.
pub fn write_patients(d: &Dataset, schema: &CsvSchema, path: &Path) -> Result<(), IoError> {
    let names: Vec<&str> = schema.covariates.iter().map(|c| c.name.as_str()).collect();
    let own: Vec<&str> = d.columns.iter().map(|c| c.name.as_str()).collect();
    if names != own {
        return Err(IoError::SchemaViolation(
            "schema covariates do not match dataset columns".to_string(),
        ));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![schema.patient_id.clone(), schema.practice_id.clone()];
    if let Some(o) = &schema.outcome {
        header.push(o.clone());
    }
    header.extend(names.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for i in 0..d.n() {
        let mut row = vec![
            d.patient_ids[i].clone(),
            d.practice_labels[d.assignment[i]].clone(),
        ];
        if schema.outcome.is_some() {
            match &d.outcome {
                Some(y) => row.push(format!("{}", y[i])),
                None => row.push(String::new()),
            }
        }
        for j in 0..d.k() {
            row.push(format!("{}", d.covariates[[i, j]]));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a profile file: a `profile = <name>` header line followed by
/// `covariate = value` pairs.
pub fn parse_profile_text(
    text: &str,
    path_label: &str,
) -> Result<(String, Vec<(String, f64)>), IoError> {
    let mut name: Option<String> = None;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let Some((key, value)) = split_key_value(line) else {
            continue;
        };
        if name.is_none() {
            if key != "profile" {
                return Err(IoError::BadFile {
                    path: path_label.to_string(),
                    detail: "first entry must be 'profile = <name>'".to_string(),
                });
            }
            name = Some(value.to_string());
            continue;
        }
        let v: f64 = value.parse().map_err(|_| IoError::BadFile {
            path: path_label.to_string(),
            detail: format!("line {}: '{value}' is not a number", lineno + 1),
        })?;
        pairs.push((key.to_string(), v));
    }
    let name = name.ok_or_else(|| IoError::BadFile {
        path: path_label.to_string(),
        detail: "empty profile file".to_string(),
    })?;
    if pairs.is_empty() {
        return Err(IoError::BadFile {
            path: path_label.to_string(),
            detail: "profile has no covariate values".to_string(),
        });
    }
    Ok((name, pairs))
}

/// Reads a profile file and aligns it to the dataset's column order;
/// unknown or missing covariate names are rejected.
pub fn read_profile(path: &Path, d: &Dataset) -> Result<Profile, IoError> {
    let text = fs::read_to_string(path)?;
    let (name, pairs) = parse_profile_text(&text, &path.display().to_string())?;
    profile_from_pairs(&name, &pairs, d)
}

pub fn profile_from_pairs(
    name: &str,
    pairs: &[(String, f64)],
    d: &Dataset,
) -> Result<Profile, IoError> {
    let (names, values): (Vec<String>, Vec<f64>) = pairs.iter().cloned().unzip();
    let raw = Profile::custom(name, names, values);
    let aligned = raw.aligned_values(d)?;
    Ok(Profile::custom(name, d.column_names(), aligned))
}

pub fn profile_to_text(p: &Profile) -> String {
    let mut out = format!("profile = {}\n", p.name);
    for (n, v) in p.names.iter().zip(p.values.iter()) {
        let _ = writeln!(out, "{n} = {v}");
    }
    out
}

pub fn write_profile(p: &Profile, path: &Path) -> Result<(), IoError> {
    fs::write(path, profile_to_text(p))?;
    Ok(())
}

/// CSV export of an estimate table: one row per practice, empty cells
/// where a method abstained.
pub fn estimates_csv(table: &crate::estimate::EstimateTable) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "practice_id",
        "method",
        "basis",
        "profile",
        "estimate",
        "se",
        "ci_lo",
        "ci_hi",
        "status",
        "rank",
        "note",
    ])
    .unwrap();
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for c in &table.practices {
        w.write_record([
            c.practice.clone(),
            table.method.tag().to_string(),
            table.basis.clone(),
            table.profile.clone(),
            fmt(c.estimate),
            fmt(c.se),
            fmt(c.ci.map(|x| x.0)),
            fmt(c.ci.map(|x| x.1)),
            c.status.to_string(),
            c.rank.map_or(String::new(), |r| r.to_string()),
            c.note.clone().unwrap_or_default(),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// CSV export of per-patient weights, one solution per practice in
/// dataset order. Infeasible practices keep their rows with the weight
/// cell empty.
pub fn weights_csv(d: &Dataset, solutions: &[crate::solver::WeightSolution]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["patient_id", "practice_id", "status", "weight"])
        .unwrap();
    for (p, sol) in solutions.iter().enumerate() {
        let rows = d.practice_rows(p);
        for (slot, &r) in rows.iter().enumerate() {
            let weight = sol
                .weights_ref()
                .map_or(String::new(), |wv| format!("{}", wv[slot]));
            w.write_record([
                d.patient_ids[r].clone(),
                d.practice_labels[p].clone(),
                sol.status.to_string(),
                weight,
            ])
            .unwrap();
        }
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

#[derive(Debug, Serialize, Deserialize)]
struct TransformFile {
    version: String,
    transform: Transform,
}

pub fn transform_to_json(t: &Transform) -> String {
    serde_json::to_string_pretty(&TransformFile {
        version: env!("CARGO_PKG_VERSION").to_string(),
        transform: t.clone(),
    })
    .expect("transform serializes")
}

pub fn transform_from_json(s: &str) -> Result<Transform, IoError> {
    let f: TransformFile = serde_json::from_str(s)?;
    Ok(f.transform)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub artifacts: Vec<ManifestEntry>,
}

/// Writes artifacts into a directory and accumulates a manifest with
/// content hashes; `finish` writes `manifest.json` and returns its path.
pub struct ArtifactWriter {
    dir: PathBuf,
    manifest: Manifest,
}

impl ArtifactWriter {
    pub fn new(dir: &Path, command: &str) -> Result<ArtifactWriter, IoError> {
        fs::create_dir_all(dir)?;
        Ok(ArtifactWriter {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                version: env!("CARGO_PKG_VERSION").to_string(),
                command: command.to_string(),
                artifacts: Vec::new(),
            },
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, IoError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        let mut hasher = Sha256::new();
        hasher.update(bytes);
        self.manifest.artifacts.push(ManifestEntry {
            name: name.to_string(),
            sha256: format!("{:x}", hasher.finalize()),
            bytes: bytes.len(),
        });
        Ok(path)
    }

    pub fn finish(mut self) -> Result<PathBuf, IoError> {
        self.manifest
            .artifacts
            .sort_by(|a, b| a.name.cmp(&b.name));
        let path = self.dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(path)
    }
}

pub const REFERENCE_PROFILE_NAMES: [&str; 4] = ["system", "patient1", "patient2", "patient3"];

/// Raw text of a bundled reference profile.
pub fn reference_profile_text(name: &str) -> Option<&'static str> {
    match name {
        "system" => Some(include_str!("../fixtures/system.profile")),
        "patient1" => Some(include_str!("../fixtures/patient1.profile")),
        "patient2" => Some(include_str!("../fixtures/patient2.profile")),
        "patient3" => Some(include_str!("../fixtures/patient3.profile")),
        _ => None,
    }
}

/// Parsed name/value pairs of a bundled reference profile.
pub fn reference_profile(name: &str) -> Option<(String, Vec<(String, f64)>)> {
    let text = reference_profile_text(name)?;
    Some(parse_profile_text(text, name).expect("bundled profile parses"))
}

/// The covariate dictionary of the oncology case-study layout.
pub fn reference_schema() -> CsvSchema {
    CsvSchema::parse(include_str!("../fixtures/oncology.schema"), "oncology.schema")
        .expect("bundled schema parses")
}

/// The bundled 600-practice quintile transition table comparing two
/// patient profiles.
pub fn reference_transition() -> TransitionMatrix {
    let text = include_str!("../fixtures/transition.csv");
    let mut lines = text.lines();
    let header = lines.next().expect("header");
    let edges: Vec<usize> = header
        .split(',')
        .skip(1)
        .map(|h| {
            h.strip_prefix("to_le_")
                .expect("edge header")
                .parse()
                .expect("edge number")
        })
        .collect();
    let counts: Vec<Vec<usize>> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .skip(1)
                .map(|c| c.trim().parse().expect("count"))
                .collect()
        })
        .collect();
    TransitionMatrix::from_counts(counts, edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Provenance;
    use approx::assert_abs_diff_eq;
    use tempfile::tempdir;

    fn toy_schema() -> CsvSchema {
        CsvSchema {
            patient_id: "pid".into(),
            practice_id: "site".into(),
            outcome: Some("y".into()),
            covariates: vec![ColumnSpec::continuous("age"), ColumnSpec::binary("male")],
        }
    }

    fn toy_csv() -> String {
        let mut s = String::from("pid,site,y,age,male\n");
        for i in 0..40 {
            s.push_str(&format!("a{i},A,1.5,{},1\n", 50.0 + i as f64));
        }
        for i in 0..35 {
            s.push_str(&format!("b{i},B,0.5,{},0\n", 60.0 + i as f64));
        }
        for i in 0..10 {
            s.push_str(&format!("c{i},C,1.0,{},1\n", 55.0 + i as f64));
        }
        s
    }

    #[test]
    fn schema_round_trips_including_names_with_equals() {
        let schema = reference_schema();
        assert_eq!(schema.covariates.len(), 24);
        assert_eq!(schema.outcome.as_deref(), Some("survival_1yr"));
        assert!(schema
            .covariates
            .iter()
            .any(|c| c.name == "Charlson Comorbidity Index (>=3)"));
        let reparsed = CsvSchema::parse(&schema.to_text(), "mem").unwrap();
        assert_eq!(reparsed, schema);
    }

    #[test]
    fn min_size_floor_drops_small_practices() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, toy_csv()).unwrap();
        let d = read_patients(&path, &toy_schema(), 30).unwrap();
        assert_eq!(d.practice_count(), 2);
        assert_eq!(d.practice_labels, vec!["A", "B"]);
        let all = read_patients(&path, &toy_schema(), 0).unwrap();
        assert_eq!(all.practice_count(), 3);
    }

    #[test]
    fn malformed_cell_reports_line_and_column() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "pid,site,y,age,male\np1,A,1.0,oops,1\n").unwrap();
        let err = read_patients(&path, &toy_schema(), 0).unwrap_err();
        match err {
            IoError::Parse { line, column, .. } => {
                assert_eq!(line, 2);
                assert_eq!(column, "age");
            }
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_and_headers_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, "pid,site,y,age,male\np1,A,1.0,4,1\np1,A,1.0,5,0\n").unwrap();
        assert!(matches!(
            read_patients(&path, &toy_schema(), 0),
            Err(IoError::DuplicatePatientId(_))
        ));
        fs::write(&path, "pid,site,y,age,age,male\n").unwrap();
        assert!(matches!(
            read_patients(&path, &toy_schema(), 0),
            Err(IoError::SchemaViolation(_))
        ));
        fs::write(&path, "pid,site,y,age,male,extra\n").unwrap();
        assert!(matches!(
            read_patients(&path, &toy_schema(), 0),
            Err(IoError::SchemaViolation(_))
        ));
    }

    #[test]
    fn dataset_round_trips_through_csv() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, toy_csv()).unwrap();
        let schema = toy_schema();
        let d = read_patients(&path, &schema, 0).unwrap();
        let back = dir.path().join("back.csv");
        write_patients(&d, &schema, &back).unwrap();
        let d2 = read_patients(&back, &schema, 0).unwrap();
        assert_eq!(d.covariates, d2.covariates);
        assert_eq!(d.outcome, d2.outcome);
        assert_eq!(d.assignment, d2.assignment);
        assert_eq!(d.patient_ids, d2.patient_ids);
    }

    #[test]
    fn bundled_profiles_parse_with_expected_values() {
        let (name, pairs) = reference_profile("system").unwrap();
        assert_eq!(name, "system");
        assert_eq!(pairs.len(), 24);
        let get = |n: &str| pairs.iter().find(|(k, _)| k == n).unwrap().1;
        assert_abs_diff_eq!(get("Age"), 76.10);
        assert_abs_diff_eq!(get("Race (Black)"), 0.08);
        assert_abs_diff_eq!(get("Cancer stage (4)"), 0.27);
        let (_, p1) = reference_profile("patient1").unwrap();
        assert_abs_diff_eq!(p1.iter().find(|(k, _)| k == "Age").unwrap().1, 70.77);
    }

    #[test]
    fn patient3_differs_from_patient2_only_in_race() {
        let (_, p2) = reference_profile("patient2").unwrap();
        let (_, p3) = reference_profile("patient3").unwrap();
        for ((n2, v2), (n3, v3)) in p2.iter().zip(p3.iter()) {
            assert_eq!(n2, n3);
            if n2.starts_with("Race") {
                continue;
            }
            assert_abs_diff_eq!(v2, v3);
        }
        let get = |pairs: &[(String, f64)], n: &str| {
            pairs.iter().find(|(k, _)| k == n).unwrap().1
        };
        assert_abs_diff_eq!(get(&p2, "Race (White)"), 1.0);
        assert_abs_diff_eq!(get(&p3, "Race (White)"), 0.0);
        assert_abs_diff_eq!(get(&p3, "Race (Black)"), 1.0);
    }

    #[test]
    fn profile_file_round_trips_and_validates_names() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, toy_csv()).unwrap();
        let d = read_patients(&path, &toy_schema(), 0).unwrap();
        let p = Profile {
            name: "test".into(),
            basis: crate::model::ProfileBasis::Raw,
            names: vec!["age".into(), "male".into()],
            values: vec![55.0, 0.4],
            provenance: Provenance::Custom,
        };
        let ppath = dir.path().join("t.profile");
        write_profile(&p, &ppath).unwrap();
        let back = read_profile(&ppath, &d).unwrap();
        assert_eq!(back.values, p.values);
        // unknown name rejected
        fs::write(&ppath, "profile = bad\nage = 55\nnope = 1\n").unwrap();
        assert!(read_profile(&ppath, &d).is_err());
        // profile in shuffled order aligns to dataset order
        fs::write(&ppath, "profile = shuffled\nmale = 0.5\nage = 51\n").unwrap();
        let shuffled = read_profile(&ppath, &d).unwrap();
        assert_eq!(shuffled.names, vec!["age".to_string(), "male".to_string()]);
        assert_eq!(shuffled.values, vec![51.0, 0.5]);
    }

    #[test]
    fn reference_transition_matches_published_churn() {
        let m = reference_transition();
        assert_eq!(m.total(), 600);
        assert_eq!(m.edges, vec![120, 240, 361, 480, 600]);
        let churn = m.churn();
        assert_eq!(churn.same, 176);
        assert_eq!(churn.one_bin, 215);
        assert_eq!(churn.two_plus, 209);
        assert_eq!(churn.corner, 42);
        assert_eq!(crate::metrics::percent(churn.same, churn.total), "29.3%");
        assert_eq!(crate::metrics::percent(churn.one_bin, churn.total), "35.8%");
    }

    #[test]
    fn manifest_hashes_are_deterministic() {
        let dir = tempdir().unwrap();
        let run = |sub: &str| {
            let mut w = ArtifactWriter::new(&dir.path().join(sub), "cmd --flag").unwrap();
            w.write("b.csv", b"x,y\n1,2\n").unwrap();
            w.write("a.csv", b"hello\n").unwrap();
            let mpath = w.finish().unwrap();
            fs::read_to_string(mpath).unwrap()
        };
        let m1 = run("one");
        let m2 = run("two");
        assert_eq!(m1, m2);
        let m: Manifest = serde_json::from_str(&m1).unwrap();
        assert_eq!(m.artifacts.len(), 2);
        // sorted by name in the manifest
        assert_eq!(m.artifacts[0].name, "a.csv");
        assert!(m.artifacts.iter().all(|a| a.sha256.len() == 64));
    }

    #[test]
    fn transform_json_round_trips() {
        use crate::transform::{fit_transform, TransformMode};
        let dir = tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, toy_csv()).unwrap();
        let d = read_patients(&path, &toy_schema(), 0).unwrap();
        let t = fit_transform(&d, TransformMode::PcAugmented, 0.8).unwrap();
        let json = transform_to_json(&t);
        let back = transform_from_json(&json).unwrap();
        assert_eq!(back.mode, t.mode);
        assert_eq!(back.loadings, t.loadings);
        assert_eq!(back.m, t.m);
    }

    #[test]
    fn estimates_csv_leaves_missing_cells_empty() {
        use crate::estimate::{EstimateTable, Method, PracticeEstimate};
        use crate::model::ExtrapolationStatus;
        let table = EstimateTable {
            method: Method::SbwNonneg,
            basis: "X".into(),
            profile: "system".into(),
            practices: vec![
                PracticeEstimate {
                    practice: "A".into(),
                    estimate: Some(1.25),
                    se: Some(0.5),
                    ci: Some((0.27, 2.23)),
                    status: ExtrapolationStatus::Interpolated,
                    rank: Some(1),
                    note: None,
                },
                PracticeEstimate {
                    practice: "B".into(),
                    estimate: None,
                    se: None,
                    ci: None,
                    status: ExtrapolationStatus::Infeasible,
                    rank: None,
                    note: Some("no feasible weights, profile outside support".into()),
                },
            ],
        };
        let csv = estimates_csv(&table);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("A,SBW,X,system,1.25,0.5,0.27,2.23,interpolated,1,"));
        assert!(lines[2].contains("B,SBW,X,system,,,,,infeasible,,"));
        // a note containing a comma gets quoted
        assert!(lines[2].contains("\"no feasible weights, profile outside support\""));
    }
}
