//! Batch command line for case-mix adjusted provider profiling.
//!
//! Subcommands cover the whole pipeline: `simulate` runs the replication
//! study, `estimate` scores one dataset against a profile, `rank`
//! compares two estimate tables, `balance` reports covariate balance of
//! the fitted weights, and `map` classifies practices by extrapolation
//! status across profiles.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error. On
//! failure a JSON error record goes to stderr. A `--config` file in flat
//! `key = value` syntax can supply any long flag; explicit flags win.

use casemix::{
    balance_table, basis_for, classify_practices, estimate, estimates_csv,
    fit_transform, parse_profile_text, practice_weight_solutions, profile_from_pairs, ranks_of,
    read_patients, read_profile, reference_profile_text, reference_schema, reference_transition,
    run_study, summarize_study, summarize_study_common_support, system_profile, transform_to_json,
    weights_csv, ArtifactWriter,
    BootstrapConfig, CsvSchema, Dataset, EstimateOptions, EstimateTable, ExtrapolationStatus,
    Method, MetricsReport, PredictionMode, Profile, SimConfig, StatusGrid, StudyResult,
    StudySpec, TargetKind, TransformMode, DEFAULT_VARIANCE_THRESHOLD,
};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Debug)]
enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}

runtime_from!(
    casemix::IoError,
    casemix::EstimateError,
    casemix::SolverError,
    casemix::TransformError,
    casemix::ModelError,
    casemix::MetricsError,
    std::io::Error
);

impl From<casemix::SimError> for CliError {
    fn from(e: casemix::SimError) -> Self {
        // generation-config problems are user errors
        use casemix::SimError::*;
        match e {
            BadSetting(_) | BadCovariateCount(_) | TooFewPatients { .. } | NoReplicates
            | Formula(_) => CliError::Config(e.to_string()),
            Model(m) => CliError::Runtime(m.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "casemix", version, about = "Case-mix adjusted provider profiling")]
struct Cli {
    /// Flat key-value file supplying defaults for any long flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Artifact directory (default: $CASEMIX_OUT_DIR/<subcommand> or
    /// out/<subcommand>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the seeded replication study and write a metrics report.
    Simulate(SimulateArgs),
    /// Estimate practice quality for one dataset against a profile.
    Estimate(EstimateArgs),
    /// Compare the rankings implied by two estimate tables.
    Rank(RankArgs),
    /// Covariate balance of the fitted weights, before and after.
    Balance(BalanceArgs),
    /// Extrapolation-status grid of practices across profiles.
    Map(MapArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Outcome model 1-4.
    #[arg(long)]
    setting: Option<u8>,
    /// Covariate design: 10 or 30.
    #[arg(long)]
    covariates: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    practices: Option<usize>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma list of targets: system, smallest, largest.
    #[arg(long)]
    targets: Option<String>,
    /// Comma list of method[:basis] pairs, e.g. "mr:x,sbw:x,sbw-wr:xt".
    #[arg(long)]
    methods: Option<String>,
    /// Balance-band half-width as a fraction of each function's sd.
    #[arg(long)]
    delta: Option<f64>,
    /// Explained-variance threshold of the transformed basis.
    #[arg(long)]
    threshold: Option<f64>,
    /// Replacement noiseless-outcome formula for setting 3.
    #[arg(long)]
    formula: Option<String>,
    /// Layered prediction mode: profile-corrected or literal.
    #[arg(long)]
    prediction: Option<String>,
    #[arg(long)]
    mr_pseudoinverse: bool,
    /// Write per-cell raw estimates.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct EstimateArgs {
    /// Patient CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sidecar schema (default: the bundled oncology dictionary).
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Profile: a file path, "data:system", or "ref:<name>" for a
    /// bundled profile.
    #[arg(long)]
    profile: Option<String>,
    /// fe | mr | sbw | sbw-r | sbw-fe | sbw-wr.
    #[arg(long)]
    method: Option<String>,
    /// x (raw covariates) | xt (adds component scores and their second
    /// moments) | pc-augmented (scores only).
    #[arg(long)]
    basis: Option<String>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Practices smaller than this are dropped.
    #[arg(long)]
    min_size: Option<usize>,
    #[arg(long)]
    prediction: Option<String>,
    #[arg(long)]
    mr_pseudoinverse: bool,
    /// Within-practice bootstrap draws for weighting-method SEs.
    #[arg(long)]
    bootstrap: Option<usize>,
    #[arg(long)]
    bootstrap_seed: Option<u64>,
    /// Also export per-patient weights (weighting methods).
    #[arg(long)]
    weights: bool,
}

#[derive(Args)]
struct RankArgs {
    /// Estimate table CSV (as written by `estimate`).
    #[arg(long)]
    table_a: Option<PathBuf>,
    #[arg(long)]
    table_b: Option<PathBuf>,
    #[arg(long)]
    bins: Option<usize>,
    /// Summarize the bundled 600-practice transition table instead.
    #[arg(long)]
    reference: bool,
}

#[derive(Args)]
struct BalanceArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    profile: Option<String>,
    /// sbw (sign-constrained) or sbw-r (unrestricted).
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    basis: Option<String>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    min_size: Option<usize>,
}

#[derive(Args)]
struct MapArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Comma list of profile specs (paths, data:system, ref:<name>).
    #[arg(long)]
    profiles: Option<String>,
    /// Classify under the sign restriction (feasibility) rather than by
    /// the sign pattern of exact weights.
    #[arg(long)]
    nonneg: Option<bool>,
    #[arg(long)]
    basis: Option<String>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    min_size: Option<usize>,
}

/// Flat key-value defaults loaded from --config.
struct ConfigMap(BTreeMap<String, String>);

impl ConfigMap {
    fn load(path: Option<&Path>) -> Result<ConfigMap, CliError> {
        let mut map = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            for line in text.lines() {
                if let Some((k, v)) = casemix::split_key_value(line) {
                    map.insert(k.to_string(), v.to_string());
                }
            }
        }
        Ok(ConfigMap(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|_| {
                CliError::Config(format!("config key '{key}': bad value '{raw}'"))
            }),
        }
    }

    fn flag(&self, cli: bool, key: &str) -> Result<bool, CliError> {
        Ok(cli || self.get::<bool>(key)?.unwrap_or(false))
    }
}

fn pick<T: FromStr>(
    cli: Option<T>,
    cfg: &ConfigMap,
    key: &str,
    default: T,
) -> Result<T, CliError> {
    Ok(cli.or(cfg.get(key)?).unwrap_or(default))
}

fn pick_opt<T: FromStr>(
    cli: Option<T>,
    cfg: &ConfigMap,
    key: &str,
) -> Result<Option<T>, CliError> {
    Ok(cli.or(cfg.get(key)?))
}

fn require<T>(v: Option<T>, key: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Config(format!("missing required option --{key}")))
}

fn parse_basis(s: &str) -> Result<TransformMode, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "x" | "raw" => Ok(TransformMode::Raw),
        "xt" | "pc-second-moment" => Ok(TransformMode::PcSecondMoment),
        "pc-augmented" => Ok(TransformMode::PcAugmented),
        other => Err(CliError::Config(format!(
            "unknown basis '{other}' (expected x, xt, or pc-augmented)"
        ))),
    }
}

fn basis_file_token(mode: TransformMode) -> &'static str {
    match mode {
        TransformMode::Raw => "x",
        TransformMode::PcAugmented => "pca",
        TransformMode::PcSecondMoment => "xt",
    }
}

fn parse_method(s: &str) -> Result<Method, CliError> {
    Method::parse(s).ok_or_else(|| CliError::Config(format!("unknown method '{s}'")))
}

fn parse_methods(s: &str) -> Result<Vec<(Method, TransformMode)>, CliError> {
    let mut out = Vec::new();
    for token in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (m, b) = match token.split_once(':') {
            Some((m, b)) => (m, b),
            None => (token, "x"),
        };
        out.push((parse_method(m)?, parse_basis(b)?));
    }
    if out.is_empty() {
        return Err(CliError::Config("empty method list".to_string()));
    }
    Ok(out)
}

fn parse_targets(s: &str) -> Result<Vec<TargetKind>, CliError> {
    let mut out = Vec::new();
    for token in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        out.push(
            TargetKind::parse(token)
                .ok_or_else(|| CliError::Config(format!("unknown target '{token}'")))?,
        );
    }
    if out.is_empty() {
        return Err(CliError::Config("empty target list".to_string()));
    }
    Ok(out)
}

fn parse_prediction(s: &str) -> Result<PredictionMode, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "profile-corrected" => Ok(PredictionMode::ProfileCorrected),
        "literal" => Ok(PredictionMode::Literal),
        other => Err(CliError::Config(format!(
            "unknown prediction mode '{other}'"
        ))),
    }
}

fn resolve_schema(path: Option<&Path>) -> Result<CsvSchema, CliError> {
    match path {
        Some(p) => Ok(CsvSchema::read(p)?),
        None => Ok(reference_schema()),
    }
}

fn resolve_profile(spec: &str, d: &Dataset) -> Result<Profile, CliError> {
    if spec == "data:system" {
        return Ok(system_profile(d));
    }
    if let Some(name) = spec.strip_prefix("ref:") {
        let text = reference_profile_text(name).ok_or_else(|| {
            CliError::Config(format!("no bundled profile named '{name}'"))
        })?;
        let (pname, pairs) = parse_profile_text(text, name)?;
        return Ok(profile_from_pairs(&pname, &pairs, d)?);
    }
    Ok(read_profile(Path::new(spec), d)?)
}

fn out_dir(cli_out: Option<&Path>, sub: &str) -> PathBuf {
    if let Some(p) = cli_out {
        return p.to_path_buf();
    }
    let root = std::env::var_os("CASEMIX_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"));
    root.join(sub)
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        // ignore failure if a pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = serde_json::json!({
                "error": e.to_string(),
                "kind": e.kind(),
                "exit": e.exit_code(),
            });
            eprintln!("{record}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = ConfigMap::load(cli.config.as_deref())?;
    let dir = out_dir(cli.out.as_deref(), match &cli.cmd {
        Cmd::Simulate(_) => "simulate",
        Cmd::Estimate(_) => "estimate",
        Cmd::Rank(_) => "rank",
        Cmd::Balance(_) => "balance",
        Cmd::Map(_) => "map",
    });
    match cli.cmd {
        Cmd::Simulate(a) => run_simulate(a, &cfg, &dir),
        Cmd::Estimate(a) => run_estimate(a, &cfg, &dir),
        Cmd::Rank(a) => run_rank(a, &cfg, &dir),
        Cmd::Balance(a) => run_balance(a, &cfg, &dir),
        Cmd::Map(a) => run_map(a, &cfg, &dir),
    }
}

fn estimate_options(
    delta: f64,
    prediction: Option<String>,
    cfg: &ConfigMap,
    mr_pseudoinverse: bool,
    bootstrap: Option<usize>,
    bootstrap_seed: Option<u64>,
) -> Result<EstimateOptions, CliError> {
    let layered_mode = match pick_opt(prediction, cfg, "prediction")? {
        Some(s) => parse_prediction(&s)?,
        None => PredictionMode::ProfileCorrected,
    };
    let draws = pick(bootstrap, cfg, "bootstrap", 0)?;
    let bootstrap = if draws > 0 {
        Some(BootstrapConfig {
            draws,
            seed: pick(bootstrap_seed, cfg, "bootstrap-seed", 0)?,
        })
    } else {
        None
    };
    Ok(EstimateOptions {
        delta_fraction: delta,
        layered_mode,
        mr_pseudoinverse: cfg.flag(mr_pseudoinverse, "mr-pseudoinverse")?,
        bootstrap,
    })
}

fn run_simulate(a: SimulateArgs, cfg: &ConfigMap, dir: &Path) -> Result<(), CliError> {
    let sim = SimConfig {
        setting: pick(a.setting, cfg, "setting", 1)?,
        covariate_count: pick(a.covariates, cfg, "covariates", 10)?,
        n: pick(a.n, cfg, "n", 10_000)?,
        practices: pick(a.practices, cfg, "practices", 100)?,
        replicates: pick(a.replicates, cfg, "replicates", 100)?,
        seed: pick(a.seed, cfg, "seed", 0)?,
        targets: parse_targets(&pick(
            a.targets,
            cfg,
            "targets",
            "system,smallest,largest".to_string(),
        )?)?,
        setting3_formula: pick_opt(a.formula, cfg, "formula")?,
    };
    sim.validate()?;
    let methods = parse_methods(&pick(
        a.methods,
        cfg,
        "methods",
        "fe:x,mr:x,sbw:x,sbw-r:x,sbw-fe:x,sbw-wr:x".to_string(),
    )?)?;
    let delta = pick(a.delta, cfg, "delta", 0.0)?;
    let spec = StudySpec {
        methods,
        opts: estimate_options(delta, a.prediction, cfg, a.mr_pseudoinverse, None, None)?,
        variance_threshold: pick(a.threshold, cfg, "threshold", DEFAULT_VARIANCE_THRESHOLD)?,
    };
    let result = run_study(&sim, &spec)?;
    let report = summarize_study(&result)?;
    let shared = summarize_study_common_support(&result)?;

    let mut w = ArtifactWriter::new(dir, &command_line())?;
    w.write("metrics.csv", report.csv().as_bytes())?;
    w.write("metrics_common_support.csv", shared.csv().as_bytes())?;
    w.write(
        "metrics.json",
        serde_json::to_string_pretty(&report)
            .map_err(|e| CliError::Runtime(e.to_string()))?
            .as_bytes(),
    )?;
    write_status_grids(&result, &mut w)?;
    if cfg.flag(a.raw, "raw")? {
        w.write("raw_estimates.csv", raw_estimates_csv(&result).as_bytes())?;
    }
    w.finish()?;
    print_report(&report);
    Ok(())
}

fn write_status_grids(result: &StudyResult, w: &mut ArtifactWriter) -> Result<(), CliError> {
    let first = match result.replicates.first() {
        Some(r) => r,
        None => return Ok(()),
    };
    let practice_labels: Vec<String> =
        (1..=result.cfg.practices).map(|p| p.to_string()).collect();
    let rep_labels: Vec<String> = result
        .replicates
        .iter()
        .map(|r| r.replicate.to_string())
        .collect();
    for (ti, tc) in first.per_target.iter().enumerate() {
        for (mi, mc) in tc.per_method.iter().enumerate() {
            let cells: Vec<Vec<Option<ExtrapolationStatus>>> = result
                .replicates
                .iter()
                .map(|r| r.per_target[ti].per_method[mi].statuses.clone())
                .collect();
            let grid = StatusGrid {
                row_labels: rep_labels.clone(),
                col_labels: practice_labels.clone(),
                cells,
            };
            let stem = format!(
                "map_{}_{}_{}",
                mc.method.cli_name(),
                basis_file_token(mc.mode),
                tc.target.label()
            );
            w.write(&format!("{stem}.csv"), grid.csv().as_bytes())?;
            w.write(&format!("{stem}.svg"), grid.svg().as_bytes())?;
        }
    }
    Ok(())
}

fn raw_estimates_csv(result: &StudyResult) -> String {
    let mut out = String::from("replicate,target,method,basis,practice,estimate,truth,status\n");
    for rep in &result.replicates {
        for tc in &rep.per_target {
            for mc in &tc.per_method {
                for p in 0..result.cfg.practices {
                    let est = mc.estimates[p].map_or(String::new(), |e| e.to_string());
                    let status = mc.statuses[p].map_or(String::new(), |s| s.to_string());
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        rep.replicate,
                        tc.target.label(),
                        mc.method.tag(),
                        basis_file_token(mc.mode),
                        p + 1,
                        est,
                        tc.truths[p],
                        status
                    ));
                }
            }
        }
    }
    out
}

fn print_report(report: &MetricsReport) {
    for c in &report.cells {
        println!(
            "{}({}) {}: bias {:.4} rmse {:.4} rank_mean {:.2} rank_max {:.2} \
             [{} interpolated, {} extrapolated, {} infeasible, {} missing]",
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
            c.missing
        );
    }
}

fn load_dataset(
    data: Option<PathBuf>,
    schema: Option<PathBuf>,
    min_size: Option<usize>,
    cfg: &ConfigMap,
) -> Result<(Dataset, CsvSchema), CliError> {
    let data = require(pick_opt(data, cfg, "data")?, "data")?;
    let schema = resolve_schema(pick_opt(schema, cfg, "schema")?.as_deref())?;
    let floor = pick(min_size, cfg, "min-size", 30)?;
    let d = read_patients(&data, &schema, floor)?;
    Ok((d, schema))
}

fn summary_line(table: &EstimateTable) -> String {
    let total = table.practices.len();
    let estimated = table.practices.iter().filter(|c| c.estimate.is_some()).count();
    let mut by = [0usize; 3];
    for c in &table.practices {
        by[match c.status {
            ExtrapolationStatus::Interpolated => 0,
            ExtrapolationStatus::Extrapolated => 1,
            ExtrapolationStatus::Infeasible => 2,
        }] += 1;
    }
    format!(
        "{} {} profile {}: estimated {estimated} of {total} practices \
         ({} interpolated, {} extrapolated, {} infeasible)",
        table.method.label(),
        table.basis,
        table.profile,
        by[0],
        by[1],
        by[2]
    )
}

fn run_estimate(a: EstimateArgs, cfg: &ConfigMap, dir: &Path) -> Result<(), CliError> {
    let (d, _) = load_dataset(a.data, a.schema, a.min_size, cfg)?;
    let method = parse_method(&require(pick_opt(a.method, cfg, "method")?, "method")?)?;
    let mode = parse_basis(&pick(a.basis, cfg, "basis", "x".to_string())?)?;
    let threshold = pick(a.threshold, cfg, "threshold", DEFAULT_VARIANCE_THRESHOLD)?;
    let delta = pick(a.delta, cfg, "delta", 0.0)?;
    let opts = estimate_options(
        delta,
        a.prediction,
        cfg,
        a.mr_pseudoinverse,
        a.bootstrap,
        a.bootstrap_seed,
    )?;
    let spec = pick(a.profile, cfg, "profile", "data:system".to_string())?;

    let t = fit_transform(&d, mode, threshold)?;
    let profile = resolve_profile(&spec, &d)?;
    let table = estimate(&d, &profile, &t, method, &opts)?;

    let mut w = ArtifactWriter::new(dir, &command_line())?;
    w.write("estimates.csv", estimates_csv(&table).as_bytes())?;
    w.write("transform.json", transform_to_json(&t).as_bytes())?;
    if cfg.flag(a.weights, "weights")? {
        let nonneg = method == Method::SbwNonneg;
        let solutions = practice_weight_solutions(&d, &profile, &t, nonneg, delta)?;
        w.write("weights.csv", weights_csv(&d, &solutions).as_bytes())?;
    }
    w.finish()?;
    println!("{}", summary_line(&table));
    Ok(())
}

/// Pulls (practice_id, estimate) pairs out of an estimates.csv.
fn read_estimate_column(path: &Path) -> Result<Vec<(String, Option<f64>)>, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| CliError::Runtime(e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Runtime(format!("{}: missing column '{name}'", path.display())))
    };
    let id_at = col("practice_id")?;
    let est_at = col("estimate")?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Runtime(e.to_string()))?;
        let raw = record[est_at].trim();
        let est = if raw.is_empty() {
            None
        } else {
            Some(raw.parse::<f64>().map_err(|_| {
                CliError::Runtime(format!("{}: bad estimate '{raw}'", path.display()))
            })?)
        };
        out.push((record[id_at].to_string(), est));
    }
    Ok(out)
}

fn run_rank(a: RankArgs, cfg: &ConfigMap, dir: &Path) -> Result<(), CliError> {
    let mut w = ArtifactWriter::new(dir, &command_line())?;
    if cfg.flag(a.reference, "reference")? {
        let m = reference_transition();
        let churn = m.churn();
        w.write("transition.csv", m.csv().as_bytes())?;
        w.write("churn.txt", (churn.lines().join("\n") + "\n").as_bytes())?;
        w.finish()?;
        for line in churn.lines() {
            println!("{line}");
        }
        return Ok(());
    }
    let table_a = require(pick_opt(a.table_a, cfg, "table-a")?, "table-a")?;
    let table_b = require(pick_opt(a.table_b, cfg, "table-b")?, "table-b")?;
    let bins = pick(a.bins, cfg, "bins", 5)?;
    let ea = read_estimate_column(&table_a)?;
    let eb = read_estimate_column(&table_b)?;
    let eb_map: BTreeMap<&str, Option<f64>> =
        eb.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    // pairwise exclusion: keep practices estimated in both tables
    let mut labels = Vec::new();
    let mut va = Vec::new();
    let mut vb = Vec::new();
    for (id, est_a) in &ea {
        if let (Some(x), Some(Some(y))) = (est_a, eb_map.get(id.as_str())) {
            labels.push(id.clone());
            va.push(*x);
            vb.push(*y);
        }
    }
    if labels.is_empty() {
        return Err(CliError::Runtime(
            "no practice is estimated in both tables".to_string(),
        ));
    }
    let excluded = ea.len() + eb.len() - 2 * labels.len();
    let ranks_a = ranks_of(&va);
    let ranks_b = ranks_of(&vb);
    let (m, churn) = quintile_transition_cli(&ranks_a, &ranks_b, bins)?;
    w.write("transition.csv", m.csv().as_bytes())?;
    w.write("churn.txt", (churn.lines().join("\n") + "\n").as_bytes())?;
    w.write(
        "rank_scatter.csv",
        casemix::rank_scatter_csv(&labels, &ranks_a, &ranks_b).as_bytes(),
    )?;
    w.write(
        "rank_scatter.svg",
        casemix::rank_scatter_svg(&ranks_a, &ranks_b).as_bytes(),
    )?;
    w.finish()?;
    for line in churn.lines() {
        println!("{line}");
    }
    if excluded > 0 {
        println!("{excluded} practices excluded (not estimated in both tables)");
    }
    Ok(())
}

fn quintile_transition_cli(
    ranks_a: &[usize],
    ranks_b: &[usize],
    bins: usize,
) -> Result<(casemix::TransitionMatrix, casemix::ChurnSummary), CliError> {
    casemix::quintile_transition(ranks_a, ranks_b, bins).map_err(CliError::from)
}

fn run_balance(a: BalanceArgs, cfg: &ConfigMap, dir: &Path) -> Result<(), CliError> {
    let (d, _) = load_dataset(a.data, a.schema, a.min_size, cfg)?;
    let method = parse_method(&pick(a.method, cfg, "method", "sbw".to_string())?)?;
    let nonneg = match method {
        Method::SbwNonneg => true,
        Method::SbwUnrestricted => false,
        other => {
            return Err(CliError::Config(format!(
                "balance needs a weighting method (sbw or sbw-r), got {}",
                other.cli_name()
            )))
        }
    };
    let mode = parse_basis(&pick(a.basis, cfg, "basis", "x".to_string())?)?;
    let threshold = pick(a.threshold, cfg, "threshold", DEFAULT_VARIANCE_THRESHOLD)?;
    let delta = pick(a.delta, cfg, "delta", 0.0)?;
    let spec = pick(a.profile, cfg, "profile", "data:system".to_string())?;
    let t = fit_transform(&d, mode, threshold)?;
    let profile = resolve_profile(&spec, &d)?;
    let (bm, target) = basis_for(&d, &t, &profile)?;
    let solutions = practice_weight_solutions(&d, &profile, &t, nonneg, delta)?;

    let mut out = String::from(
        "practice_id,function,target,before_mean,after_mean,smd_before,smd_after,standardized\n",
    );
    let mut worst_before = 0.0_f64;
    let mut worst_after = 0.0_f64;
    let mut weighted = 0usize;
    for (p, sol) in solutions.iter().enumerate() {
        let Some(wv) = sol.weights_ref() else {
            continue;
        };
        weighted += 1;
        let rows = d.practice_rows(p);
        let table = balance_table(&bm, &target, rows, wv.as_slice().unwrap());
        for r in &table {
            worst_before = worst_before.max(r.smd_before.abs());
            worst_after = worst_after.max(r.smd_after.abs());
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                d.practice_labels[p],
                r.name,
                r.target,
                r.before,
                r.after,
                r.smd_before,
                r.smd_after,
                r.standardized
            ));
        }
    }
    let mut w = ArtifactWriter::new(dir, &command_line())?;
    w.write("balance.csv", out.as_bytes())?;
    w.finish()?;
    println!(
        "{} of {} practices weighted; worst |SMD| before {:.3}, after {:.3}",
        weighted,
        d.practice_count(),
        worst_before,
        worst_after
    );
    Ok(())
}

fn run_map(a: MapArgs, cfg: &ConfigMap, dir: &Path) -> Result<(), CliError> {
    let (d, _) = load_dataset(a.data, a.schema, a.min_size, cfg)?;
    let specs = pick(a.profiles, cfg, "profiles", "data:system".to_string())?;
    let nonneg = pick(a.nonneg, cfg, "nonneg", true)?;
    let mode = parse_basis(&pick(a.basis, cfg, "basis", "x".to_string())?)?;
    let threshold = pick(a.threshold, cfg, "threshold", DEFAULT_VARIANCE_THRESHOLD)?;
    let delta = pick(a.delta, cfg, "delta", 0.0)?;
    let t = fit_transform(&d, mode, threshold)?;

    let mut col_labels = Vec::new();
    let mut columns: Vec<Vec<ExtrapolationStatus>> = Vec::new();
    for spec in specs.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let profile = resolve_profile(spec, &d)?;
        columns.push(classify_practices(&d, &profile, &t, nonneg, delta)?);
        col_labels.push(profile.name.clone());
    }
    if columns.is_empty() {
        return Err(CliError::Config("empty profile list".to_string()));
    }
    let cells: Vec<Vec<Option<ExtrapolationStatus>>> = (0..d.practice_count())
        .map(|p| columns.iter().map(|c| Some(c[p])).collect())
        .collect();
    let grid = StatusGrid {
        row_labels: d.practice_labels.clone(),
        col_labels,
        cells,
    };
    let counts = grid.counts();
    let mut w = ArtifactWriter::new(dir, &command_line())?;
    w.write("map.csv", grid.csv().as_bytes())?;
    w.write("map.svg", grid.svg().as_bytes())?;
    w.finish()?;
    println!(
        "{} practices x {} profiles: {} interpolated, {} extrapolated, {} infeasible",
        grid.row_labels.len(),
        grid.col_labels.len(),
        counts.interpolated,
        counts.extrapolated,
        counts.infeasible
    );
    Ok(())
}
