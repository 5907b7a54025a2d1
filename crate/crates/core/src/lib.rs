//! Case-mix adjusted provider profiling.
//!
//! The crate estimates per-practice mean outcomes standardized to a common
//! patient profile, so that practices facing different case mixes can be
//! compared on the same footing. The centerpiece is a stable balancing
//! weights estimator: per practice, the weights of minimal variance that
//! reproduce the target profile exactly (or within bands) over a set of
//! balance functions. Regression-based estimators, a simulation study
//! harness, and ranking/transition metrics round out the toolkit.

mod linalg;

pub mod estimate;
pub mod io;
pub mod metrics;
pub mod model;
pub mod simulate;
pub mod solver;
pub mod transform;

pub use estimate::{
    assign_ranks, balance_null_partition, basis_tag, estimate, estimate_fe, estimate_layered_fe,
    estimate_layered_wr, estimate_mr, estimate_sbw, hajek_se, linear_se, BootstrapConfig,
    EstimateError, EstimateOptions, EstimateTable, LinearFit, Method, PracticeEstimate,
    PredictionMode, Z_95,
};
pub use io::{
    estimates_csv, parse_profile_text, profile_from_pairs, profile_to_text, read_patients,
    read_profile, reference_profile, reference_profile_text, reference_schema,
    reference_transition, split_key_value, transform_from_json, transform_to_json, weights_csv,
    write_patients, write_profile, ArtifactWriter, CsvSchema, IoError, Manifest, ManifestEntry,
    REFERENCE_PROFILE_NAMES,
};
pub use metrics::{
    balance_csv, balance_table, bias_rmse, common_support, percent, quintile_edges,
    quintile_transition, rank_errors, rank_scatter_csv, rank_scatter_svg, ranks_of,
    summarize_study, summarize_study_common_support, BalanceRow,
    BiasRmse, ChurnSummary, MetricsCell, MetricsError, MetricsReport, RankErrors, StatusCounts,
    StatusGrid, TransitionMatrix,
};
pub use model::{
    build_dataset, detect_null_covariates, patient_profile, sample_profile, system_profile,
    ColumnKind, ColumnSpec, Dataset, ExtrapolationStatus, ModelError, NullPartition,
    PatientRecord, Profile, ProfileBasis, Provenance,
};
pub use simulate::{
    assign_practices, assignment_probabilities, conditional_truths, gen_covariates,
    gen_outcomes, gen_replicate, marginal_truths, run_study, sigma3, sigma4, sim_columns,
    Formula, OutcomeModel, Replicate, SimConfig, SimError, StudyResult, StudySpec, TargetKind,
};
pub use solver::{
    check_feasibility, classify_practices, delta_from_sd_fraction, practice_weight_solutions,
    solve_sbw, SbwProblem, SolverError, WeightSolution,
};
pub use transform::{
    balance_functions, basis_for, fit_transform, transformed_profile, BalanceMatrix, Transform,
    TransformError, TransformMode, DEFAULT_VARIANCE_THRESHOLD,
};
