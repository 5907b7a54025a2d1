//! Synthetic worlds for the estimator comparison study.
//!
//! Each replicate draws a patient population from a fixed covariate law,
//! assigns patients to practices by a softmax whose coefficients shrink
//! linearly with the practice number, and generates outcomes under one of
//! four settings of increasing non-linearity. The true mean potential
//! outcome of practice p is 0.1p for every setting, so estimator error is
//! directly readable.
//!
//! Settings 2 and 3 share one formula; a custom formula can be supplied
//! for setting 3 through [`SimConfig::setting3_formula`] without touching
//! code. The 30-covariate design appends twenty independent binary
//! columns that enter both the assignment and the outcome, making them
//! confounders rather than noise.

use crate::estimate::{estimate, EstimateOptions, Method};
use crate::linalg::cholesky;
use crate::model::{
    build_dataset, sample_profile, system_profile, ColumnSpec, Dataset, ExtrapolationStatus,
    ModelError, PatientRecord, Profile,
};
use crate::transform::{fit_transform, Transform, TransformMode};
use ndarray::{array, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("setting {0} is not one of 1, 2, 3, 4")]
    BadSetting(u8),
    #[error("covariate count {0} is not 10 or 30")]
    BadCovariateCount(usize),
    #[error("n = {n} is smaller than the practice count {practices}")]
    TooFewPatients { n: usize, practices: usize },
    #[error("replicates must be positive")]
    NoReplicates,
    #[error("custom formula: {0}")]
    Formula(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    System,
    SmallestPractice,
    LargestPractice,
}

impl TargetKind {
    pub const ALL: [TargetKind; 3] = [
        TargetKind::System,
        TargetKind::SmallestPractice,
        TargetKind::LargestPractice,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TargetKind::System => "system",
            TargetKind::SmallestPractice => "smallest",
            TargetKind::LargestPractice => "largest",
        }
    }

    pub fn parse(s: &str) -> Option<TargetKind> {
        match s.to_ascii_lowercase().as_str() {
            "system" => Some(TargetKind::System),
            "smallest" | "smallest-practice" => Some(TargetKind::SmallestPractice),
            "largest" | "largest-practice" => Some(TargetKind::LargestPractice),
            _ => None,
        }
    }
}

impl std::fmt::Display for TargetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub setting: u8,
    pub covariate_count: usize,
    pub n: usize,
    pub practices: usize,
    pub replicates: usize,
    pub seed: u64,
    pub targets: Vec<TargetKind>,
    /// Replacement noiseless-outcome formula for setting 3, in the
    /// variables `x1`..`x<K>` and `p`.
    pub setting3_formula: Option<String>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            setting: 1,
            covariate_count: 10,
            n: 10_000,
            practices: 100,
            replicates: 100,
            seed: 0,
            targets: TargetKind::ALL.to_vec(),
            setting3_formula: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(1..=4).contains(&self.setting) {
            return Err(SimError::BadSetting(self.setting));
        }
        if self.covariate_count != 10 && self.covariate_count != 30 {
            return Err(SimError::BadCovariateCount(self.covariate_count));
        }
        if self.n < self.practices {
            return Err(SimError::TooFewPatients {
                n: self.n,
                practices: self.practices,
            });
        }
        if self.replicates == 0 {
            return Err(SimError::NoReplicates);
        }
        Ok(())
    }
}

pub fn sigma3() -> Array2<f64> {
    array![[2.0, 1.0, -1.0], [1.0, 1.0, -0.5], [-1.0, -0.5, 2.0]]
}

pub fn sigma4() -> Array2<f64> {
    array![
        [2.0, 1.0, -1.0, -1.0],
        [1.0, 1.0, -0.5, -0.5],
        [-1.0, -0.5, 2.0, 0.5],
        [-1.0, -0.5, 0.5, 1.0]
    ]
}

/// Column declarations for the simulated covariates: x6 and the appended
/// columns are binary, the rest continuous.
pub fn sim_columns(k: usize) -> Vec<ColumnSpec> {
    (1..=k)
        .map(|j| {
            let name = format!("x{j}");
            if j == 6 || j > 10 {
                ColumnSpec::binary(&name)
            } else {
                ColumnSpec::continuous(&name)
            }
        })
        .collect()
}

/// Draws the covariate matrix: a correlated trivariate normal block, a
/// uniform, a chi-square(1), a coin flip, a correlated quadrivariate
/// normal block, and (in the 30-column design) twenty more coin flips.
pub fn gen_covariates<R: Rng>(cfg: &SimConfig, rng: &mut R) -> Array2<f64> {
    let k = cfg.covariate_count;
    let n = cfg.n;
    let l3 = cholesky(&sigma3()).expect("sigma3 is positive definite");
    let l4 = cholesky(&sigma4()).expect("sigma4 is positive definite");
    let unif = Uniform::new_inclusive(-3.0, 3.0);
    let bern = Bernoulli::new(0.5).unwrap();
    let mut x = Array2::zeros((n, k));
    let mut z = [0.0_f64; 4];
    for i in 0..n {
        for zi in z.iter_mut().take(3) {
            *zi = StandardNormal.sample(rng);
        }
        for r in 0..3 {
            let mut s = 0.0;
            for c in 0..=r {
                s += l3[[r, c]] * z[c];
            }
            x[[i, r]] = s;
        }
        x[[i, 3]] = unif.sample(rng);
        let zc: f64 = StandardNormal.sample(rng);
        x[[i, 4]] = zc * zc;
        x[[i, 5]] = bern.sample(rng) as u8 as f64;
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(rng);
        }
        for r in 0..4 {
            let mut s = 0.0;
            for c in 0..=r {
                s += l4[[r, c]] * z[c];
            }
            x[[i, 6 + r]] = s;
        }
        for j in 10..k {
            x[[i, j]] = bern.sample(rng) as u8 as f64;
        }
    }
    x
}

/// Assignment probabilities for one patient row: softmax over practices
/// of (1 - p/P) times the patient's linear score. The score uses the
/// first six covariates with signs (1,1,1,-1,1,1); appended binary
/// columns enter with coefficient 0.2.
pub fn assignment_probabilities(row: &[f64], practices: usize) -> Vec<f64> {
    let mut s = row[0] + row[1] + row[2] - row[3] + row[4] + row[5];
    for v in row.iter().skip(10) {
        s += 0.2 * v;
    }
    let pf = practices as f64;
    let lps: Vec<f64> = (1..=practices)
        .map(|p| (1.0 - p as f64 / pf) * s)
        .collect();
    let m = lps.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut probs: Vec<f64> = lps.iter().map(|&v| (v - m).exp()).collect();
    let total: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= total;
    }
    probs
}

/// Multinomial practice assignment per patient; returns 0-based practice
/// indices.
pub fn assign_practices<R: Rng>(x: &Array2<f64>, cfg: &SimConfig, rng: &mut R) -> Vec<usize> {
    let n = x.nrows();
    let mut out = Vec::with_capacity(n);
    let mut row = vec![0.0; x.ncols()];
    for i in 0..n {
        for (j, v) in row.iter_mut().enumerate() {
            *v = x[[i, j]];
        }
        let probs = assignment_probabilities(&row, cfg.practices);
        let u: f64 = rng.gen::<f64>();
        let mut acc = 0.0;
        let mut pick = cfg.practices - 1;
        for (p, &pr) in probs.iter().enumerate() {
            acc += pr;
            if u < acc {
                pick = p;
                break;
            }
        }
        out.push(pick);
    }
    out
}

#[derive(Debug, Clone)]
enum Expr {
    Num(f64),
    Var(usize),
    Practice,
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
}

impl Expr {
    fn eval(&self, x: &[f64], p: f64) -> f64 {
        match self {
            Expr::Num(v) => *v,
            Expr::Var(j) => x[*j],
            Expr::Practice => p,
            Expr::Add(a, b) => a.eval(x, p) + b.eval(x, p),
            Expr::Sub(a, b) => a.eval(x, p) - b.eval(x, p),
            Expr::Mul(a, b) => a.eval(x, p) * b.eval(x, p),
            Expr::Div(a, b) => a.eval(x, p) / b.eval(x, p),
            Expr::Pow(a, b) => {
                let base = a.eval(x, p);
                let exp = b.eval(x, p);
                if exp.fract() == 0.0 && exp.abs() < i32::MAX as f64 {
                    base.powi(exp as i32)
                } else {
                    base.powf(exp)
                }
            }
            Expr::Neg(a) => -a.eval(x, p),
        }
    }

    fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Num(_) | Expr::Practice => None,
            Expr::Var(j) => Some(*j),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b)
            | Expr::Pow(a, b) => a.max_var().max(b.max_var()),
            Expr::Neg(a) => a.max_var(),
        }
    }
}

/// A parsed outcome formula in the variables `x1..xK` and `p` with the
/// operators `+ - * / ^` and parentheses.
#[derive(Debug, Clone)]
pub struct Formula {
    ast: Expr,
    source: String,
}

impl Formula {
    pub fn parse(src: &str) -> Result<Formula, SimError> {
        let tokens = tokenize(src)?;
        let mut p = FormulaParser { tokens, pos: 0 };
        let ast = p.expr()?;
        if p.pos != p.tokens.len() {
            return Err(SimError::Formula(format!(
                "unexpected trailing input at token {}",
                p.pos
            )));
        }
        Ok(Formula {
            ast,
            source: src.to_string(),
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, x: &[f64], p: usize) -> f64 {
        self.ast.eval(x, p as f64)
    }

    fn check_arity(&self, k: usize) -> Result<(), SimError> {
        if let Some(j) = self.ast.max_var() {
            if j >= k {
                return Err(SimError::Formula(format!(
                    "formula uses x{} but only {k} covariates exist",
                    j + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Var(usize),
    Practice,
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

fn tokenize(src: &str) -> Result<Vec<Token>, SimError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push(Token::Plus);
                i += 1;
            }
            '-' => {
                out.push(Token::Minus);
                i += 1;
            }
            '*' => {
                out.push(Token::Star);
                i += 1;
            }
            '/' => {
                out.push(Token::Slash);
                i += 1;
            }
            '^' => {
                out.push(Token::Caret);
                i += 1;
            }
            '(' => {
                out.push(Token::LParen);
                i += 1;
            }
            ')' => {
                out.push(Token::RParen);
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && matches!(bytes[i] as char, '0'..='9' | '.') {
                    i += 1;
                }
                if i < bytes.len() && matches!(bytes[i] as char, 'e' | 'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && matches!(bytes[j] as char, '+' | '-') {
                        j += 1;
                    }
                    if j < bytes.len() && (bytes[j] as char).is_ascii_digit() {
                        i = j;
                        while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let v: f64 = text
                    .parse()
                    .map_err(|_| SimError::Formula(format!("bad number '{text}'")))?;
                out.push(Token::Num(v));
            }
            'a'..='z' | 'A'..='Z' => {
                let start = i;
                while i < bytes.len() && (bytes[i] as char).is_ascii_alphanumeric() {
                    i += 1;
                }
                let word = &src[start..i];
                let lower = word.to_ascii_lowercase();
                if lower == "p" {
                    out.push(Token::Practice);
                } else if let Some(num) = lower.strip_prefix('x') {
                    let idx: usize = num
                        .parse()
                        .map_err(|_| SimError::Formula(format!("unknown name '{word}'")))?;
                    if idx == 0 {
                        return Err(SimError::Formula("covariates start at x1".to_string()));
                    }
                    out.push(Token::Var(idx - 1));
                } else {
                    return Err(SimError::Formula(format!("unknown name '{word}'")));
                }
            }
            other => {
                return Err(SimError::Formula(format!("unexpected character '{other}'")));
            }
        }
    }
    Ok(out)
}

struct FormulaParser {
    tokens: Vec<Token>,
    pos: usize,
}

impl FormulaParser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn expr(&mut self) -> Result<Expr, SimError> {
        let mut e = self.term()?;
        loop {
            match self.peek() {
                Some(Token::Plus) => {
                    self.pos += 1;
                    e = Expr::Add(Box::new(e), Box::new(self.term()?));
                }
                Some(Token::Minus) => {
                    self.pos += 1;
                    e = Expr::Sub(Box::new(e), Box::new(self.term()?));
                }
                _ => return Ok(e),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, SimError> {
        let mut e = self.unary()?;
        loop {
            match self.peek() {
                Some(Token::Star) => {
                    self.pos += 1;
                    e = Expr::Mul(Box::new(e), Box::new(self.unary()?));
                }
                Some(Token::Slash) => {
                    self.pos += 1;
                    e = Expr::Div(Box::new(e), Box::new(self.unary()?));
                }
                _ => return Ok(e),
            }
        }
    }

    // unary minus binds looser than ^, so -x^2 means -(x^2)
    fn unary(&mut self) -> Result<Expr, SimError> {
        if let Some(Token::Minus) = self.peek() {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, SimError> {
        let base = self.primary()?;
        if let Some(Token::Caret) = self.peek() {
            self.pos += 1;
            let exp = self.unary()?;
            return Ok(Expr::Pow(Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Expr, SimError> {
        let tok = self
            .peek()
            .cloned()
            .ok_or_else(|| SimError::Formula("unexpected end of input".to_string()))?;
        self.pos += 1;
        match tok {
            Token::Num(v) => Ok(Expr::Num(v)),
            Token::Var(j) => Ok(Expr::Var(j)),
            Token::Practice => Ok(Expr::Practice),
            Token::LParen => {
                let e = self.expr()?;
                match self.peek() {
                    Some(Token::RParen) => {
                        self.pos += 1;
                        Ok(e)
                    }
                    _ => Err(SimError::Formula("missing closing parenthesis".to_string())),
                }
            }
            other => Err(SimError::Formula(format!("unexpected token {other:?}"))),
        }
    }
}

/// Resolved noiseless-outcome model for one configuration.
#[derive(Debug, Clone)]
pub struct OutcomeModel {
    setting: u8,
    covariate_count: usize,
    custom3: Option<Formula>,
}

impl OutcomeModel {
    pub fn from_config(cfg: &SimConfig) -> Result<OutcomeModel, SimError> {
        cfg.validate()?;
        let custom3 = match (&cfg.setting3_formula, cfg.setting) {
            (Some(src), 3) => {
                let f = Formula::parse(src)?;
                f.check_arity(cfg.covariate_count)?;
                Some(f)
            }
            _ => None,
        };
        Ok(OutcomeModel {
            setting: cfg.setting,
            covariate_count: cfg.covariate_count,
            custom3,
        })
    }

    /// Noiseless mean outcome of a patient with covariates `x` at practice
    /// `p` (1-based). Quadratic terms are centered so that the marginal
    /// mean is 0.1p exactly under the covariate law: x1 and x3 have
    /// variance 2, x2 has variance 1, and cov(x2, x3) = -0.5.
    pub fn noiseless(&self, x: &[f64], p: usize) -> f64 {
        if let Some(f) = &self.custom3 {
            return f.eval(x, p);
        }
        let pf = p as f64;
        let par = if p % 2 == 0 { 1.0 } else { -1.0 };
        let a = 1.0 + pf / 50.0;
        let b = par + 2.0;
        let lead = match self.setting {
            1 => a * x[0] + b * x[1] + b * x[2],
            2 | 3 => a * (x[0] * x[0] - 2.0) + b * x[1] + b * x[2],
            4 => {
                a * (x[0] * x[0] - 2.0) + b * (x[1] * x[1] - 1.0) + b * (x[2] * x[2] - 2.0)
                    - 0.5 * b * (x[1] * x[2] + 0.5)
            }
            _ => unreachable!("config validated"),
        };
        let mut tail = -par * x[3] + par * (x[4] - 1.0) + par * (x[5] - 0.5) + 0.1 * pf;
        for v in x.iter().take(self.covariate_count).skip(10) {
            tail += 0.5 * (v - 0.5);
        }
        lead + tail
    }
}

/// Observed outcomes: the noiseless value at the assigned practice plus
/// standard normal noise.
pub fn gen_outcomes<R: Rng>(
    x: &Array2<f64>,
    assignment: &[usize],
    model: &OutcomeModel,
    rng: &mut R,
) -> Array1<f64> {
    let n = x.nrows();
    let mut y = Array1::zeros(n);
    let mut row = vec![0.0; x.ncols()];
    for i in 0..n {
        for (j, v) in row.iter_mut().enumerate() {
            *v = x[[i, j]];
        }
        let eps: f64 = StandardNormal.sample(rng);
        y[i] = model.noiseless(&row, assignment[i] + 1) + eps;
    }
    y
}

/// The exact marginal truths 0.1p for p = 1..P.
pub fn marginal_truths(practices: usize) -> Vec<f64> {
    (1..=practices).map(|p| 0.1 * p as f64).collect()
}

/// Conditional truths for a target sample: for each practice, the mean of
/// the noiseless formula over the target rows.
pub fn conditional_truths(
    x: &Array2<f64>,
    rows: &[usize],
    model: &OutcomeModel,
    practices: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; practices];
    let mut row = vec![0.0; x.ncols()];
    for &r in rows {
        for (j, v) in row.iter_mut().enumerate() {
            *v = x[[r, j]];
        }
        for (p, slot) in out.iter_mut().enumerate() {
            *slot += model.noiseless(&row, p + 1);
        }
    }
    let m = rows.len() as f64;
    for slot in out.iter_mut() {
        *slot /= m;
    }
    out
}

/// One generated world: the dataset, the target profiles, and the true
/// values each estimator is chasing.
pub struct Replicate {
    pub dataset: Dataset,
    /// 1-based practice number behind each dataset practice index.
    pub practice_numbers: Vec<usize>,
    /// Per target: the profile and the length-P conditional truth vector.
    pub targets: Vec<(TargetKind, Profile, Vec<f64>)>,
}

/// Generates replicate `rep` of the configured study, deterministically
/// in (seed, rep).
pub fn gen_replicate(cfg: &SimConfig, model: &OutcomeModel, rep: usize) -> Result<Replicate, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(rep as u64);
    let x = gen_covariates(cfg, &mut rng);
    let assignment = assign_practices(&x, cfg, &mut rng);
    let y = gen_outcomes(&x, &assignment, model, &mut rng);
    let columns = sim_columns(cfg.covariate_count);
    let records: Vec<PatientRecord> = (0..cfg.n)
        .map(|i| PatientRecord {
            patient_id: i.to_string(),
            practice: (assignment[i] + 1).to_string(),
            outcome: Some(y[i]),
            covariates: (0..cfg.covariate_count).map(|j| x[[i, j]]).collect(),
        })
        .collect();
    let dataset = build_dataset(columns, records)?;
    let practice_numbers: Vec<usize> = dataset
        .practice_labels
        .iter()
        .map(|s| s.parse::<usize>().expect("numeric practice label"))
        .collect();

    let smallest = (0..dataset.practice_count())
        .min_by_key(|&p| (dataset.practice_size(p), p))
        .unwrap();
    let largest = (0..dataset.practice_count())
        .min_by_key(|&p| (usize::MAX - dataset.practice_size(p), p))
        .unwrap();
    let mut targets = Vec::new();
    for &kind in &cfg.targets {
        let (profile, rows): (Profile, Vec<usize>) = match kind {
            TargetKind::System => (system_profile(&dataset), (0..dataset.n()).collect()),
            TargetKind::SmallestPractice => {
                let rows = dataset.practice_rows(smallest).to_vec();
                (
                    sample_profile(&dataset, "smallest", rows.clone())?,
                    rows,
                )
            }
            TargetKind::LargestPractice => {
                let rows = dataset.practice_rows(largest).to_vec();
                (sample_profile(&dataset, "largest", rows.clone())?, rows)
            }
        };
        let truths = conditional_truths(&x, &rows, model, cfg.practices);
        targets.push((kind, profile, truths));
    }
    Ok(Replicate {
        dataset,
        practice_numbers,
        targets,
    })
}

/// What to run in each replicate.
#[derive(Debug, Clone)]
pub struct StudySpec {
    pub methods: Vec<(Method, TransformMode)>,
    pub opts: EstimateOptions,
    pub variance_threshold: f64,
}

/// Estimates and statuses for one (method, basis) over practices 1..P;
/// entries are `None` where the method abstained, failed, or the practice
/// drew no patients.
#[derive(Debug, Clone)]
pub struct MethodCells {
    pub method: Method,
    pub mode: TransformMode,
    pub estimates: Vec<Option<f64>>,
    pub statuses: Vec<Option<ExtrapolationStatus>>,
}

#[derive(Debug, Clone)]
pub struct TargetCells {
    pub target: TargetKind,
    pub truths: Vec<f64>,
    pub per_method: Vec<MethodCells>,
}

#[derive(Debug, Clone)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub practice_sizes: Vec<usize>,
    pub per_target: Vec<TargetCells>,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub cfg: SimConfig,
    pub replicates: Vec<ReplicateOutcome>,
}

fn empty_cells(method: Method, mode: TransformMode, practices: usize) -> MethodCells {
    MethodCells {
        method,
        mode,
        estimates: vec![None; practices],
        statuses: vec![None; practices],
    }
}

/// Runs the full study: per replicate, generate a world, fit the bases,
/// run every requested (method, basis) against every target, and collect
/// estimates, statuses, and truths. Replicates run in parallel on
/// independent RNG substreams; a failing method fills its cells with
/// `None` rather than aborting the replicate.
pub fn run_study(cfg: &SimConfig, spec: &StudySpec) -> Result<StudyResult, SimError> {
    cfg.validate()?;
    let model = OutcomeModel::from_config(cfg)?;
    let replicates: Result<Vec<ReplicateOutcome>, SimError> = (0..cfg.replicates)
        .into_par_iter()
        .map(|rep| {
            let world = gen_replicate(cfg, &model, rep)?;
            let d = &world.dataset;
            let mut modes: Vec<TransformMode> = spec.methods.iter().map(|&(_, m)| m).collect();
            modes.sort_by_key(|m| *m as u8);
            modes.dedup();
            let transforms: Vec<(TransformMode, Option<Transform>)> = modes
                .iter()
                .map(|&mode| {
                    match fit_transform(d, mode, spec.variance_threshold) {
                        Ok(t) => (mode, Some(t)),
                        Err(e) => {
                            log::error!("replicate {rep}: transform {mode} failed: {e}");
                            (mode, None)
                        }
                    }
                })
                .collect();
            let mut per_target = Vec::with_capacity(world.targets.len());
            for (kind, profile, truths) in &world.targets {
                let mut per_method = Vec::with_capacity(spec.methods.len());
                for &(method, mode) in &spec.methods {
                    let t = transforms
                        .iter()
                        .find(|(m, _)| *m == mode)
                        .and_then(|(_, t)| t.as_ref());
                    let mut cells = empty_cells(method, mode, cfg.practices);
                    if let Some(t) = t {
                        match estimate(d, profile, t, method, &spec.opts) {
                            Ok(table) => {
                                for (idx, c) in table.practices.iter().enumerate() {
                                    let slot = world.practice_numbers[idx] - 1;
                                    cells.estimates[slot] = c.estimate;
                                    cells.statuses[slot] = Some(c.status);
                                }
                            }
                            Err(e) => {
                                log::error!(
                                    "replicate {rep}: {} on {} failed: {e}",
                                    method.label(),
                                    kind.label()
                                );
                            }
                        }
                    }
                    per_method.push(cells);
                }
                per_target.push(TargetCells {
                    target: *kind,
                    truths: truths.clone(),
                    per_method,
                });
            }
            let mut practice_sizes = vec![0usize; cfg.practices];
            for (idx, &num) in world.practice_numbers.iter().enumerate() {
                practice_sizes[num - 1] = d.practice_size(idx);
            }
            Ok(ReplicateOutcome {
                replicate: rep,
                practice_sizes,
                per_target,
            })
        })
        .collect();
    Ok(StudyResult {
        cfg: cfg.clone(),
        replicates: replicates?,
    })
}
