//! Monte Carlo experiments: repeated simulate / stack / evaluate cycles over a
//! grid of sample sizes and signal strengths, with CSV output.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::candidates::{CandidateSpec, Prior, TScale};
use crate::dgp::{derive_seed, generate_with_test, DgpConfig, Family};
use crate::error::{Result, StackError};
use crate::loo::CvScheme;
use crate::stacking::{fit_stack, LossAccumulator};

/// Environment variable read when `parallelism` is not set.
pub const THREADS_ENV: &str = "STACKCAST_THREADS";

/// Exact CSV header written by [`emit_csv`].
pub const CSV_HEADER: &str =
    "family,prior_family,n,r2,replications,ratio,mc_se,mean_stacked_loss,mean_best_loss,wall_seconds";

/// Stream tag for fold-assignment seeds, distinct from the data stream.
const FOLD_STREAM: u64 = 0xF01D;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    #[default]
    Linear,
    Log,
}

/// Candidate set used in every replication of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CandidateGrid {
    /// g-priors (linear only).
    G {
        min: f64,
        max: f64,
        count: usize,
        #[serde(default)]
        spacing: Spacing,
    },
    /// Isotropic normal priors parameterized by prior variance (linear).
    Gamma {
        min: f64,
        max: f64,
        count: usize,
        #[serde(default)]
        spacing: Spacing,
    },
    /// Isotropic normal priors parameterized by prior variance (logistic).
    Lambda {
        min: f64,
        max: f64,
        count: usize,
        #[serde(default)]
        spacing: Spacing,
    },
    /// Multivariate T priors over a list of degrees of freedom with a common scale.
    /// The scale is `lambda (X^T X)^{-1}` for linear and `lambda I` for logistic.
    T { nu: Vec<f64>, lambda: f64 },
}

impl CandidateGrid {
    pub fn g_default() -> Self {
        CandidateGrid::G {
            min: 1e-2,
            max: 1e3,
            count: 20,
            spacing: Spacing::Linear,
        }
    }

    pub fn lambda_default() -> Self {
        CandidateGrid::Lambda {
            min: 1e-3,
            max: 10.0,
            count: 20,
            spacing: Spacing::Linear,
        }
    }

    pub fn gamma_default() -> Self {
        CandidateGrid::Gamma {
            min: 1e-2,
            max: 1e3,
            count: 20,
            spacing: Spacing::Linear,
        }
    }

    pub fn t_default(family: Family) -> Self {
        match family {
            Family::Linear => CandidateGrid::T {
                nu: vec![1.0, 2.0, 3.0, 4.0, 5.0, 10.0, 30.0],
                lambda: 2.5,
            },
            Family::Logistic => CandidateGrid::T {
                nu: (1..=30).map(f64::from).collect(),
                lambda: 0.1,
            },
        }
    }

    /// Tag written to the `prior_family` CSV column.
    pub fn tag(&self) -> &'static str {
        match self {
            CandidateGrid::G { .. } => "g",
            CandidateGrid::Gamma { .. } => "gamma",
            CandidateGrid::Lambda { .. } => "lambda",
            CandidateGrid::T { .. } => "t",
        }
    }

    pub fn is_t(&self) -> bool {
        matches!(self, CandidateGrid::T { .. })
    }

    /// Grid points for the range variants; the degrees of freedom for `T`.
    pub fn values(&self) -> Vec<f64> {
        match self {
            CandidateGrid::G {
                min,
                max,
                count,
                spacing,
            }
            | CandidateGrid::Gamma {
                min,
                max,
                count,
                spacing,
            }
            | CandidateGrid::Lambda {
                min,
                max,
                count,
                spacing,
            } => grid_points(*min, *max, *count, *spacing),
            CandidateGrid::T { nu, .. } => nu.clone(),
        }
    }

    fn validate(&self, family: Family) -> Result<()> {
        let bad = |m: String| Err(StackError::Config(m));
        match self {
            CandidateGrid::G {
                min, max, count, ..
            }
            | CandidateGrid::Gamma {
                min, max, count, ..
            }
            | CandidateGrid::Lambda {
                min, max, count, ..
            } => {
                if *count == 0 {
                    return bad("candidate grid needs count >= 1".into());
                }
                if !(*min > 0.0 && max >= min && max.is_finite()) {
                    return bad(format!(
                        "candidate grid range must satisfy 0 < min <= max, got [{min}, {max}]"
                    ));
                }
            }
            CandidateGrid::T { nu, lambda } => {
                if nu.is_empty() {
                    return bad("t grid needs at least one nu".into());
                }
                if nu.iter().any(|v| !(*v > 0.0 && v.is_finite())) || !(*lambda > 0.0) {
                    return bad("t grid values must be positive".into());
                }
            }
        }
        if family == Family::Logistic && matches!(self, CandidateGrid::G { .. }) {
            return bad("the g grid is defined for the linear family only".into());
        }
        Ok(())
    }
}

/// `count` points from `min` to `max` inclusive.
pub fn grid_points(min: f64, max: f64, count: usize, spacing: Spacing) -> Vec<f64> {
    if count == 1 {
        return vec![min];
    }
    let last = (count - 1) as f64;
    (0..count)
        .map(|i| {
            let t = i as f64 / last;
            if i + 1 == count {
                return max;
            }
            match spacing {
                Spacing::Linear => min + t * (max - min),
                Spacing::Log => (min.ln() + t * (max.ln() - min.ln())).exp(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub family: Family,
    pub n_values: Vec<usize>,
    pub r2_grid: Vec<f64>,
    pub replications: usize,
    pub candidate_grid: CandidateGrid,
    /// CV folds for logistic candidates.
    pub folds: usize,
    pub test_size: usize,
    pub base_seed: u64,
    /// Worker threads; `None` defers to `STACKCAST_THREADS`, then to the core count.
    pub parallelism: Option<usize>,
    pub q: usize,
    pub p_fit: usize,
    pub sigma2: f64,
    /// `(r2, lambda)` pairs overriding the T-grid scale at matching r2 values.
    pub lambda_by_r2: Vec<(f64, f64)>,
    /// When false, `wall_seconds` is written as 0 so output is reproducible byte for byte.
    pub record_timing: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    family: Option<Family>,
    n_values: Option<Vec<usize>>,
    r2_grid: Option<Vec<f64>>,
    replications: Option<usize>,
    candidate_grid: Option<CandidateGrid>,
    folds: Option<usize>,
    test_size: Option<usize>,
    base_seed: Option<u64>,
    parallelism: Option<usize>,
    q: Option<usize>,
    p_fit: Option<usize>,
    sigma2: Option<f64>,
    lambda_by_r2: Option<Vec<(f64, f64)>>,
    record_timing: Option<bool>,
}

impl ExperimentConfig {
    /// Desk-scale defaults for `family`.
    pub fn default_for(family: Family) -> Self {
        let (r2_grid, candidate_grid, lambda_by_r2) = match family {
            Family::Linear => (
                vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8],
                CandidateGrid::g_default(),
                Vec::new(),
            ),
            Family::Logistic => (
                vec![0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
                CandidateGrid::lambda_default(),
                vec![
                    (0.2, 0.2),
                    (0.3, 0.2),
                    (0.4, 0.2),
                    (0.5, 0.1),
                    (0.6, 0.1),
                    (0.7, 0.1),
                ],
            ),
        };
        ExperimentConfig {
            family,
            n_values: vec![50, 100],
            r2_grid,
            replications: 200,
            candidate_grid,
            folds: 10,
            test_size: 500,
            base_seed: 1,
            parallelism: None,
            q: 1000,
            p_fit: 14,
            sigma2: 1.0,
            lambda_by_r2,
            record_timing: true,
        }
    }

    /// Parses a TOML document. Keys absent from the file keep the defaults of
    /// its `family` (or of `default_family` when the file names none).
    pub fn from_toml_str(text: &str, default_family: Family) -> Result<Self> {
        let file: ConfigFile =
            toml::from_str(text).map_err(|e| StackError::Config(e.to_string()))?;
        let mut c = Self::default_for(file.family.unwrap_or(default_family));
        macro_rules! overlay {
            ($($f:ident),*) => { $(if let Some(v) = file.$f { c.$f = v; })* };
        }
        overlay!(
            n_values,
            r2_grid,
            replications,
            candidate_grid,
            folds,
            test_size,
            base_seed,
            q,
            p_fit,
            sigma2,
            lambda_by_r2,
            record_timing
        );
        if file.parallelism.is_some() {
            c.parallelism = file.parallelism;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>, default_family: Family) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| StackError::io(path, e))?;
        Self::from_toml_str(&text, default_family)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(StackError::Config(m.to_string()));
        if self.n_values.is_empty() || self.r2_grid.is_empty() {
            return bad("n_values and r2_grid must be nonempty");
        }
        if self.n_values.contains(&0) {
            return bad("n_values must be positive");
        }
        if self.r2_grid.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return bad("r2 values must lie in (0, 1)");
        }
        if self.replications == 0 {
            return bad("replications must be at least 1");
        }
        if self.test_size == 0 {
            return bad("test_size must be at least 1");
        }
        if self.family == Family::Logistic && self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if self.parallelism == Some(0) {
            return bad("parallelism must be at least 1");
        }
        if self.p_fit == 0 || self.p_fit > self.q {
            return bad("need 1 <= p_fit <= q");
        }
        if !(self.sigma2 > 0.0) {
            return bad("sigma2 must be positive");
        }
        if self.lambda_by_r2.iter().any(|(_, l)| !(*l > 0.0)) {
            return bad("lambda_by_r2 scales must be positive");
        }
        self.candidate_grid.validate(self.family)
    }

    fn t_lambda(&self, r2: f64, default: f64) -> f64 {
        self.lambda_by_r2
            .iter()
            .find(|(r, _)| (r - r2).abs() < 1e-9)
            .map_or(default, |&(_, l)| l)
    }

    /// Candidate specs for the cell at `r2`.
    pub fn candidates(&self, r2: f64) -> Result<Vec<CandidateSpec>> {
        let tag = self.candidate_grid.tag();
        let make = |prior: Prior, v: f64| {
            let label = format!("{tag}={v}");
            match self.family {
                Family::Linear => CandidateSpec::linear(prior, self.sigma2, label),
                Family::Logistic => CandidateSpec::logistic(prior, label),
            }
        };
        let values = self.candidate_grid.values();
        values
            .iter()
            .map(|&v| {
                let prior = match (&self.candidate_grid, self.family) {
                    (CandidateGrid::G { .. }, _) => Prior::GPrior { g: v },
                    (
                        CandidateGrid::Gamma { .. } | CandidateGrid::Lambda { .. },
                        Family::Linear,
                    ) => Prior::IsotropicNormal { gamma2: v },
                    (
                        CandidateGrid::Gamma { .. } | CandidateGrid::Lambda { .. },
                        Family::Logistic,
                    ) => Prior::IsoNormalLogistic { lambda: v },
                    (CandidateGrid::T { lambda, .. }, Family::Linear) => Prior::MultiT {
                        nu: v,
                        scale: TScale::Zellner {
                            lambda: self.t_lambda(r2, *lambda),
                        },
                    },
                    (CandidateGrid::T { lambda, .. }, Family::Logistic) => Prior::MultiT {
                        nu: v,
                        scale: TScale::Identity {
                            lambda: self.t_lambda(r2, *lambda),
                        },
                    },
                };
                make(prior, v)
            })
            .collect()
    }

    fn scheme(&self, rep_seed: u64) -> CvScheme {
        match self.family {
            Family::Logistic => CvScheme::Kfold {
                folds: self.folds,
                seed: derive_seed(rep_seed, &[FOLD_STREAM]),
            },
            Family::Linear if self.candidate_grid.is_t() => CvScheme::LooRefit,
            Family::Linear => CvScheme::LooClosedForm,
        }
    }

    pub fn threads(&self) -> Result<usize> {
        if let Some(t) = self.parallelism {
            return Ok(t);
        }
        match std::env::var(THREADS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(t) if t > 0 => Ok(t),
                _ => Err(StackError::Config(format!(
                    "{THREADS_ENV} must be a positive integer, got '{v}'"
                ))),
            },
            Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        }
    }
}

/// One aggregated cell, as written to CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub family: Family,
    pub prior_family: String,
    pub n: usize,
    pub r2: f64,
    pub replications: usize,
    pub ratio: f64,
    pub mc_se: f64,
    pub mean_stacked_loss: f64,
    pub mean_best_loss: f64,
    pub wall_seconds: f64,
}

/// Per-cell bookkeeping that is not part of the CSV.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CellDiagnostics {
    pub failed: usize,
    /// Replications whose stacked CV criterion exceeded the best candidate's.
    pub oracle_violations: usize,
    /// First few replication errors, formatted.
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub diagnostics: Vec<CellDiagnostics>,
}

impl ExperimentResult {
    pub fn oracle_violations(&self) -> usize {
        self.diagnostics.iter().map(|d| d.oracle_violations).sum()
    }

    /// Successful replications across all cells, i.e. oracle checks performed.
    pub fn replications_run(&self) -> usize {
        self.rows.iter().map(|r| r.replications).sum()
    }
}

struct RepOutcome {
    stacked: f64,
    best: f64,
    oracle_ok: bool,
}

fn run_replication(
    config: &ExperimentConfig,
    specs: &[CandidateSpec],
    n: usize,
    r2: f64,
    rep: usize,
) -> Result<RepOutcome> {
    let seed = derive_seed(config.base_seed, &[n as u64, r2.to_bits(), rep as u64]);
    let dgp = DgpConfig {
        family: config.family,
        n,
        q: config.q,
        p_fit: config.p_fit,
        r2,
        sigma2: config.sigma2,
        seed,
    };
    let (train, test) = generate_with_test(&dgp, config.test_size)?;
    let model = fit_stack(&train, specs, config.scheme(seed))?;
    let truth = test.truth().expect("simulated data carries truth");
    let mut acc = LossAccumulator::new();
    acc.push(
        truth,
        &model.predict(test.x())?,
        &model.predict_best(test.x())?,
    )?;
    Ok(RepOutcome {
        stacked: acc.mean_stacked(),
        best: acc.mean_best(),
        oracle_ok: model.satisfies_cv_oracle(),
    })
}

fn run_cell(config: &ExperimentConfig, n: usize, r2: f64) -> Result<(ResultRow, CellDiagnostics)> {
    let start = Instant::now();
    let specs = config.candidates(r2)?;
    let outcomes: Vec<Result<RepOutcome>> = (0..config.replications)
        .into_par_iter()
        .map(|rep| run_replication(config, &specs, n, r2, rep))
        .collect();

    let mut acc = LossAccumulator::new();
    let mut diag = CellDiagnostics::default();
    for (rep, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                acc.push_losses(o.stacked, o.best);
                diag.oracle_violations += usize::from(!o.oracle_ok);
            }
            Err(e) => {
                diag.failed += 1;
                if diag.errors.len() < 5 {
                    diag.errors.push(format!("replication {rep}: {e}"));
                }
            }
        }
    }
    if diag.failed * 100 > config.replications {
        return Err(StackError::CellFailed {
            n,
            r2,
            failed: diag.failed,
            replications: config.replications,
            first: diag.errors.first().cloned().unwrap_or_default(),
        });
    }
    let row = ResultRow {
        family: config.family,
        prior_family: config.candidate_grid.tag().to_string(),
        n,
        r2,
        replications: acc.replications(),
        ratio: acc.ratio()?,
        mc_se: acc.mc_standard_error(),
        mean_stacked_loss: acc.mean_stacked(),
        mean_best_loss: acc.mean_best(),
        wall_seconds: if config.record_timing {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        },
    };
    Ok((row, diag))
}

/// Runs every `(n, r2)` cell. Each replication draws from its own stream
/// `derive_seed(base_seed, [n, r2 bits, rep])`, so results do not depend on
/// the thread count or on which other cells are configured.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads()?)
        .build()
        .map_err(|e| StackError::Config(format!("thread pool: {e}")))?;
    let mut result = ExperimentResult::default();
    for &n in &config.n_values {
        for &r2 in &config.r2_grid {
            let (row, diag) = pool.install(|| run_cell(config, n, r2))?;
            result.rows.push(row);
            result.diagnostics.push(diag);
        }
    }
    Ok(result)
}

/// `x` with 10 significant digits, trailing zeros dropped; exponent form
/// outside `[1e-5, 1e10)`.
pub fn format_sig10(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.9e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..10).contains(&exp) {
        let decimals = (9 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        trim_zeros(&s).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn csv_string(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.family,
            r.prior_family,
            r.n,
            format_sig10(r.r2),
            r.replications,
            format_sig10(r.ratio),
            format_sig10(r.mc_se),
            format_sig10(r.mean_stacked_loss),
            format_sig10(r.mean_best_loss),
            format_sig10(r.wall_seconds),
        );
    }
    out
}

pub fn emit_csv(result: &ExperimentResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, csv_string(&result.rows)).map_err(|e| StackError::io(path, e))
}

/// Parses text produced by [`csv_string`].
pub fn parse_result_csv(text: &str) -> Result<Vec<ResultRow>> {
    let first = text.lines().next().unwrap_or("");
    if first != CSV_HEADER {
        return Err(StackError::Parse {
            row: 1,
            column: 1,
            message: "unexpected header".into(),
        });
    }
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    reader
        .deserialize::<ResultRow>()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| StackError::Parse {
                row: i + 2,
                column: 0,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_result_csv(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| StackError::io(path, e))?;
    parse_result_csv(&text)
}
