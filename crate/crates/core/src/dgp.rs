//! Data model, CSV ingestion and the two synthetic data-generating processes.
//!
//! Both generators draw a `q`-dimensional standard normal covariate vector per
//! row, form the true linear predictor `c * x^T beta` over all `q` columns, and
//! hand back only the first `p_fit` columns as the fitted design. Every
//! candidate is therefore misspecified whenever `p_fit < q`.

use std::f64::consts::{PI, SQRT_2};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::candidates::expit;
use crate::error::{Result, StackError};

/// Outcome family. Doubles as the data type of `y` and the candidate likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Continuous outcome, Gaussian likelihood.
    Linear,
    /// Binary {0,1} outcome, Bernoulli likelihood with logit link.
    Logistic,
}

impl Family {
    pub fn as_str(&self) -> &'static str {
        match self {
            Family::Linear => "linear",
            Family::Logistic => "logistic",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Family {
    type Err = StackError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Family::Linear),
            "logistic" | "binary" => Ok(Family::Logistic),
            other => Err(StackError::InvalidInput(format!(
                "unknown family '{other}'"
            ))),
        }
    }
}

/// Covariates, outcome and (for simulations) the true conditional mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    truth: Option<DVector<f64>>,
    family: Family,
    columns: Vec<String>,
}

impl Dataset {
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        truth: Option<DVector<f64>>,
        family: Family,
    ) -> Result<Self> {
        let columns = (1..=x.ncols()).map(|j| format!("x{j}")).collect();
        Self::with_columns(x, y, truth, family, columns)
    }

    pub fn with_columns(
        x: DMatrix<f64>,
        y: DVector<f64>,
        truth: Option<DVector<f64>>,
        family: Family,
        columns: Vec<String>,
    ) -> Result<Self> {
        let (n, p) = x.shape();
        if n == 0 || p == 0 {
            return Err(StackError::InvalidInput(format!(
                "dataset needs at least one row and one column, got {n}x{p}"
            )));
        }
        if y.len() != n {
            return Err(StackError::DimensionMismatch {
                what: "outcome length",
                expected: n,
                got: y.len(),
            });
        }
        if columns.len() != p {
            return Err(StackError::DimensionMismatch {
                what: "column names",
                expected: p,
                got: columns.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(StackError::NonFinite("covariates"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(StackError::NonFinite("outcome"));
        }
        if let Some(t) = &truth {
            if t.len() != n {
                return Err(StackError::DimensionMismatch {
                    what: "truth length",
                    expected: n,
                    got: t.len(),
                });
            }
        }
        if family == Family::Logistic {
            if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(StackError::InvalidInput(
                    "binary outcome must contain only 0 and 1".into(),
                ));
            }
            if let Some(t) = &truth {
                if t.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
                    return Err(StackError::InvalidInput(
                        "true probabilities must lie strictly inside (0, 1)".into(),
                    ));
                }
            }
        }
        Ok(Dataset {
            x,
            y,
            truth,
            family,
            columns,
        })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn truth(&self) -> Option<&DVector<f64>> {
        self.truth.as_ref()
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Sub-dataset made of the given rows, in the given order. Truth is dropped.
    pub(crate) fn select_rows(&self, rows: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
        let x = DMatrix::from_fn(rows.len(), self.p(), |i, j| self.x[(rows[i], j)]);
        let y = DVector::from_fn(rows.len(), |i, _| self.y[rows[i]]);
        (x, y)
    }
}

/// Coefficient `c * sqrt(2) * j^{-3/2}` of the decaying linear design (`j >= 1`).
pub fn coef_linear(j: usize, c: f64) -> f64 {
    debug_assert!(j >= 1);
    c * SQRT_2 * (j as f64).powf(-1.5)
}

/// Alternating-sign coefficient `(-1)^{j+1} sqrt(2) j^{-3/2}` of the logistic design.
pub fn coef_logistic(j: usize) -> f64 {
    debug_assert!(j >= 1);
    let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
    sign * SQRT_2 * (j as f64).powf(-1.5)
}

/// Scale `c` so that `c^2 |beta|^2 / (c^2 |beta|^2 + noise_var) = r2`.
///
/// Uses `Var[x^T beta] = |beta|^2`, which holds for i.i.d. standard normal covariates.
pub fn signal_scale(beta: &[f64], noise_var: f64, r2: f64) -> Result<f64> {
    if !(r2 > 0.0 && r2 < 1.0) {
        return Err(StackError::InvalidInput(format!(
            "r2 must be in (0,1), got {r2}"
        )));
    }
    if !(noise_var > 0.0) {
        return Err(StackError::InvalidInput(format!(
            "noise variance must be positive, got {noise_var}"
        )));
    }
    let norm2: f64 = beta.iter().map(|b| b * b).sum();
    if !(norm2 > 0.0) || !norm2.is_finite() {
        return Err(StackError::DegenerateSignal);
    }
    Ok((r2 * noise_var / ((1.0 - r2) * norm2)).sqrt())
}

/// Variance of the standard logistic distribution.
pub const LOGISTIC_NOISE_VAR: f64 = PI * PI / 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub family: Family,
    pub n: usize,
    /// Number of generating covariates (truncation point of the coefficient series).
    pub q: usize,
    /// Number of leading covariates handed to the candidates.
    pub p_fit: usize,
    pub r2: f64,
    /// Error variance for the linear design; ignored for logistic.
    pub sigma2: f64,
    pub seed: u64,
}

impl DgpConfig {
    pub fn linear(n: usize, r2: f64, seed: u64) -> Self {
        DgpConfig {
            family: Family::Linear,
            n,
            q: 1000,
            p_fit: 14,
            r2,
            sigma2: 1.0,
            seed,
        }
    }

    pub fn logistic(n: usize, r2: f64, seed: u64) -> Self {
        DgpConfig {
            family: Family::Logistic,
            ..DgpConfig::linear(n, r2, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(StackError::InvalidInput("n must be at least 1".into()));
        }
        if self.p_fit == 0 || self.p_fit > self.q {
            return Err(StackError::InvalidInput(format!(
                "need 1 <= p_fit <= q, got p_fit = {}, q = {}",
                self.p_fit, self.q
            )));
        }
        if !(self.r2 > 0.0 && self.r2 < 1.0) {
            return Err(StackError::InvalidInput(format!(
                "r2 must be in (0,1), got {}",
                self.r2
            )));
        }
        if self.family == Family::Linear && !(self.sigma2 > 0.0) {
            return Err(StackError::InvalidInput(format!(
                "sigma2 must be positive, got {}",
                self.sigma2
            )));
        }
        Ok(())
    }

    /// Unscaled generating coefficients `beta_1..beta_q`.
    pub fn base_coefficients(&self) -> Vec<f64> {
        (1..=self.q)
            .map(|j| match self.family {
                Family::Linear => coef_linear(j, 1.0),
                Family::Logistic => coef_logistic(j),
            })
            .collect()
    }

    pub fn noise_var(&self) -> f64 {
        match self.family {
            Family::Linear => self.sigma2,
            Family::Logistic => LOGISTIC_NOISE_VAR,
        }
    }

    /// The scaled coefficients `c * beta` that hit the target `r2`.
    pub fn scaled_coefficients(&self) -> Result<Vec<f64>> {
        let beta = self.base_coefficients();
        let c = signal_scale(&beta, self.noise_var(), self.r2)?;
        Ok(beta.into_iter().map(|b| c * b).collect())
    }
}

/// Training data from `config`, drawn from a ChaCha8 stream seeded with `config.seed`.
pub fn generate(config: &DgpConfig) -> Result<Dataset> {
    config.validate()?;
    let beta = config.scaled_coefficients()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    draw(config, &beta, config.n, &mut rng)
}

/// Training data plus an independent test set of `test_size` rows sharing the
/// same coefficients. The test set is drawn after the training set from the same stream.
pub fn generate_with_test(config: &DgpConfig, test_size: usize) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    if test_size == 0 {
        return Err(StackError::InvalidInput(
            "test size must be at least 1".into(),
        ));
    }
    let beta = config.scaled_coefficients()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let train = draw(config, &beta, config.n, &mut rng)?;
    let test = draw(config, &beta, test_size, &mut rng)?;
    Ok((train, test))
}

fn draw(config: &DgpConfig, beta: &[f64], rows: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let p = config.p_fit;
    let mut x = DMatrix::zeros(rows, p);
    let mut eta = DVector::zeros(rows);
    for i in 0..rows {
        let mut acc = 0.0;
        for (j, b) in beta.iter().enumerate() {
            let v: f64 = rng.sample(StandardNormal);
            acc += b * v;
            if j < p {
                x[(i, j)] = v;
            }
        }
        eta[i] = acc;
    }
    let (y, truth) = match config.family {
        Family::Linear => {
            let sd = config.sigma2.sqrt();
            let y = DVector::from_fn(rows, |i, _| {
                let e: f64 = rng.sample(StandardNormal);
                eta[i] + sd * e
            });
            (y, eta)
        }
        Family::Logistic => {
            let prob = eta.map(expit);
            let y = DVector::from_fn(rows, |i, _| {
                let u: f64 = rng.random();
                if u < prob[i] {
                    1.0
                } else {
                    0.0
                }
            });
            (y, prob)
        }
    };
    Dataset::new(x, y, Some(truth), config.family)
}

/// Mixes a base seed with a path of indices into an independent 64-bit seed.
///
/// SplitMix64 finalizer applied per component, so `(seed, [cell, rep])` streams
/// never collide for distinct paths in practice and do not depend on thread scheduling.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    path.iter().fold(mix(base), |acc, &k| mix(acc ^ mix(k)))
}

/// Reads a rectangular numeric CSV with a header row.
///
/// Every column except `outcome_column` becomes a covariate, in file order.
/// The family is `Logistic` when the outcome holds only 0 and 1.
pub fn load_csv(path: impl AsRef<Path>, outcome_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| StackError::io(path, e))?;
    parse_csv(&text, outcome_column)
}

/// Same as [`load_csv`] but from an in-memory string.
pub fn parse_csv(text: &str, outcome_column: &str) -> Result<Dataset> {
    let (header, rows) = read_numeric_table(text)?;
    let outcome_idx = header
        .iter()
        .position(|h| h == outcome_column)
        .ok_or_else(|| {
            StackError::InvalidInput(format!("outcome column '{outcome_column}' not in header"))
        })?;
    if header.len() < 2 {
        return Err(StackError::InvalidInput(
            "need at least one covariate column besides the outcome".into(),
        ));
    }
    let p = header.len() - 1;
    let n = rows.len();
    let columns: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != outcome_idx)
        .map(|(_, h)| h.clone())
        .collect();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for (i, row) in rows.iter().enumerate() {
        let mut col = 0;
        for (j, &v) in row.iter().enumerate() {
            if j == outcome_idx {
                y[i] = v;
            } else {
                x[(i, col)] = v;
                col += 1;
            }
        }
    }
    let family = if y.iter().all(|&v| v == 0.0 || v == 1.0) {
        Family::Logistic
    } else {
        Family::Linear
    };
    Dataset::with_columns(x, y, None, family, columns)
}

/// Covariate matrix for prediction: selects `columns` by name from a CSV.
pub fn load_design(path: impl AsRef<Path>, columns: &[String]) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| StackError::io(path, e))?;
    let (header, rows) = read_numeric_table(&text)?;
    let idx = columns
        .iter()
        .map(|c| {
            header.iter().position(|h| h == c).ok_or_else(|| {
                StackError::InvalidInput(format!("column '{c}' missing from {}", path.display()))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(rows.len(), idx.len(), |i, j| {
        rows[i][idx[j]]
    }))
}

/// Header plus numeric rows. Row and column numbers in errors are 1-based, header = row 1.
fn read_numeric_table(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| StackError::Parse {
            row: 1,
            column: 0,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(StackError::Parse {
            row: 1,
            column: 0,
            message: "missing header row".into(),
        });
    }
    let mut rows = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let row_no = r + 2;
        let record = record.map_err(|e| StackError::Parse {
            row: row_no,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != header.len() {
            return Err(StackError::Parse {
                row: row_no,
                column: record.len().min(header.len()) + 1,
                message: format!(
                    "ragged row: {} fields, header has {}",
                    record.len(),
                    header.len()
                ),
            });
        }
        let values = record
            .iter()
            .enumerate()
            .map(|(c, field)| {
                field.parse::<f64>().map_err(|_| StackError::Parse {
                    row: row_no,
                    column: c + 1,
                    message: format!("non-numeric value '{field}'"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(StackError::Parse {
            row: 2,
            column: 0,
            message: "no data rows".into(),
        });
    }
    Ok((header, rows))
}
