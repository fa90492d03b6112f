//! Stack assembly, prediction, best-candidate selection and evaluation ratios.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::candidates::{self, CandidateSpec, FitResult};
use crate::dgp::{Dataset, Family};
use crate::error::{Result, StackError};
use crate::loo::{self, CvPredictionMatrix, CvScheme};
use crate::weights::{self, GramMatrix, WeightVector};

/// A fitted stack: full-data candidate fits plus CV-estimated weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackModel {
    pub family: Family,
    pub specs: Vec<CandidateSpec>,
    pub fits: Vec<FitResult>,
    pub weights: WeightVector,
    /// Candidate with the smallest CV criterion; ties go to the lowest index.
    pub best_index: usize,
    /// Per-candidate CV criterion `|e~_k|^2`.
    pub cv_errors: Vec<f64>,
    pub scheme: CvScheme,
    /// Covariate names, in the column order the coefficients expect.
    pub columns: Vec<String>,
}

/// Intermediate products of [`fit_stack`], kept for diagnostics.
#[derive(Debug, Clone)]
pub struct StackFit {
    pub model: StackModel,
    pub cv: CvPredictionMatrix,
    pub gram: GramMatrix,
}

fn argmin_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// Fits every candidate, builds the CV matrix under `scheme`, and solves for weights.
pub fn fit_stack(
    dataset: &Dataset,
    specs: &[CandidateSpec],
    scheme: CvScheme,
) -> Result<StackModel> {
    fit_stack_detailed(dataset, specs, scheme).map(|f| f.model)
}

pub fn fit_stack_detailed(
    dataset: &Dataset,
    specs: &[CandidateSpec],
    scheme: CvScheme,
) -> Result<StackFit> {
    let first = specs
        .first()
        .ok_or_else(|| StackError::InvalidInput("need at least one candidate".into()))?;
    let family = first.family();
    if let Some(odd) = specs.iter().find(|s| s.family() != family) {
        return Err(StackError::FamilyMismatch(format!(
            "candidate '{}' is {}, but '{}' is {}",
            odd.label(),
            odd.family(),
            first.label(),
            family
        )));
    }
    if family == Family::Logistic && dataset.family() != Family::Logistic {
        return Err(StackError::FamilyMismatch(
            "logistic candidates need a binary outcome".into(),
        ));
    }

    let fits = specs
        .par_iter()
        .map(|s| candidates::fit(dataset, s).map_err(|e| e.for_candidate(s.label())))
        .collect::<Result<Vec<_>>>()?;
    let cv = loo::cv_predictions_with_fits(dataset, specs, scheme, &fits)?;
    let resid = loo::residuals(dataset.y(), &cv)?;
    let cv_errors: Vec<f64> = resid.column_sq_norms().iter().copied().collect();
    let gram = GramMatrix::from_residuals(&resid)?;
    let weights = weights::solve(&gram);

    Ok(StackFit {
        model: StackModel {
            family,
            specs: specs.to_vec(),
            fits,
            best_index: argmin_first(&cv_errors),
            cv_errors,
            weights,
            scheme,
            columns: dataset.columns().to_vec(),
        },
        cv,
        gram,
    })
}

impl StackModel {
    pub fn n_features(&self) -> usize {
        self.fits.first().map_or(0, |f| f.beta.len())
    }

    fn check_design(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.n_features() {
            return Err(StackError::DimensionMismatch {
                what: "prediction design columns",
                expected: self.n_features(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    /// Prediction of a single candidate.
    pub fn predict_candidate(&self, k: usize, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_design(x)?;
        let fit = self
            .fits
            .get(k)
            .ok_or_else(|| StackError::InvalidInput(format!("candidate index {k} out of range")))?;
        Ok(candidates::predict_candidate(self.family, &fit.beta, x))
    }

    /// Prediction of the CV-selected candidate.
    pub fn predict_best(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.predict_candidate(self.best_index, x)
    }

    /// Weighted candidate predictions. Probabilities (not coefficients) are
    /// combined for logistic stacks. Zero-weight candidates are skipped.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.check_design(x)?;
        let mut out: Option<DVector<f64>> = None;
        for (k, &w) in self.weights.w.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let pk = self.predict_candidate(k, x)?;
            out = Some(match out {
                None if w == 1.0 => pk,
                None => pk * w,
                Some(acc) => acc + pk * w,
            });
        }
        Ok(out.unwrap_or_else(|| DVector::zeros(x.nrows())))
    }

    /// Stacked CV criterion `w^T S w`.
    pub fn stacked_cv_error(&self) -> f64 {
        self.weights.objective
    }

    /// Slack allowed for solver tolerance in the stacked-vs-best comparison.
    pub fn oracle_slack(&self) -> f64 {
        1e-9 * (1.0 + self.cv_errors.iter().sum::<f64>())
    }

    /// Stacked CV criterion no worse than the best single candidate's.
    pub fn satisfies_cv_oracle(&self) -> bool {
        self.stacked_cv_error() <= self.cv_errors[self.best_index] + self.oracle_slack()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| StackError::InvalidInput(format!("model serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| StackError::InvalidInput(format!("malformed model document: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| StackError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| StackError::io(path, e))?;
        Self::from_json(&text)
    }
}

/// `|truth - pred|^2`
pub fn squared_loss(truth: &DVector<f64>, pred: &DVector<f64>) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(StackError::DimensionMismatch {
            what: "prediction length",
            expected: truth.len(),
            got: pred.len(),
        });
    }
    Ok((truth - pred).norm_squared())
}

/// Per-replication test losses of the stack and of the selected candidate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossAccumulator {
    stacked: Vec<f64>,
    best: Vec<f64>,
}

impl LossAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_losses(&mut self, stacked: f64, best: f64) {
        self.stacked.push(stacked);
        self.best.push(best);
    }

    pub fn push(
        &mut self,
        truth: &DVector<f64>,
        stacked: &DVector<f64>,
        best: &DVector<f64>,
    ) -> Result<()> {
        let a = squared_loss(truth, stacked)?;
        let b = squared_loss(truth, best)?;
        self.push_losses(a, b);
        Ok(())
    }

    pub fn replications(&self) -> usize {
        self.stacked.len()
    }

    pub fn mean_stacked(&self) -> f64 {
        mean(&self.stacked)
    }

    pub fn mean_best(&self) -> f64 {
        mean(&self.best)
    }

    /// Ratio of the mean losses (averaged separately, then divided).
    pub fn ratio(&self) -> Result<f64> {
        if self.stacked.is_empty() {
            return Err(StackError::InvalidInput(
                "no replications accumulated".into(),
            ));
        }
        let den = self.mean_best();
        if den == 0.0 {
            return Err(StackError::InvalidInput(
                "best-candidate loss is zero; ratio undefined".into(),
            ));
        }
        Ok(self.mean_stacked() / den)
    }

    /// Delta-method standard error of the ratio of means; NaN below two replications.
    pub fn mc_standard_error(&self) -> f64 {
        let r = self.replications();
        if r < 2 {
            return f64::NAN;
        }
        let (ma, mb) = (self.mean_stacked(), self.mean_best());
        let ratio = ma / mb;
        let denom = (r - 1) as f64;
        let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
        for (a, b) in self.stacked.iter().zip(&self.best) {
            saa += (a - ma) * (a - ma);
            sbb += (b - mb) * (b - mb);
            sab += (a - ma) * (b - mb);
        }
        let var = (saa - 2.0 * ratio * sab + ratio * ratio * sbb) / denom;
        (var.max(0.0) / r as f64).sqrt() / mb
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Accumulates one replication of mean-prediction losses and returns the running ratio.
pub fn ratio_linear(
    truth_mu: &DVector<f64>,
    stacked_pred: &DVector<f64>,
    best_pred: &DVector<f64>,
    acc: &mut LossAccumulator,
) -> Result<f64> {
    acc.push(truth_mu, stacked_pred, best_pred)?;
    acc.ratio()
}

/// Probability-scale counterpart of [`ratio_linear`].
pub fn ratio_logistic(
    truth_p: &DVector<f64>,
    stacked_p: &DVector<f64>,
    best_p: &DVector<f64>,
    acc: &mut LossAccumulator,
) -> Result<f64> {
    acc.push(truth_p, stacked_p, best_p)?;
    acc.ratio()
}
