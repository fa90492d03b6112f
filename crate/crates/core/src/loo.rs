//! Out-of-sample candidate predictions.
//!
//! Linear candidates with a normal prior are linear smoothers, so leave-one-out
//! predictions follow from the full-data fit and the hat diagonal:
//!
//! ```text
//! y~_i = (yhat_i - P_ii y_i) / (1 - P_ii)
//! ```
//!
//! which is the Sherman-Morrison downdate of `X^T X + sigma^2 S^{-1}` by
//! `x_i x_i^T`. Everything else is refitted, either per row or per fold.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::candidates::{self, expit_open, CandidateSpec, FitResult, Penalty};
use crate::dgp::{derive_seed, Dataset, Family};
use crate::error::{Result, StackError};

/// Leverages closer than this to one are rejected.
pub const LEVERAGE_CUTOFF: f64 = 1.0 - 1e-12;

/// Maximum fold re-draws when a training fold ends up with a single class.
pub const MAX_FOLD_ATTEMPTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CvScheme {
    LooClosedForm,
    LooRefit,
    Kfold { folds: usize, seed: u64 },
}

/// `n x K` matrix of out-of-sample predictions, one column per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CvPredictionMatrix {
    pub values: DMatrix<f64>,
    pub scheme: CvScheme,
    pub labels: Vec<String>,
}

/// `y 1^T - Y~`: the jackknife residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMatrix {
    pub values: DMatrix<f64>,
}

impl ResidualMatrix {
    /// Squared column norms, i.e. each candidate's own CV criterion.
    pub fn column_sq_norms(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.values.ncols(),
            self.values.column_iter().map(|c| c.norm_squared()),
        )
    }
}

fn check_leverage(h: &DVector<f64>, label: &str) -> Result<()> {
    match h.iter().position(|&v| !(v < LEVERAGE_CUTOFF)) {
        Some(row) => Err(StackError::IllConditionedLeverage {
            row,
            label: label.to_string(),
        }),
        None => Ok(()),
    }
}

/// Closed-form leave-one-out predictions of a linear smoother.
pub fn loo_linear_closed_form(dataset: &Dataset, spec: &CandidateSpec) -> Result<DVector<f64>> {
    let fit = candidates::posterior_mean_linear(dataset, spec)?;
    closed_form_from_fit(dataset, spec, &fit)
}

fn closed_form_from_fit(
    dataset: &Dataset,
    spec: &CandidateSpec,
    fit: &FitResult,
) -> Result<DVector<f64>> {
    let h = candidates::hat_diag(dataset, spec)?;
    check_leverage(&h, spec.label())?;
    let fitted = dataset.x() * &fit.beta;
    let y = dataset.y();
    Ok(DVector::from_fn(dataset.n(), |i, _| {
        (fitted[i] - h[i] * y[i]) / (1.0 - h[i])
    }))
}

fn resolve(dataset: &Dataset, spec: &CandidateSpec) -> Result<Penalty> {
    spec.prior()
        .penalty(dataset.x())
        .map_err(|e| e.for_candidate(spec.label()))
}

fn out_of_fold(spec: &CandidateSpec, beta: &DVector<f64>, x: &DMatrix<f64>, row: usize) -> f64 {
    let eta = x.row(row).dot(&beta.transpose());
    match spec.family() {
        Family::Linear => eta,
        Family::Logistic => expit_open(eta),
    }
}

/// Literal leave-one-out: refit without each row in turn.
///
/// The prior is resolved against the full design, so design-scaled priors keep
/// the same `S_k` in every refit.
pub fn loo_linear_refit(dataset: &Dataset, spec: &CandidateSpec) -> Result<DVector<f64>> {
    if spec.family() != Family::Linear {
        return Err(StackError::FamilyMismatch(format!(
            "candidate '{}' is not linear",
            spec.label()
        )));
    }
    loo_refit(dataset, spec, None)
}

/// Row-by-row refit for any family. `warm` seeds iterative fits.
pub fn loo_refit(
    dataset: &Dataset,
    spec: &CandidateSpec,
    warm: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let penalty = resolve(dataset, spec)?;
    let n = dataset.n();
    let mut out = DVector::zeros(n);
    for i in 0..n {
        let rows: Vec<usize> = (0..n).filter(|&r| r != i).collect();
        let (x, y) = dataset.select_rows(&rows);
        if spec.family() == Family::Logistic {
            check_two_classes(&y).map_err(|_| {
                StackError::InvalidInput(format!(
                    "leaving out row {i} leaves a single outcome class"
                ))
            })?;
        }
        let fit =
            candidates::fit_with_penalty(&x, &y, spec, &penalty, warm).map_err(|e| match e {
                StackError::SingularSystem { label } => StackError::InvalidInput(format!(
                    "leave-one-out system without row {i} is singular for candidate '{label}'"
                )),
                other => other,
            })?;
        out[i] = out_of_fold(spec, &fit.beta, dataset.x(), i);
    }
    Ok(out)
}

fn check_two_classes(y: &DVector<f64>) -> std::result::Result<(), ()> {
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == y.len() {
        Err(())
    } else {
        Ok(())
    }
}

/// Fold index per row: a seeded permutation cut into contiguous blocks whose
/// sizes differ by at most one.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let base = n / folds;
    let extra = n % folds;
    let mut assignment = vec![0; n];
    let mut pos = 0;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        for &row in &order[pos..pos + size] {
            assignment[row] = f;
        }
        pos += size;
    }
    assignment
}

/// Assignment whose every training fold holds both classes (logistic), re-drawn
/// with derived sub-seeds up to [`MAX_FOLD_ATTEMPTS`] times.
fn usable_assignment(dataset: &Dataset, folds: usize, seed: u64) -> Result<Vec<usize>> {
    let y = dataset.y();
    for attempt in 0..MAX_FOLD_ATTEMPTS {
        let sub_seed = if attempt == 0 {
            seed
        } else {
            derive_seed(seed, &[attempt as u64])
        };
        let assign = fold_assignment(dataset.n(), folds, sub_seed);
        if dataset.family() != Family::Logistic {
            return Ok(assign);
        }
        let ok = (0..folds).all(|f| {
            let train: Vec<f64> = assign
                .iter()
                .zip(y.iter())
                .filter(|(&a, _)| a != f)
                .map(|(_, &v)| v)
                .collect();
            check_two_classes(&DVector::from_vec(train)).is_ok()
        });
        if ok {
            return Ok(assign);
        }
    }
    Err(StackError::DegenerateFold {
        attempts: MAX_FOLD_ATTEMPTS,
        seed,
    })
}

/// K-fold predictions: each row is predicted by the fit that excluded its fold.
pub fn kfold(
    dataset: &Dataset,
    spec: &CandidateSpec,
    folds: usize,
    seed: u64,
    warm: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let n = dataset.n();
    if folds < 2 || folds > n {
        return Err(StackError::InvalidInput(format!(
            "need 2 <= folds <= n, got folds = {folds}, n = {n}"
        )));
    }
    let penalty = resolve(dataset, spec)?;
    let assign = usable_assignment(dataset, folds, seed)?;
    let mut out = DVector::zeros(n);
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| assign[i] != f).collect();
        let (x, y) = dataset.select_rows(&train);
        let fit = candidates::fit_with_penalty(&x, &y, spec, &penalty, warm)?;
        for i in (0..n).filter(|&i| assign[i] == f) {
            out[i] = out_of_fold(spec, &fit.beta, dataset.x(), i);
        }
    }
    Ok(out)
}

/// K-fold predictions for a logistic candidate, warm-started from the full-data MAP.
pub fn kfold_logistic(
    dataset: &Dataset,
    spec: &CandidateSpec,
    folds: usize,
    seed: u64,
) -> Result<DVector<f64>> {
    if spec.family() != Family::Logistic {
        return Err(StackError::FamilyMismatch(format!(
            "candidate '{}' is not logistic",
            spec.label()
        )));
    }
    let full = candidates::map_logistic(dataset, spec)?;
    kfold(dataset, spec, folds, seed, Some(&full.beta))
}

/// One CV column under `scheme`. `full_fit` is the full-data estimate, reused
/// by the closed form and as a warm start for iterative refits.
pub(crate) fn cv_column(
    dataset: &Dataset,
    spec: &CandidateSpec,
    scheme: CvScheme,
    full_fit: &FitResult,
) -> Result<DVector<f64>> {
    let warm = if spec.is_linear_smoother() {
        None
    } else {
        Some(&full_fit.beta)
    };
    match scheme {
        CvScheme::LooClosedForm => {
            if !spec.is_linear_smoother() {
                return Err(StackError::NotALinearSmoother(spec.label().to_string()));
            }
            closed_form_from_fit(dataset, spec, full_fit)
        }
        CvScheme::LooRefit => loo_refit(dataset, spec, warm),
        CvScheme::Kfold { folds, seed } => kfold(dataset, spec, folds, seed, warm),
    }
}

/// Out-of-sample predictions for every candidate. Columns are computed in
/// parallel and collected in candidate order.
pub fn cv_predictions(
    dataset: &Dataset,
    specs: &[CandidateSpec],
    scheme: CvScheme,
) -> Result<CvPredictionMatrix> {
    let fits = specs
        .par_iter()
        .map(|s| candidates::fit(dataset, s).map_err(|e| e.for_candidate(s.label())))
        .collect::<Result<Vec<_>>>()?;
    cv_predictions_with_fits(dataset, specs, scheme, &fits)
}

pub(crate) fn cv_predictions_with_fits(
    dataset: &Dataset,
    specs: &[CandidateSpec],
    scheme: CvScheme,
    fits: &[FitResult],
) -> Result<CvPredictionMatrix> {
    let columns = specs
        .par_iter()
        .zip(fits.par_iter())
        .map(|(s, f)| cv_column(dataset, s, scheme, f).map_err(|e| e.for_candidate(s.label())))
        .collect::<Result<Vec<_>>>()?;
    let values = DMatrix::from_columns(&columns);
    Ok(CvPredictionMatrix {
        values,
        scheme,
        labels: specs.iter().map(|s| s.label().to_string()).collect(),
    })
}

/// `y 1^T - predictions`, column by column.
pub fn residuals(y: &DVector<f64>, predictions: &CvPredictionMatrix) -> Result<ResidualMatrix> {
    let v = &predictions.values;
    if v.nrows() != y.len() {
        return Err(StackError::DimensionMismatch {
            what: "prediction rows",
            expected: y.len(),
            got: v.nrows(),
        });
    }
    Ok(ResidualMatrix {
        values: DMatrix::from_fn(v.nrows(), v.ncols(), |i, k| y[i] - v[(i, k)]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::candidates::{Prior, TScale};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn data(seed: u64, n: usize, p: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal));
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        Dataset::new(x, y, None, Family::Linear).unwrap()
    }

    fn binary(seed: u64, n: usize, p: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal));
        let y = DVector::from_fn(n, |i, _| {
            let e = x[(i, 0)] + 0.5 * rng.sample::<f64, _>(StandardNormal);
            if e > 0.0 {
                1.0
            } else {
                0.0
            }
        });
        Dataset::new(x, y, None, Family::Logistic).unwrap()
    }

    #[test]
    fn two_point_hand_example() {
        let x = DMatrix::from_element(2, 1, 1.0);
        let y = DVector::from_vec(vec![0.0, 2.0]);
        let d = Dataset::new(x, y, None, Family::Linear).unwrap();
        let spec =
            CandidateSpec::linear(Prior::IsotropicNormal { gamma2: 1.0 }, 1.0, "iso").unwrap();
        let refit = loo_linear_refit(&d, &spec).unwrap();
        assert!((refit[0] - 1.0).abs() < 1e-15);
        let closed = loo_linear_closed_form(&d, &spec).unwrap();
        assert!((closed[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn closed_form_matches_refit() {
        for seed in 0..20 {
            let d = data(seed, 30, 5);
            for prior in [
                Prior::IsotropicNormal { gamma2: 0.5 },
                Prior::GPrior { g: 4.0 },
            ] {
                let spec = CandidateSpec::linear(prior, 1.3, "c").unwrap();
                let a = loo_linear_closed_form(&d, &spec).unwrap();
                let b = loo_linear_refit(&d, &spec).unwrap();
                for i in 0..30 {
                    assert!((a[i] - b[i]).abs() <= 1e-8 * (1.0 + b[i].abs()));
                }
            }
        }
    }

    #[test]
    fn noiseless_ols_interpolates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(20, 3, |_, _| rng.sample(StandardNormal));
        let beta = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let y = &x * beta;
        let d = Dataset::new(x, y.clone(), None, Family::Linear).unwrap();
        let spec =
            CandidateSpec::linear(Prior::IsotropicNormal { gamma2: 1e12 }, 1.0, "ols").unwrap();
        let loo = loo_linear_closed_form(&d, &spec).unwrap();
        assert!((loo - y).amax() < 1e-8);
    }

    #[test]
    fn zero_row_keeps_fitted_value() {
        let mut d = data(4, 12, 2);
        let mut x = d.x().clone();
        x.row_mut(3).fill(0.0);
        d = Dataset::new(x, d.y().clone(), None, Family::Linear).unwrap();
        let spec = CandidateSpec::linear(Prior::IsotropicNormal { gamma2: 2.0 }, 1.0, "z").unwrap();
        let loo = loo_linear_closed_form(&d, &spec).unwrap();
        assert_eq!(loo[3], 0.0);
    }

    #[test]
    fn zero_outcome_predictions_vanish() {
        let d = data(5, 10, 2);
        let d = Dataset::new(d.x().clone(), DVector::zeros(10), None, Family::Linear).unwrap();
        let spec = CandidateSpec::linear(Prior::GPrior { g: 1.0 }, 1.0, "g").unwrap();
        assert_eq!(loo_linear_refit(&d, &spec).unwrap(), DVector::zeros(10));
    }

    #[test]
    fn leverage_one_is_rejected() {
        // A single observation carrying the only nonzero entry of column 2.
        let mut x = DMatrix::from_element(5, 2, 0.0);
        for i in 0..5 {
            x[(i, 0)] = 1.0;
        }
        x[(2, 1)] = 1.0;
        let d = Dataset::new(x, DVector::from_element(5, 1.0), None, Family::Linear).unwrap();
        let spec =
            CandidateSpec::linear(Prior::IsotropicNormal { gamma2: 1e15 }, 1.0, "flat").unwrap();
        match loo_linear_closed_form(&d, &spec) {
            Err(StackError::IllConditionedLeverage { row, label }) => {
                assert_eq!(row, 2);
                assert_eq!(label, "flat");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sherman_morrison_decomposition() {
        // y - y~ = (I + Q)(I - P) y with Q = diag(P_ii / (1 - P_ii))
        let d = data(6, 25, 4);
        let spec =
            CandidateSpec::linear(Prior::IsotropicNormal { gamma2: 0.8 }, 1.0, "iso").unwrap();
        let p = candidates::hat_matrix(&d, &spec).unwrap();
        let q = DMatrix::from_diagonal(&p.diagonal().map(|h| h / (1.0 - h)));
        let id = DMatrix::identity(25, 25);
        let rhs = (&id + q) * (&id - &p) * d.y();
        let lhs = d.y() - loo_linear_closed_form(&d, &spec).unwrap();
        assert!((lhs - rhs).amax() < 1e-10);
    }

    #[test]
    fn folds_are_balanced_and_deterministic() {
        for (n, k) in [(10, 3), (50, 10), (7, 7), (101, 4)] {
            let a = fold_assignment(n, k, 42);
            assert_eq!(a, fold_assignment(n, k, 42));
            let mut sizes = vec![0usize; k];
            for &f in &a {
                sizes[f] += 1;
            }
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1, "{sizes:?}");
        }
        assert_ne!(fold_assignment(50, 10, 1), fold_assignment(50, 10, 2));
    }

    #[test]
    fn kfold_with_n_folds_is_loo() {
        let d = binary(7, 20, 2);
        let spec = CandidateSpec::logistic(Prior::IsoNormalLogistic { lambda: 1.0 }, "l").unwrap();
        let a = kfold_logistic(&d, &spec, 20, 9).unwrap();
        let full = candidates::map_logistic(&d, &spec).unwrap();
        let b = loo_refit(&d, &spec, Some(&full.beta)).unwrap();
        assert!((&a - &b).amax() < 1e-9);
        assert_eq!(a, kfold_logistic(&d, &spec, 20, 9).unwrap());
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn kfold_rejects_single_class_training() {
        let x = DMatrix::from_fn(6, 1, |i, _| i as f64);
        let y = DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let d = Dataset::new(x, y, None, Family::Logistic).unwrap();
        let spec = CandidateSpec::logistic(Prior::IsoNormalLogistic { lambda: 1.0 }, "l").unwrap();
        // the fold holding the only positive always leaves a single class behind
        assert!(matches!(
            kfold_logistic(&d, &spec, 3, 0),
            Err(StackError::DegenerateFold { .. })
        ));
        assert!(kfold_logistic(&d, &spec, 1, 0).is_err());
    }

    #[test]
    fn t_prior_cannot_use_closed_form() {
        let d = data(8, 15, 2);
        let spec = CandidateSpec::linear(
            Prior::MultiT {
                nu: 3.0,
                scale: TScale::Identity { lambda: 1.0 },
            },
            1.0,
            "t",
        )
        .unwrap();
        assert!(cv_predictions(&d, std::slice::from_ref(&spec), CvScheme::LooClosedForm).is_err());
        let m = cv_predictions(&d, &[spec], CvScheme::LooRefit).unwrap();
        assert_eq!(m.values.shape(), (15, 1));
    }

    #[test]
    fn residual_arithmetic() {
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let preds = CvPredictionMatrix {
            values: DMatrix::from_element(2, 1, 0.5),
            scheme: CvScheme::LooRefit,
            labels: vec!["a".into()],
        };
        let r = residuals(&y, &preds).unwrap();
        assert_eq!(r.values.as_slice(), &[0.5, -0.5]);
        let same = CvPredictionMatrix {
            values: DMatrix::from_columns(&[y.clone(), y.clone()]),
            ..preds.clone()
        };
        assert_eq!(residuals(&y, &same).unwrap().values, DMatrix::zeros(2, 2));
        assert!(residuals(&DVector::zeros(3), &preds).is_err());
    }

    #[test]
    fn residuals_reconstruct_outcome() {
        let d = data(9, 30, 3);
        let specs: Vec<_> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&g| CandidateSpec::linear(Prior::GPrior { g }, 1.0, format!("g{g}")).unwrap())
            .collect();
        let m = cv_predictions(&d, &specs, CvScheme::LooClosedForm).unwrap();
        let r = residuals(d.y(), &m).unwrap();
        for k in 0..3 {
            for i in 0..30 {
                let (yi, mi) = (d.y()[i], m.values[(i, k)]);
                // one rounding in the subtraction, one in the addition
                let back = r.values[(i, k)] + mi;
                assert!((back - yi).abs() <= 2.0 * f64::EPSILON * (yi.abs() + mi.abs()));
            }
            let direct: f64 = (d.y() - m.values.column(k)).norm_squared();
            assert_eq!(r.column_sq_norms()[k], direct);
        }
    }
}
