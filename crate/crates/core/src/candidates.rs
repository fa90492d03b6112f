//! Candidate Bayesian regressions and their point estimates.
//!
//! Linear candidates with a normal prior `beta ~ N(0, S)` have the closed-form
//! posterior mean `(X^T X + sigma^2 S^{-1})^{-1} X^T y`, which is also the
//! ridge estimator when `S = gamma^2 I`. Everything else (logistic likelihood,
//! multivariate-T prior) is fitted as a MAP estimate by damped Newton.
//!
//! Priors are stored in terms of their *precision* `S^{-1}` once resolved
//! against a design matrix. Priors that depend on the design (the g-prior,
//! Zellner-scaled T) are resolved against the full-data `X` and then held fixed
//! while leave-one-out or k-fold refits run on subsets of the rows.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dgp::{Dataset, Family};
use crate::error::{Result, StackError};
use crate::optim::{self, NewtonOptions, Objective};

/// Scale matrix of a multivariate-T prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TScale {
    /// `lambda * I`
    Identity { lambda: f64 },
    /// `lambda * (X^T X)^{-1}`, resolved against the fitting design.
    Zellner { lambda: f64 },
    /// An explicit SPD matrix.
    Matrix { scale: DMatrix<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prior {
    /// `N(0, gamma2 I)`
    IsotropicNormal { gamma2: f64 },
    /// Zellner's g-prior `N(0, g (X^T X)^{-1})`.
    GPrior { g: f64 },
    /// `N(0, cov)` with an arbitrary SPD covariance.
    GeneralNormal { cov: DMatrix<f64> },
    /// `N(0, lambda I)`; the logistic-family spelling of the isotropic prior.
    IsoNormalLogistic { lambda: f64 },
    /// Multivariate T with `nu` degrees of freedom.
    MultiT { nu: f64, scale: TScale },
}

const SPD_REL_TOL: f64 = 1e-10;

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(StackError::InvalidInput(format!(
            "{name} must be positive and finite, got {v}"
        )))
    }
}

fn check_spd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(StackError::InvalidInput(format!(
            "{name} must be a non-empty square matrix"
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(StackError::NonFinite("prior matrix"));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let asym = (m - m.transpose()).amax();
    if asym > SPD_REL_TOL * scale {
        return Err(StackError::Asymmetric(asym));
    }
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > SPD_REL_TOL * hi.abs()) {
        return Err(StackError::InvalidInput(format!(
            "{name} is not positive definite (eigenvalues in [{lo:e}, {hi:e}])"
        )));
    }
    Ok(())
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        match self {
            Prior::IsotropicNormal { gamma2 } => check_positive("gamma2", *gamma2),
            Prior::GPrior { g } => check_positive("g", *g),
            Prior::GeneralNormal { cov } => check_spd("prior covariance", cov),
            Prior::IsoNormalLogistic { lambda } => check_positive("lambda", *lambda),
            Prior::MultiT { nu, scale } => {
                check_positive("nu", *nu)?;
                match scale {
                    TScale::Identity { lambda } | TScale::Zellner { lambda } => {
                        check_positive("lambda", *lambda)
                    }
                    TScale::Matrix { scale } => check_spd("T scale", scale),
                }
            }
        }
    }

    pub fn is_normal(&self) -> bool {
        !matches!(self, Prior::MultiT { .. })
    }

    /// Short tag used in CSV output and model files.
    pub fn family_tag(&self) -> &'static str {
        match self {
            Prior::IsotropicNormal { .. } => "gamma",
            Prior::GPrior { .. } => "g",
            Prior::GeneralNormal { .. } => "normal",
            Prior::IsoNormalLogistic { .. } => "lambda",
            Prior::MultiT { .. } => "t",
        }
    }

    /// Resolves the prior precision against the design `x`.
    pub(crate) fn penalty(&self, x: &DMatrix<f64>) -> Result<Penalty> {
        let p = x.ncols();
        let dim_check = |m: &DMatrix<f64>| {
            if m.nrows() == p {
                Ok(())
            } else {
                Err(StackError::DimensionMismatch {
                    what: "prior matrix dimension",
                    expected: p,
                    got: m.nrows(),
                })
            }
        };
        let zellner = |scale: f64| -> Result<DMatrix<f64>> {
            let xtx = x.tr_mul(x);
            require_full_rank(&xtx)?;
            Ok(xtx / scale)
        };
        let spd_inverse = |m: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            dim_check(m)?;
            Cholesky::new(m.clone())
                .map(|c| c.inverse())
                .ok_or_else(|| StackError::InvalidInput("prior matrix is not SPD".into()))
        };
        let (kind, precision) = match self {
            Prior::IsotropicNormal { gamma2 } => {
                (PenaltyKind::Gaussian, DMatrix::identity(p, p) / *gamma2)
            }
            Prior::IsoNormalLogistic { lambda } => {
                (PenaltyKind::Gaussian, DMatrix::identity(p, p) / *lambda)
            }
            Prior::GPrior { g } => (PenaltyKind::Gaussian, zellner(*g)?),
            Prior::GeneralNormal { cov } => (PenaltyKind::Gaussian, spd_inverse(cov)?),
            Prior::MultiT { nu, scale } => {
                let precision = match scale {
                    TScale::Identity { lambda } => DMatrix::identity(p, p) / *lambda,
                    TScale::Zellner { lambda } => zellner(*lambda)?,
                    TScale::Matrix { scale } => spd_inverse(scale)?,
                };
                (PenaltyKind::StudentT { nu: *nu }, precision)
            }
        };
        Ok(Penalty { kind, precision })
    }
}

fn require_full_rank(xtx: &DMatrix<f64>) -> Result<()> {
    let diag_max = xtx.diagonal().max();
    let ok = Cholesky::new(xtx.clone())
        .map(|c| {
            let l = c.l();
            (0..l.nrows()).all(|i| l[(i, i)] * l[(i, i)] > 1e-12 * diag_max)
        })
        .unwrap_or(false);
    if ok && diag_max > 0.0 {
        Ok(())
    } else {
        Err(StackError::InvalidInput(
            "design-scaled prior requires X to have full column rank".into(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum PenaltyKind {
    Gaussian,
    StudentT { nu: f64 },
}

/// Negative log prior density (up to constants) in terms of a precision matrix.
#[derive(Debug, Clone)]
pub(crate) struct Penalty {
    pub kind: PenaltyKind,
    pub precision: DMatrix<f64>,
}

impl Penalty {
    fn dim(&self) -> f64 {
        self.precision.nrows() as f64
    }

    pub fn value(&self, beta: &DVector<f64>) -> f64 {
        let q = beta.dot(&(&self.precision * beta));
        match self.kind {
            PenaltyKind::Gaussian => 0.5 * q,
            PenaltyKind::StudentT { nu } => 0.5 * (nu + self.dim()) * (q / nu).ln_1p(),
        }
    }

    pub fn gradient(&self, beta: &DVector<f64>) -> DVector<f64> {
        let ab = &self.precision * beta;
        match self.kind {
            PenaltyKind::Gaussian => ab,
            PenaltyKind::StudentT { nu } => {
                let q = beta.dot(&ab);
                ab * ((nu + self.dim()) / (nu + q))
            }
        }
    }

    pub fn hessian(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        match self.kind {
            PenaltyKind::Gaussian => self.precision.clone(),
            PenaltyKind::StudentT { nu } => {
                let ab = &self.precision * beta;
                let q = beta.dot(&ab);
                let k = nu + self.dim();
                &self.precision * (k / (nu + q))
                    - (&ab * ab.transpose()) * (2.0 * k / (nu + q).powi(2))
            }
        }
    }

    /// Drops the negative rank-one term of the T curvature.
    pub fn convex_curvature(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        match self.kind {
            PenaltyKind::Gaussian => self.precision.clone(),
            PenaltyKind::StudentT { nu } => {
                let q = beta.dot(&(&self.precision * beta));
                &self.precision * ((nu + self.dim()) / (nu + q))
            }
        }
    }

    /// The Gaussian penalty sharing this precision, used to initialise T fits.
    pub fn gaussian_counterpart(&self) -> Penalty {
        Penalty {
            kind: PenaltyKind::Gaussian,
            precision: self.precision.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSpec {
    family: Family,
    prior: Prior,
    sigma2: f64,
    label: String,
}

impl CandidateSpec {
    pub fn linear(prior: Prior, sigma2: f64, label: impl Into<String>) -> Result<Self> {
        prior.validate()?;
        check_positive("sigma2", sigma2)?;
        Ok(CandidateSpec {
            family: Family::Linear,
            prior,
            sigma2,
            label: label.into(),
        })
    }

    pub fn logistic(prior: Prior, label: impl Into<String>) -> Result<Self> {
        prior.validate()?;
        if let Prior::GPrior { .. } = prior {
            return Err(StackError::InvalidInput(
                "the g-prior is defined for linear candidates only".into(),
            ));
        }
        Ok(CandidateSpec {
            family: Family::Logistic,
            prior,
            sigma2: 1.0,
            label: label.into(),
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// True when the candidate is a linear smoother `y -> P y` (normal prior, linear family).
    pub fn is_linear_smoother(&self) -> bool {
        self.family == Family::Linear && self.prior.is_normal()
    }
}

/// Point estimate plus optimizer diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: DVector<f64>,
    pub iterations: usize,
    /// Residual norm of the normal equations (closed form) or gradient inf-norm (Newton).
    pub grad_norm: f64,
    pub converged: bool,
    /// Newton iterations where the exact Hessian failed to factor.
    pub fallback_steps: usize,
}

/// Logistic function `1 / (1 + e^{-t})`, evaluated without overflow.
pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `expit` clamped to the open unit interval, for probabilities that feed squared-error criteria.
pub(crate) fn expit_open(t: f64) -> f64 {
    expit(t).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// `log(1 + e^t)`
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn ensure_family(spec: &CandidateSpec, family: Family) -> Result<()> {
    if spec.family == family {
        Ok(())
    } else {
        Err(StackError::FamilyMismatch(format!(
            "candidate '{}' is {}, expected {}",
            spec.label, spec.family, family
        )))
    }
}

/// `X^T X + sigma^2 * precision`, symmetrized.
fn linear_system(x: &DMatrix<f64>, sigma2: f64, penalty: &Penalty) -> DMatrix<f64> {
    let m = x.tr_mul(x) + &penalty.precision * sigma2;
    (&m + m.transpose()) * 0.5
}

pub(crate) fn solve_linear(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma2: f64,
    penalty: &Penalty,
    label: &str,
) -> Result<FitResult> {
    let m = linear_system(x, sigma2, penalty);
    let chol = Cholesky::new(m.clone()).ok_or_else(|| StackError::SingularSystem {
        label: label.to_string(),
    })?;
    let rhs = x.tr_mul(y);
    let beta = chol.solve(&rhs);
    let grad_norm = (&m * &beta - &rhs).norm();
    Ok(FitResult {
        beta,
        iterations: 1,
        grad_norm,
        converged: true,
        fallback_steps: 0,
    })
}

/// Posterior mean of a linear-Gaussian candidate with a normal prior.
pub fn posterior_mean_linear(dataset: &Dataset, spec: &CandidateSpec) -> Result<FitResult> {
    ensure_family(spec, Family::Linear)?;
    if !spec.prior.is_normal() {
        return Err(StackError::NotALinearSmoother(spec.label.clone()));
    }
    let penalty = spec
        .prior
        .penalty(dataset.x())
        .map_err(|e| e.for_candidate(&spec.label))?;
    solve_linear(dataset.x(), dataset.y(), spec.sigma2, &penalty, &spec.label)
}

/// `L^{-1} X^T`, where `L L^T = X^T X + sigma^2 S^{-1}`; column norms are the leverages.
pub(crate) fn whitened_design(
    x: &DMatrix<f64>,
    sigma2: f64,
    penalty: &Penalty,
    label: &str,
) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(linear_system(x, sigma2, penalty)).ok_or_else(|| {
        StackError::SingularSystem {
            label: label.to_string(),
        }
    })?;
    let mut z = x.transpose();
    chol.l_dirty().solve_lower_triangular_mut(&mut z);
    Ok(z)
}

fn smoother_penalty(dataset: &Dataset, spec: &CandidateSpec) -> Result<Penalty> {
    ensure_family(spec, Family::Linear)?;
    if !spec.prior.is_normal() {
        return Err(StackError::NotALinearSmoother(spec.label.clone()));
    }
    spec.prior
        .penalty(dataset.x())
        .map_err(|e| e.for_candidate(&spec.label))
}

/// Diagonal of `P_k = X (X^T X + sigma^2 S^{-1})^{-1} X^T`, one row at a time.
pub fn hat_diag(dataset: &Dataset, spec: &CandidateSpec) -> Result<DVector<f64>> {
    let penalty = smoother_penalty(dataset, spec)?;
    let z = whitened_design(dataset.x(), spec.sigma2, &penalty, &spec.label)?;
    Ok(DVector::from_iterator(
        z.ncols(),
        z.column_iter().map(|c| c.norm_squared()),
    ))
}

/// The full `n x n` hat matrix. Quadratic memory; meant for verification.
pub fn hat_matrix(dataset: &Dataset, spec: &CandidateSpec) -> Result<DMatrix<f64>> {
    let penalty = smoother_penalty(dataset, spec)?;
    let z = whitened_design(dataset.x(), spec.sigma2, &penalty, &spec.label)?;
    let p = z.tr_mul(&z);
    Ok((&p + p.transpose()) * 0.5)
}

pub(crate) struct LogisticObjective<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: &'a DVector<f64>,
    pub penalty: &'a Penalty,
}

impl LogisticObjective<'_> {
    fn likelihood_hessian(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        let eta = self.x * beta;
        let mut wx = self.x.clone();
        for (i, mut row) in wx.row_iter_mut().enumerate() {
            let p = expit(eta[i]);
            row *= p * (1.0 - p);
        }
        self.x.tr_mul(&wx)
    }
}

impl Objective for LogisticObjective<'_> {
    fn value(&self, beta: &DVector<f64>) -> f64 {
        let eta = self.x * beta;
        let nll: f64 = eta
            .iter()
            .zip(self.y.iter())
            .map(|(&e, &y)| softplus(e) - y * e)
            .sum();
        nll + self.penalty.value(beta)
    }

    fn value_grad(&self, beta: &DVector<f64>) -> (f64, DVector<f64>) {
        let eta = self.x * beta;
        let mut nll = 0.0;
        let resid = DVector::from_fn(eta.len(), |i, _| {
            nll += softplus(eta[i]) - self.y[i] * eta[i];
            expit(eta[i]) - self.y[i]
        });
        let grad = self.x.tr_mul(&resid) + self.penalty.gradient(beta);
        (nll + self.penalty.value(beta), grad)
    }

    fn hessian(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        self.likelihood_hessian(beta) + self.penalty.hessian(beta)
    }

    fn convex_curvature(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        self.likelihood_hessian(beta) + self.penalty.convex_curvature(beta)
    }
}

/// Gaussian likelihood with known variance; used for linear candidates under a T prior.
pub(crate) struct GaussianObjective<'a> {
    pub x: &'a DMatrix<f64>,
    pub y: &'a DVector<f64>,
    pub sigma2: f64,
    pub penalty: &'a Penalty,
}

impl Objective for GaussianObjective<'_> {
    fn value(&self, beta: &DVector<f64>) -> f64 {
        let r = self.y - self.x * beta;
        0.5 * r.norm_squared() / self.sigma2 + self.penalty.value(beta)
    }

    fn value_grad(&self, beta: &DVector<f64>) -> (f64, DVector<f64>) {
        let r = self.y - self.x * beta;
        let v = 0.5 * r.norm_squared() / self.sigma2 + self.penalty.value(beta);
        let g = -self.x.tr_mul(&r) / self.sigma2 + self.penalty.gradient(beta);
        (v, g)
    }

    fn hessian(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        self.x.tr_mul(self.x) / self.sigma2 + self.penalty.hessian(beta)
    }

    fn convex_curvature(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        self.x.tr_mul(self.x) / self.sigma2 + self.penalty.convex_curvature(beta)
    }
}

/// Negative log posterior of a logistic candidate (constants dropped) and its gradient.
pub fn neg_log_posterior_logistic(
    beta: &DVector<f64>,
    dataset: &Dataset,
    prior: &Prior,
) -> Result<(f64, DVector<f64>)> {
    if beta.len() != dataset.p() {
        return Err(StackError::DimensionMismatch {
            what: "coefficient length",
            expected: dataset.p(),
            got: beta.len(),
        });
    }
    let penalty = prior.penalty(dataset.x())?;
    let obj = LogisticObjective {
        x: dataset.x(),
        y: dataset.y(),
        penalty: &penalty,
    };
    Ok(obj.value_grad(beta))
}

/// Fits a candidate on `(x, y)` with a penalty already resolved against the full design.
///
/// `warm` seeds the Newton iteration; without it, T-prior fits start from the
/// MAP under the normal prior with the same precision.
pub(crate) fn fit_with_penalty(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    spec: &CandidateSpec,
    penalty: &Penalty,
    warm: Option<&DVector<f64>>,
) -> Result<FitResult> {
    let opts = NewtonOptions::default();
    match (spec.family, penalty.kind) {
        (Family::Linear, PenaltyKind::Gaussian) => {
            solve_linear(x, y, spec.sigma2, penalty, &spec.label)
        }
        (Family::Linear, PenaltyKind::StudentT { .. }) => {
            let init = match warm {
                Some(b) => b.clone(),
                None => {
                    solve_linear(
                        x,
                        y,
                        spec.sigma2,
                        &penalty.gaussian_counterpart(),
                        &spec.label,
                    )?
                    .beta
                }
            };
            let obj = GaussianObjective {
                x,
                y,
                sigma2: spec.sigma2,
                penalty,
            };
            Ok(optim::minimize(&obj, init, opts))
        }
        (Family::Logistic, kind) => {
            let init = match (warm, kind) {
                (Some(b), _) => b.clone(),
                (None, PenaltyKind::Gaussian) => DVector::zeros(x.ncols()),
                (None, PenaltyKind::StudentT { .. }) => {
                    let normal = penalty.gaussian_counterpart();
                    let obj = LogisticObjective {
                        x,
                        y,
                        penalty: &normal,
                    };
                    optim::minimize(&obj, DVector::zeros(x.ncols()), opts).beta
                }
            };
            let obj = LogisticObjective { x, y, penalty };
            Ok(optim::minimize(&obj, init, opts))
        }
    }
}

/// MAP estimate of a logistic candidate by damped Newton.
pub fn map_logistic(dataset: &Dataset, spec: &CandidateSpec) -> Result<FitResult> {
    ensure_family(spec, Family::Logistic)?;
    fit(dataset, spec)
}

/// Full-data point estimate for any candidate.
pub fn fit(dataset: &Dataset, spec: &CandidateSpec) -> Result<FitResult> {
    let penalty = spec
        .prior
        .penalty(dataset.x())
        .map_err(|e| e.for_candidate(&spec.label))?;
    fit_with_penalty(dataset.x(), dataset.y(), spec, &penalty, None)
}

/// Point prediction of a fitted candidate: `X beta` or `expit(X beta)`.
pub fn predict_candidate(family: Family, beta: &DVector<f64>, x: &DMatrix<f64>) -> DVector<f64> {
    let eta = x * beta;
    match family {
        Family::Linear => eta,
        Family::Logistic => eta.map(expit_open),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
    }

    fn linear_data(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Dataset {
        let x = random_matrix(rng, n, p);
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        Dataset::new(x, y, None, Family::Linear).unwrap()
    }

    fn binary_data(rng: &mut ChaCha8Rng, n: usize, p: usize) -> Dataset {
        let x = random_matrix(rng, n, p);
        let truth = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eta = &x * truth;
        let y = eta.map(|e| {
            if rng.random::<f64>() < expit(e) {
                1.0
            } else {
                0.0
            }
        });
        Dataset::new(x, y, None, Family::Logistic).unwrap()
    }

    fn rel_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1e-300)
    }

    #[test]
    fn isotropic_prior_is_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let d = linear_data(&mut rng, 30, 4);
            let gamma2: f64 = rng.random_range(0.05..10.0);
            let sigma2: f64 = rng.random_range(0.1..4.0);
            let spec =
                CandidateSpec::linear(Prior::IsotropicNormal { gamma2 }, sigma2, "iso").unwrap();
            let beta = posterior_mean_linear(&d, &spec).unwrap().beta;
            let lam = sigma2 / gamma2;
            let a = d.x().tr_mul(d.x()) + DMatrix::identity(4, 4) * lam;
            let ridge = a.lu().solve(&d.x().tr_mul(d.y())).unwrap();
            assert!(rel_diff(&beta, &ridge) < 1e-10);
        }
    }

    #[test]
    fn vague_prior_is_ols() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = linear_data(&mut rng, 40, 3);
        let spec =
            CandidateSpec::linear(Prior::IsotropicNormal { gamma2: 1e12 }, 1.0, "flat").unwrap();
        let beta = posterior_mean_linear(&d, &spec).unwrap().beta;
        let ols = d.x().clone().svd(true, true).solve(d.y(), 1e-14).unwrap();
        assert!(rel_diff(&beta, &ols) < 1e-6);
    }

    #[test]
    fn zero_outcome_gives_zero_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 10, 2);
        let d = Dataset::new(x, DVector::zeros(10), None, Family::Linear).unwrap();
        let spec = CandidateSpec::linear(Prior::GPrior { g: 3.0 }, 1.0, "g").unwrap();
        assert_eq!(
            posterior_mean_linear(&d, &spec).unwrap().beta,
            DVector::zeros(2)
        );
    }

    #[test]
    fn g_prior_hat_is_scaled_leverage() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = linear_data(&mut rng, 25, 5);
        let x = d.x();
        // Dense OLS hat matrix as an independent route.
        let h_ols = x * x.tr_mul(x).try_inverse().unwrap() * x.transpose();
        for &(g, sigma2) in &[(0.01, 1.0), (1.0, 2.0), (500.0, 0.5)] {
            let spec = CandidateSpec::linear(Prior::GPrior { g }, sigma2, "g").unwrap();
            let h = hat_diag(&d, &spec).unwrap();
            let shrink = g / (g + sigma2);
            for i in 0..25 {
                let want = shrink * h_ols[(i, i)];
                assert!((h[i] - want).abs() <= 1e-10 * want.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn intercept_only_leverage() {
        let x = DMatrix::from_element(4, 1, 1.0);
        let d = Dataset::new(
            x,
            DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]),
            None,
            Family::Linear,
        )
        .unwrap();
        let spec =
            CandidateSpec::linear(Prior::IsotropicNormal { gamma2: 1e12 }, 1.0, "c").unwrap();
        let h = hat_diag(&d, &spec).unwrap();
        for v in h.iter() {
            assert!((v - 0.25).abs() < 1e-10);
        }
    }

    #[test]
    fn hat_diag_bounds_and_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let d = linear_data(&mut rng, 20, 6);
            let a = random_matrix(&mut rng, 6, 6);
            let cov = &a * a.transpose() + DMatrix::identity(6, 6) * 0.1;
            let spec =
                CandidateSpec::linear(Prior::GeneralNormal { cov: cov.clone() }, 0.7, "s").unwrap();
            let h = hat_diag(&d, &spec).unwrap();
            assert!(h.iter().all(|&v| (0.0..1.0).contains(&v)));
            // trace(P) = trace((X^T X + sigma^2 S^{-1})^{-1} X^T X), computed densely.
            let xtx = d.x().tr_mul(d.x());
            let m = &xtx + cov.try_inverse().unwrap() * 0.7;
            let tr = (m.try_inverse().unwrap() * xtx).trace();
            assert!((h.sum() - tr).abs() <= 1e-8 * tr);
        }
    }

    #[test]
    fn g_prior_needs_full_rank() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        let d = Dataset::new(
            x,
            DVector::from_vec(vec![1.0, 0.0, 1.5]),
            None,
            Family::Linear,
        )
        .unwrap();
        let spec = CandidateSpec::linear(Prior::GPrior { g: 1.0 }, 1.0, "rank").unwrap();
        let err = posterior_mean_linear(&d, &spec).unwrap_err();
        assert!(err.to_string().contains("rank"), "{err}");
    }

    #[test]
    fn invalid_priors_rejected() {
        assert!(CandidateSpec::linear(Prior::IsotropicNormal { gamma2: 0.0 }, 1.0, "a").is_err());
        assert!(CandidateSpec::linear(Prior::GPrior { g: 1.0 }, -1.0, "a").is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(Prior::GeneralNormal { cov: asym }.validate().is_err());
        let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(Prior::GeneralNormal { cov: indef }.validate().is_err());
        assert!(CandidateSpec::logistic(Prior::GPrior { g: 1.0 }, "g").is_err());
        assert!(Prior::MultiT {
            nu: 0.0,
            scale: TScale::Identity { lambda: 1.0 }
        }
        .validate()
        .is_err());
    }

    #[test]
    fn expit_is_stable() {
        assert_eq!(expit(0.0), 0.5);
        for &t in &[0.3, 5.0, 30.0, 300.0] {
            assert!((expit(t) + expit(-t) - 1.0).abs() < 1e-15);
        }
        // 1 - 1e-300 rounds to 1, so the only representable value in range is 1 itself.
        let hi = expit(710.0);
        assert!(hi.is_finite() && hi >= 1.0 - 1e-300 && hi <= 1.0);
        assert!(expit(-700.0) > 0.0);
        let mut prev = 0.0;
        for i in -700..=700 {
            let v = expit(i as f64);
            assert!(v >= prev);
            prev = v;
        }
        assert!(expit_open(50.0) < 1.0);
    }

    #[test]
    fn logistic_gradient_at_zero() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, -1.0, 2.0]);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        let d = Dataset::new(x.clone(), y.clone(), None, Family::Logistic).unwrap();
        let prior = Prior::IsoNormalLogistic { lambda: 1.0 };
        let (v, g) = neg_log_posterior_logistic(&DVector::zeros(2), &d, &prior).unwrap();
        let want = x.tr_mul(&(DVector::from_element(4, 0.5) - y));
        assert!((g - want).amax() < 1e-15);
        assert!((v - 4.0 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn iso_penalty_value() {
        let x = DMatrix::from_element(1, 2, 0.0);
        let d = Dataset::new(x, DVector::from_element(1, 1.0), None, Family::Logistic).unwrap();
        let beta = DVector::from_vec(vec![1.0, 1.0]);
        let (v, _) =
            neg_log_posterior_logistic(&beta, &d, &Prior::IsoNormalLogistic { lambda: 1.0 })
                .unwrap();
        // likelihood part at eta = 0 is ln 2
        assert!((v - 2f64.ln() - 1.0).abs() < 1e-14);
    }

    fn fd_gradient(d: &Dataset, prior: &Prior, beta: &DVector<f64>, h: f64) -> DVector<f64> {
        DVector::from_fn(beta.len(), |j, _| {
            let mut up = beta.clone();
            let mut dn = beta.clone();
            up[j] += h;
            dn[j] -= h;
            let fu = neg_log_posterior_logistic(&up, d, prior).unwrap().0;
            let fd = neg_log_posterior_logistic(&dn, d, prior).unwrap().0;
            (fu - fd) / (2.0 * h)
        })
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..100 {
            let d = binary_data(&mut rng, 30, 5);
            let a = random_matrix(&mut rng, 5, 5);
            let scale = &a * a.transpose() + DMatrix::identity(5, 5) * 0.5;
            let priors = [
                Prior::IsoNormalLogistic {
                    lambda: rng.random_range(0.1..5.0),
                },
                Prior::MultiT {
                    nu: rng.random_range(0.5..30.0),
                    scale: TScale::Matrix { scale },
                },
            ];
            let beta = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
            for prior in &priors {
                let (_, g) = neg_log_posterior_logistic(&beta, &d, prior).unwrap();
                let fd = fd_gradient(&d, prior, &beta, 1e-5);
                let err = (&g - &fd).amax() / g.amax().max(1.0);
                assert!(err <= 1e-5, "trial {trial}: rel err {err}");
            }
        }
    }

    #[test]
    fn separable_data_stays_finite() {
        let x = DMatrix::from_row_slice(
            6,
            2,
            &[
                1.0, -2.0, 1.0, -1.0, 1.0, -0.5, 1.0, 0.5, 1.0, 1.0, 1.0, 2.0,
            ],
        );
        let y = DVector::from_vec(vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let d = Dataset::new(x, y, None, Family::Logistic).unwrap();
        let spec = CandidateSpec::logistic(Prior::IsoNormalLogistic { lambda: 1.0 }, "l").unwrap();
        let r = map_logistic(&d, &spec).unwrap();
        assert!(r.converged);
        assert!(r.grad_norm <= 1e-8);
        assert!(r.beta.iter().all(|b| b.is_finite()));
    }

    #[test]
    fn heavy_penalty_shrinks_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = binary_data(&mut rng, 40, 3);
        let spec =
            CandidateSpec::logistic(Prior::IsoNormalLogistic { lambda: 1e-8 }, "tiny").unwrap();
        let r = map_logistic(&d, &spec).unwrap();
        assert!(r.converged);
        assert!(r.beta.amax() < 1e-6);
        let p = predict_candidate(Family::Logistic, &r.beta, d.x());
        assert!(p.iter().all(|v| (v - 0.5).abs() < 1e-5));
    }

    #[test]
    fn map_beats_random_probes_and_mle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = binary_data(&mut rng, 40, 3);
        let prior = Prior::IsoNormalLogistic { lambda: 2.0 };
        let spec = CandidateSpec::logistic(prior.clone(), "l").unwrap();
        let r = map_logistic(&d, &spec).unwrap();
        let f_map = neg_log_posterior_logistic(&r.beta, &d, &prior).unwrap().0;
        for _ in 0..100 {
            let probe = &r.beta + DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            assert!(f_map <= neg_log_posterior_logistic(&probe, &d, &prior).unwrap().0);
        }
        // nearly flat prior approximates the MLE
        let mle = map_logistic(
            &d,
            &CandidateSpec::logistic(Prior::IsoNormalLogistic { lambda: 1e8 }, "m").unwrap(),
        )
        .unwrap();
        assert!(f_map <= neg_log_posterior_logistic(&mle.beta, &d, &prior).unwrap().0);
    }

    #[test]
    fn multi_t_map_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for nu in [1.0, 3.0, 30.0] {
            let d = binary_data(&mut rng, 50, 4);
            let spec = CandidateSpec::logistic(
                Prior::MultiT {
                    nu,
                    scale: TScale::Identity { lambda: 0.2 },
                },
                "t",
            )
            .unwrap();
            let r = map_logistic(&d, &spec).unwrap();
            assert!(r.converged, "nu {nu}: grad {}", r.grad_norm);
            assert!(r.grad_norm <= 1e-8);
        }
    }

    #[test]
    fn linear_t_prior_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = linear_data(&mut rng, 30, 4);
        let spec = CandidateSpec::linear(
            Prior::MultiT {
                nu: 3.0,
                scale: TScale::Zellner { lambda: 2.5 },
            },
            1.0,
            "t",
        )
        .unwrap();
        let r = fit(&d, &spec).unwrap();
        assert!(r.converged);
        assert!(matches!(
            hat_diag(&d, &spec),
            Err(StackError::NotALinearSmoother(_))
        ));
    }

    #[test]
    fn family_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = linear_data(&mut rng, 10, 2);
        let spec = CandidateSpec::logistic(Prior::IsoNormalLogistic { lambda: 1.0 }, "l").unwrap();
        assert!(matches!(
            posterior_mean_linear(&d, &spec),
            Err(StackError::FamilyMismatch(_))
        ));
    }
}
