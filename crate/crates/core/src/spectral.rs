//! Eigenvalue checks for candidate hat matrices and their convex combinations.
//!
//! Every `P_k = X (X^T X + sigma^2 S_k^{-1})^{-1} X^T` with SPD `S_k` has its
//! spectrum in `[0, 1]`, and so does any simplex combination `P(w)`. The
//! functions here build the matrices explicitly and check both bounds.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::candidates::{self, CandidateSpec, Prior};
use crate::dgp::{derive_seed, Family};
use crate::error::{Result, StackError};

/// Largest `n` for which hat matrices are materialized.
pub const MAX_N: usize = 2000;

const SYMMETRY_TOL: f64 = 1e-10;

/// `(min, max)` eigenvalue of a symmetric matrix.
pub fn extreme_eigs(m: &DMatrix<f64>) -> Result<(f64, f64)> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(StackError::InvalidInput(
            "expected a non-empty square matrix".into(),
        ));
    }
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * m.amax().max(1.0) {
        return Err(StackError::Asymmetric(asym));
    }
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    Ok((eig.min(), eig.max()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralReport {
    pub per_candidate_max_eig: Vec<f64>,
    pub combined_max_eig: f64,
    pub combined_min_eig: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn hat_from_design(x: &DMatrix<f64>, spec: &CandidateSpec) -> Result<DMatrix<f64>> {
    if !spec.is_linear_smoother() {
        return Err(StackError::FamilyMismatch(format!(
            "candidate '{}' is not a linear candidate with a normal prior",
            spec.label()
        )));
    }
    let penalty = spec
        .prior()
        .penalty(x)
        .map_err(|e| e.for_candidate(spec.label()))?;
    let z = candidates::whitened_design(x, spec.sigma2(), &penalty, spec.label())?;
    let p = z.tr_mul(&z);
    Ok((&p + p.transpose()) * 0.5)
}

/// Builds every `P_k` and `P(w)` for design `x` and checks their spectra.
/// Each candidate's own `sigma2` is used.
pub fn verify_lemma1(
    x: &DMatrix<f64>,
    specs: &[CandidateSpec],
    w: &DVector<f64>,
    tol: f64,
) -> Result<SpectralReport> {
    let n = x.nrows();
    if n > MAX_N {
        return Err(StackError::TooLarge { n, cap: MAX_N });
    }
    if specs.is_empty() {
        return Err(StackError::InvalidInput(
            "need at least one candidate".into(),
        ));
    }
    if w.len() != specs.len() {
        return Err(StackError::DimensionMismatch {
            what: "weight vector",
            expected: specs.len(),
            got: w.len(),
        });
    }
    if specs.iter().any(|s| s.family() != Family::Linear) {
        return Err(StackError::FamilyMismatch(
            "spectral checks apply to linear candidates only".into(),
        ));
    }

    let mut combined = DMatrix::zeros(n, n);
    let mut per_candidate_max_eig = Vec::with_capacity(specs.len());
    for (spec, &wk) in specs.iter().zip(w.iter()) {
        let p = hat_from_design(x, spec)?;
        per_candidate_max_eig.push(extreme_eigs(&p)?.1);
        if wk != 0.0 {
            combined += p * wk;
        }
    }
    let (combined_min_eig, combined_max_eig) = extreme_eigs(&combined)?;
    let pass = per_candidate_max_eig.iter().all(|&m| m <= 1.0 + tol)
        && combined_max_eig <= 1.0 + tol
        && combined_min_eig >= -tol;
    Ok(SpectralReport {
        per_candidate_max_eig,
        combined_max_eig,
        combined_min_eig,
        tolerance: tol,
        pass,
    })
}

/// Largest eigenvalue of the g-prior hat matrix and its closed form `g / (g + sigma2)`.
pub fn g_prior_max_eig(x: &DMatrix<f64>, g: f64, sigma2: f64) -> Result<(f64, f64)> {
    let spec = CandidateSpec::linear(Prior::GPrior { g }, sigma2, "g")?;
    let (_, max) = extreme_eigs(&hat_from_design(x, &spec)?)?;
    Ok((max, g / (g + sigma2)))
}

/// One random instance for the Monte Carlo check.
#[derive(Debug, Clone)]
pub struct Lemma1Instance {
    pub x: DMatrix<f64>,
    pub specs: Vec<CandidateSpec>,
    pub w: DVector<f64>,
}

fn random_spd(p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let scale = 10f64.powf(rng.random_range(-2.0..2.0));
    (a.tr_mul(&a) + DMatrix::identity(p, p) * 0.1) * scale
}

/// Random design (`n <= 50`, `p <= 10`), 1 to 5 candidates with random SPD priors
/// or g-priors, and a random simplex weight vector.
pub fn random_instance(seed: u64) -> Lemma1Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(2..=50usize);
    let p = rng.random_range(1..=10usize.min(n));
    let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let k = rng.random_range(1..=5usize);
    let specs = (0..k)
        .map(|i| {
            let sigma2 = 10f64.powf(rng.random_range(-1.0..1.0));
            let prior = match rng.random_range(0..3) {
                0 => Prior::IsotropicNormal {
                    gamma2: 10f64.powf(rng.random_range(-2.0..3.0)),
                },
                1 => Prior::GPrior {
                    g: 10f64.powf(rng.random_range(-2.0..3.0)),
                },
                _ => Prior::GeneralNormal {
                    cov: random_spd(p, &mut rng),
                },
            };
            CandidateSpec::linear(prior, sigma2, format!("c{i}")).expect("valid random prior")
        })
        .collect();
    let e = DVector::from_fn(k, |_, _| -rng.random::<f64>().max(f64::MIN_POSITIVE).ln());
    let w = &e / e.sum();
    Lemma1Instance { x, specs, w }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialSummary {
    pub trials: usize,
    pub failures: usize,
    pub worst_candidate_max: f64,
    pub worst_combined_max: f64,
    pub worst_combined_min: f64,
}

/// Runs `trials` random instances (seeds derived from `seed`) in parallel.
pub fn run_trials(trials: usize, seed: u64, tol: f64) -> Result<TrialSummary> {
    let reports = (0..trials)
        .into_par_iter()
        .map(|i| {
            let inst = random_instance(derive_seed(seed, &[i as u64]));
            verify_lemma1(&inst.x, &inst.specs, &inst.w, tol)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut s = TrialSummary {
        trials,
        failures: 0,
        worst_candidate_max: f64::NEG_INFINITY,
        worst_combined_max: f64::NEG_INFINITY,
        worst_combined_min: f64::INFINITY,
    };
    for r in &reports {
        s.failures += usize::from(!r.pass);
        for &m in &r.per_candidate_max_eig {
            s.worst_candidate_max = s.worst_candidate_max.max(m);
        }
        s.worst_combined_max = s.worst_combined_max.max(r.combined_max_eig);
        s.worst_combined_min = s.worst_combined_min.min(r.combined_min_eig);
    }
    Ok(s)
}
