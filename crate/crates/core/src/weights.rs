//! Simplex-constrained quadratic program for stacking weights.
//!
//! Minimizes `w^T S w` over `{w >= 0, sum(w) = 1}` where `S = e~^T e~` is the
//! least-squares CV criterion. The solver is accelerated projected gradient on
//! `f(w) = w^T S w / 2` (same argmin) with step `1 / lambda_max(S)`, adaptive
//! restarts, and an exact solve on the current support once it settles.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, StackError};
use crate::loo::ResidualMatrix;

pub const MAX_ITERATIONS: usize = 10_000;
/// Weights below this are clipped to zero before renormalizing.
pub const CLIP: f64 = 1e-12;

/// Symmetric PSD `K x K` criterion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    s: DMatrix<f64>,
}

impl GramMatrix {
    /// `S = e~^T e~`, symmetrized.
    pub fn from_residuals(residuals: &ResidualMatrix) -> Result<Self> {
        let e = &residuals.values;
        if e.iter().any(|v| !v.is_finite()) {
            return Err(StackError::NonFinite("residual matrix"));
        }
        let s = e.tr_mul(e);
        Ok(GramMatrix {
            s: (&s + s.transpose()) * 0.5,
        })
    }

    /// Wraps an explicit matrix, symmetrizing it. Rejects non-square,
    /// non-finite, or visibly asymmetric input.
    pub fn new(s: DMatrix<f64>) -> Result<Self> {
        if !s.is_square() || s.nrows() == 0 {
            return Err(StackError::InvalidInput(
                "Gram matrix must be non-empty and square".into(),
            ));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(StackError::NonFinite("Gram matrix"));
        }
        let asym = (&s - s.transpose()).amax();
        if asym > 1e-12 * s.amax().max(1.0) {
            return Err(StackError::Asymmetric(asym));
        }
        Ok(GramMatrix {
            s: (&s + s.transpose()) * 0.5,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn dim(&self) -> usize {
        self.s.nrows()
    }

    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        w.dot(&(&self.s * w))
    }

    pub fn trace(&self) -> f64 {
        self.s.trace()
    }

    /// Convergence tolerance on the KKT residual.
    pub fn tolerance(&self) -> f64 {
        1e-9 * (1.0 + self.trace() / self.dim() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub w: DVector<f64>,
    /// `w^T S w` at the returned weights.
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Euclidean projection onto the unit simplex (sort-and-threshold).
pub fn project_simplex(v: &DVector<f64>) -> DVector<f64> {
    let k = v.len();
    let mut u: Vec<f64> = v.iter().copied().collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            tau = t;
        }
    }
    DVector::from_fn(k, |i, _| (v[i] - tau).max(0.0))
}

/// Largest eigenvalue of a PSD matrix by power iteration.
pub fn lambda_max(s: &DMatrix<f64>) -> f64 {
    let k = s.nrows();
    if k == 1 {
        return s[(0, 0)].max(0.0);
    }
    // slightly non-uniform start so no eigenvector is missed by symmetry
    let mut v = DVector::from_fn(k, |i, _| 1.0 + 0.1 * i as f64 / k as f64);
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..1000 {
        let sv = s * &v;
        let norm = sv.norm();
        if norm == 0.0 || !norm.is_finite() {
            return 0.0;
        }
        let next = v.dot(&sv);
        v = sv / norm;
        if (next - est).abs() <= 1e-12 * next.abs() {
            est = next;
            break;
        }
        est = next;
    }
    // Rayleigh quotients approach lambda_max from below; never exceed the trace bound.
    let rayleigh = v.dot(&(s * &v));
    rayleigh.max(est).min(s.trace().max(0.0))
}

fn kkt_with_step(s: &DMatrix<f64>, w: &DVector<f64>, lmax: f64) -> f64 {
    if lmax <= 0.0 {
        return (w - project_simplex(w)).norm();
    }
    let grad = s * w;
    (w - project_simplex(&(w - grad / lmax))).norm()
}

/// Fixed-point residual `|w - proj(w - S w / lambda_max(S))|`; zero exactly at optima.
pub fn kkt_check(s: &GramMatrix, w: &DVector<f64>) -> f64 {
    kkt_with_step(&s.s, w, lambda_max(&s.s))
}

fn clip_and_normalize(w: &DVector<f64>) -> DVector<f64> {
    let clipped = w.map(|v| if v < CLIP { 0.0 } else { v });
    let total = clipped.sum();
    if total > 0.0 {
        clipped / total
    } else {
        DVector::from_element(w.len(), 1.0 / w.len() as f64)
    }
}

/// Minimizer of `w^T S w` restricted to the face spanned by `support`, if it is
/// interior to that face.
fn solve_on_support(s: &DMatrix<f64>, support: &[usize]) -> Option<DVector<f64>> {
    let m = support.len();
    // [S_AA 1; 1^T 0] [w; mu] = [0; 1]
    let mut kkt = DMatrix::zeros(m + 1, m + 1);
    for (a, &i) in support.iter().enumerate() {
        for (b, &j) in support.iter().enumerate() {
            kkt[(a, b)] = s[(i, j)];
        }
        kkt[(a, m)] = 1.0;
        kkt[(m, a)] = 1.0;
    }
    let mut rhs = DVector::zeros(m + 1);
    rhs[m] = 1.0;
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut w = DVector::zeros(s.nrows());
    for (a, &i) in support.iter().enumerate() {
        if sol[a] < 0.0 {
            return None;
        }
        w[i] = sol[a];
    }
    let total = w.sum();
    (total > 0.0).then(|| w / total)
}

/// Stacking weights: `argmin_{w in simplex} w^T S w`.
pub fn solve(s: &GramMatrix) -> WeightVector {
    let k = s.dim();
    let m = &s.s;
    let tol = s.tolerance();
    let uniform = DVector::from_element(k, 1.0 / k as f64);
    let lmax = lambda_max(m);
    if k == 1 || lmax <= 0.0 {
        return WeightVector {
            objective: s.objective(&uniform),
            kkt_residual: kkt_with_step(m, &uniform, lmax),
            w: uniform,
            iterations: 0,
            converged: true,
        };
    }
    let half_obj = |w: &DVector<f64>| 0.5 * s.objective(w);

    let mut w = uniform.clone();
    let mut f = half_obj(&w);
    let mut y = w.clone();
    let mut t = 1.0_f64;
    let mut best = (w.clone(), f);
    let mut kkt = kkt_with_step(m, &w, lmax);
    let mut iterations = 0;
    let mut last_support: Vec<usize> = Vec::new();
    let mut polished: Option<Vec<usize>> = None;
    let mut step_l = lmax;

    while iterations < MAX_ITERATIONS && kkt > tol {
        iterations += 1;
        let grad = m * &y;
        let w_next = project_simplex(&(&y - grad / step_l));
        let f_next = half_obj(&w_next);
        if f_next > f {
            // Non-monotone: drop momentum and restart from the last iterate. A plain
            // step that still ascends means the power-iteration estimate was low.
            if t == 1.0 {
                step_l *= 2.0;
            }
            y = w.clone();
            t = 1.0;
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &w_next + (&w_next - &w) * ((t - 1.0) / t_next);
        w = w_next;
        f = f_next;
        t = t_next;
        if f < best.1 {
            best = (w.clone(), f);
        }
        kkt = kkt_with_step(m, &w, lmax);

        // Once the active set stops changing, jump to the exact face minimizer.
        let support: Vec<usize> = (0..k).filter(|&i| w[i] > CLIP).collect();
        if support == last_support && kkt > tol && polished.as_ref() != Some(&support) {
            polished = Some(support.clone());
            if let Some(ws) = solve_on_support(m, &support) {
                let fs = half_obj(&ws);
                if fs <= f {
                    w = ws;
                    f = fs;
                    y = w.clone();
                    t = 1.0;
                    if f < best.1 {
                        best = (w.clone(), f);
                    }
                    kkt = kkt_with_step(m, &w, lmax);
                }
            }
        }
        last_support = support;
    }

    let converged = kkt <= tol;
    let mut w_final = if converged { w } else { best.0 };
    // A non-converged run must still be no worse than the best single candidate.
    if !converged {
        let (vk, vf) = (0..k)
            .map(|i| (i, 0.5 * m[(i, i)]))
            .fold(
                (0, f64::INFINITY),
                |acc, c| if c.1 < acc.1 { c } else { acc },
            );
        if vf < half_obj(&w_final) {
            w_final = DVector::from_fn(k, |i, _| if i == vk { 1.0 } else { 0.0 });
        }
    }
    let w_final = clip_and_normalize(&w_final);
    WeightVector {
        objective: s.objective(&w_final),
        kkt_residual: kkt_with_step(m, &w_final, lmax),
        w: w_final,
        iterations,
        converged,
    }
}
