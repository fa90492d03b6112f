//! Damped Newton minimization with Armijo backtracking.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::candidates::FitResult;

pub(crate) trait Objective {
    fn value(&self, beta: &DVector<f64>) -> f64;
    fn value_grad(&self, beta: &DVector<f64>) -> (f64, DVector<f64>);
    fn hessian(&self, beta: &DVector<f64>) -> DMatrix<f64>;
    /// Positive-definite stand-in for the Hessian where the exact one is indefinite.
    fn convex_curvature(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        self.hessian(beta)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NewtonOptions {
    pub grad_tol: f64,
    pub max_iter: usize,
    pub armijo_c: f64,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            grad_tol: 1e-8,
            max_iter: 100,
            armijo_c: 1e-4,
            max_halvings: 60,
        }
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub(crate) fn minimize<O: Objective>(
    obj: &O,
    init: DVector<f64>,
    opts: NewtonOptions,
) -> FitResult {
    let mut beta = init;
    let (mut f, mut g) = obj.value_grad(&beta);
    let mut iterations = 0;
    let mut fallback_steps = 0;

    while iterations < opts.max_iter && inf_norm(&g) > opts.grad_tol {
        let dir = match Cholesky::new(obj.hessian(&beta)) {
            Some(ch) => -ch.solve(&g),
            None => {
                fallback_steps += 1;
                match Cholesky::new(obj.convex_curvature(&beta)) {
                    Some(ch) => -ch.solve(&g),
                    None => -g.clone(),
                }
            }
        };
        let mut dir = dir;
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) || !slope.is_finite() {
            dir = -g.clone();
            slope = -g.norm_squared();
        }

        let g_norm = inf_norm(&g);
        let noise = 16.0 * f64::EPSILON * (1.0 + f.abs());
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = &beta + &dir * step;
            let f_new = obj.value(&cand);
            if f_new.is_finite() {
                if f_new <= f + opts.armijo_c * step * slope {
                    accepted = Some(cand);
                    break;
                }
                // At the rounding floor the decrease is invisible in f; fall back
                // on the gradient to tell progress from stagnation.
                if (f_new - f).abs() <= noise {
                    let (_, g_new) = obj.value_grad(&cand);
                    if inf_norm(&g_new) < g_norm {
                        accepted = Some(cand);
                        break;
                    }
                }
            }
            step *= 0.5;
        }
        let Some(next) = accepted else { break };
        beta = next;
        (f, g) = obj.value_grad(&beta);
        iterations += 1;
    }

    let grad_norm = inf_norm(&g);
    FitResult {
        converged: grad_norm <= opts.grad_tol,
        beta,
        iterations,
        grad_norm,
        fallback_steps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        a: DMatrix<f64>,
        b: DVector<f64>,
    }

    impl Objective for Quadratic {
        fn value(&self, x: &DVector<f64>) -> f64 {
            0.5 * x.dot(&(&self.a * x)) - self.b.dot(x)
        }
        fn value_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
            (self.value(x), &self.a * x - &self.b)
        }
        fn hessian(&self, _: &DVector<f64>) -> DMatrix<f64> {
            self.a.clone()
        }
    }

    #[test]
    fn quadratic_in_one_step() {
        let q = Quadratic {
            a: DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]),
            b: DVector::from_vec(vec![1.0, -1.0]),
        };
        let r = minimize(&q, DVector::zeros(2), NewtonOptions::default());
        assert!(r.converged);
        assert!(r.iterations <= 2);
        assert_eq!(r.fallback_steps, 0);
    }

    #[test]
    fn indefinite_hessian_uses_fallback() {
        // f(x) = x^4/4 - x^2/2 has an indefinite Hessian at 0.1 and minima at +-1.
        struct W;
        impl Objective for W {
            fn value(&self, x: &DVector<f64>) -> f64 {
                x[0].powi(4) / 4.0 - x[0].powi(2) / 2.0
            }
            fn value_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
                (self.value(x), DVector::from_element(1, x[0].powi(3) - x[0]))
            }
            fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_element(1, 1, 3.0 * x[0] * x[0] - 1.0)
            }
            fn convex_curvature(&self, x: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_element(1, 1, 3.0 * x[0] * x[0] + 1.0)
            }
        }
        let r = minimize(&W, DVector::from_element(1, 0.1), NewtonOptions::default());
        assert!(r.converged);
        assert!(r.fallback_steps > 0);
        assert!((r.beta[0] - 1.0).abs() < 1e-8);
    }
}
