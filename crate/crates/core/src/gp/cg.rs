//! Polak–Ribière nonlinear conjugate gradients with a backtracking
//! (Armijo) line search.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgOptions {
    pub max_iter: usize,
    /// Stop once the gradient's largest component falls below this.
    pub grad_tol: f64,
    /// Largest coordinate change tried by the first step of a line search.
    pub max_step: f64,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions { max_iter: 100, grad_tol: 1e-5, max_step: 2.0 }
    }
}

#[derive(Debug, Clone)]
pub struct CgResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Objective after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimize `f`, which returns the value and gradient. Evaluation errors
/// during a line search count as infinitely bad points.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: &CgOptions) -> Result<CgResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let (mut fx, mut g) = f(x0)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("objective is not finite at the starting point"));
    }
    let mut x = x0.to_vec();
    let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
    let mut history = vec![fx];
    let mut iterations = 0;
    let mut steepest = true;
    while iterations < opts.max_iter && inf_norm(&g) >= opts.grad_tol {
        iterations += 1;
        let mut slope = dot(&d, &g);
        if slope >= 0.0 {
            d = g.iter().map(|v| -v).collect();
            slope = dot(&d, &g);
            steepest = true;
        }
        let mut t = (opts.max_step / inf_norm(&d)).min(1.0);
        let mut accepted = None;
        while t > 1e-12 {
            let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            if let Ok((ft, gt)) = f(&xt) {
                if ft.is_finite() && gt.iter().all(|v| v.is_finite()) && ft <= fx + 1e-4 * t * slope {
                    accepted = Some((xt, ft, gt));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            if steepest {
                break;
            }
            d = g.iter().map(|v| -v).collect();
            steepest = true;
            continue;
        };
        let beta = (dot(&gn, &gn) - dot(&gn, &g)) / dot(&g, &g);
        let beta = if beta.is_finite() { beta.max(0.0) } else { 0.0 };
        d = gn.iter().zip(&d).map(|(gi, di)| -gi + beta * di).collect();
        steepest = beta == 0.0;
        x = xn;
        fx = fnew;
        g = gn;
        history.push(fx);
    }
    Ok(CgResult { x, value: fx, iterations, history })
}
