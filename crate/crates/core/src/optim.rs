//! Smooth unconstrained minimisation used by every training routine.
//!
//! L-BFGS with Armijo backtracking is the default. Every loop is bounded: at
//! most `max_iters` outer steps and 60 halvings per line search, and a run
//! stops early once the objective has stopped decreasing in relative terms.
//! A fixed-step gradient descent with a patience window reproduces plain-GD
//! behaviour.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// A differentiable objective evaluated together with its gradient.
pub trait Objective {
    fn dim(&self) -> usize;
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Descent {
    Lbfgs { memory: usize },
    FixedStep { step: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptSettings {
    pub descent: Descent,
    pub max_iters: u64,
    pub grad_tol: f64,
    /// Consecutive loss increases tolerated by fixed-step descent before it reports divergence.
    pub patience: usize,
}

impl Default for OptSettings {
    fn default() -> Self {
        OptSettings { descent: Descent::Lbfgs { memory: 10 }, max_iters: 500, grad_tol: 1e-9, patience: 20 }
    }
}

#[derive(Debug, Clone)]
pub struct OptOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: u64,
}

pub fn minimize<O: Objective>(obj: &O, x0: Vec<f64>, settings: &OptSettings) -> Result<OptOutcome> {
    if x0.len() != obj.dim() {
        return Err(Error::DimensionMismatch(format!("x0 has {} entries, objective {}", x0.len(), obj.dim())));
    }
    match settings.descent {
        Descent::FixedStep { step } => fixed_step(obj, x0, step, settings),
        Descent::Lbfgs { memory } => lbfgs(obj, x0, memory.max(1), settings),
    }
}

fn fixed_step<O: Objective>(obj: &O, mut x: Vec<f64>, step: f64, s: &OptSettings) -> Result<OptOutcome> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter("step size must be positive".into()));
    }
    let mut g = vec![0.0; x.len()];
    let mut prev = f64::INFINITY;
    let mut rising = 0usize;
    let mut value = f64::NAN;
    let mut it = 0;
    while it < s.max_iters {
        value = obj.value_grad(&x, &mut g);
        if !value.is_finite() {
            return Err(Error::Divergence { iterations: it as usize });
        }
        if value > prev {
            rising += 1;
            if rising >= s.patience.max(1) {
                return Err(Error::Divergence { iterations: it as usize });
            }
        } else {
            rising = 0;
        }
        prev = value;
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn <= s.grad_tol {
            break;
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= step * gi;
        }
        it += 1;
    }
    if it == s.max_iters {
        value = obj.value_grad(&x, &mut g);
    }
    Ok(OptOutcome { x, value, iterations: it })
}

fn lbfgs<O: Objective>(obj: &O, mut x: Vec<f64>, memory: usize, s: &OptSettings) -> Result<OptOutcome> {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut f = obj.value_grad(&x, &mut g);
    if !f.is_finite() {
        return Err(Error::Divergence { iterations: 0 });
    }
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(memory);
    let mut xn = vec![0.0; n];
    let mut gn = vec![0.0; n];
    let mut stalled = 0usize;
    let mut it = 0;
    while it < s.max_iters {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= s.grad_tol {
            break;
        }
        let mut d = two_loop(&g, &hist);
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            hist.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(&g, &d);
        }
        let mut alpha = if hist.is_empty() { (1.0 / norm(&g)).min(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            for i in 0..n {
                xn[i] = x[i] + alpha * d[i];
            }
            let fnew = obj.value_grad(&xn, &mut gn);
            if fnew.is_finite() && fnew <= f + 1e-4 * alpha * slope {
                accepted = Some(fnew);
                break;
            }
            alpha *= 0.5;
        }
        let Some(fnew) = accepted else {
            if hist.is_empty() {
                break;
            }
            hist.clear();
            continue;
        };
        let sv: Vec<f64> = (0..n).map(|i| xn[i] - x[i]).collect();
        let yv: Vec<f64> = (0..n).map(|i| gn[i] - g[i]).collect();
        let sy = dot(&sv, &yv);
        if sy > 1e-12 * norm(&sv) * norm(&yv) {
            if hist.len() == memory {
                hist.pop_front();
            }
            hist.push_back((sv, yv, 1.0 / sy));
        }
        stalled = if f - fnew <= 1e-12 * fnew.abs() { stalled + 1 } else { 0 };
        std::mem::swap(&mut x, &mut xn);
        std::mem::swap(&mut g, &mut gn);
        f = fnew;
        it += 1;
        if stalled >= 20 {
            break;
        }
    }
    Ok(OptOutcome { x, value: f, iterations: it })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `-H g` for the limited-memory inverse Hessian approximation.
fn two_loop(g: &[f64], hist: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = rho * dot(s, &q);
        for i in 0..q.len() {
            q[i] -= a * y[i];
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = hist.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for i in 0..q.len() {
            q[i] += (a - b) * s[i];
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quad;
    impl Objective for Quad {
        fn dim(&self) -> usize {
            2
        }
        fn value_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
            g[0] = 2.0 * (x[0] - 1.0);
            g[1] = 20.0 * (x[1] + 2.0);
            (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2)
        }
    }

    #[test]
    fn lbfgs_finds_quadratic_minimum() {
        let out = minimize(&Quad, vec![0.0, 0.0], &OptSettings::default()).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-8 && (out.x[1] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn fixed_step_converges_and_detects_divergence() {
        let ok = OptSettings { descent: Descent::FixedStep { step: 0.04 }, max_iters: 2000, ..Default::default() };
        let out = minimize(&Quad, vec![0.0, 0.0], &ok).unwrap();
        assert!((out.x[1] + 2.0).abs() < 1e-8);
        let bad = OptSettings { descent: Descent::FixedStep { step: 0.2 }, max_iters: 2000, patience: 5, ..Default::default() };
        assert!(matches!(minimize(&Quad, vec![0.0, 0.0], &bad), Err(Error::Divergence { .. })));
    }
}
