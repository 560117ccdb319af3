//! Minimization of the discrete action `S(φ) + h(φ)` over knot states.

use std::collections::VecDeque;
use std::io::{self, Write};

use rayon::prelude::*;

use crate::control::Schedule;
use crate::csv;
use crate::functional::PathFunctional;
use crate::path::{DiscretePath, PathError};
use crate::ratefn::{action_terms, LocalRate, RateError};

const LBFGS_MEMORY: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum PathOptError {
    #[error(transparent)]
    Path(#[from] PathError),
    #[error("rate evaluation failed on the initial path: {0}")]
    InitialPath(RateError),
    #[error("rate evaluation failed while differencing knot {knot}: {source}")]
    Gradient { knot: usize, source: RateError },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Terminal {
    /// `φ(T)` is fixed.
    Fixed(Vec<f64>),
    /// `φ(T)` is free; a terminal cost normally comes through `h`.
    Free,
}

#[derive(Debug, Clone)]
pub struct PathProblem {
    pub horizon: f64,
    pub intervals: usize,
    pub x0: Vec<f64>,
    pub terminal: Terminal,
    pub h: Option<PathFunctional>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptSettings {
    pub max_iter: usize,
    /// Stop when `‖∇J‖∞ ≤ grad_tol·(1 + |J|)`.
    pub grad_tol: f64,
    /// Relative finite-difference step.
    pub fd_step: f64,
    pub armijo: f64,
}

impl Default for OptSettings {
    fn default() -> Self {
        OptSettings {
            max_iter: 20_000,
            grad_tol: 1e-6,
            fd_step: 1e-6,
            armijo: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PathOptResult {
    pub path: DiscretePath,
    /// `S(φ) + h(φ)`.
    pub value: f64,
    pub action: f64,
    pub cost: f64,
    pub schedule: Schedule,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    /// Objective after every accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

impl PathProblem {
    pub fn validate(&self) -> Result<(), PathOptError> {
        if self.intervals < 2 {
            return Err(PathOptError::Invalid(format!(
                "need at least 2 intervals, got {}",
                self.intervals
            )));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(PathOptError::Invalid(format!(
                "horizon must be positive, got {}",
                self.horizon
            )));
        }
        if let Terminal::Fixed(end) = &self.terminal {
            if end.len() != self.x0.len() {
                return Err(PathOptError::Invalid("endpoint and start differ in dimension".into()));
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.intervals as f64
    }

    /// Straight line to the fixed endpoint, or the constant path at `x0`.
    pub fn initial_path(&self) -> DiscretePath {
        let end = match &self.terminal {
            Terminal::Fixed(e) => e.clone(),
            Terminal::Free => self.x0.clone(),
        };
        DiscretePath::from_fn(self.horizon, self.intervals, |t| {
            let s = t / self.horizon;
            self.x0.iter().zip(&end).map(|(a, b)| a + s * (b - a)).collect()
        })
        .expect("validated problem")
    }

    fn free_knots(&self) -> std::ops::Range<usize> {
        match self.terminal {
            Terminal::Fixed(_) => 1..self.intervals,
            Terminal::Free => 1..self.intervals + 1,
        }
    }

    fn cost(&self, path: &DiscretePath) -> f64 {
        self.h.as_ref().map_or(0.0, |h| h.eval(path))
    }
}

/// `S + h`, or an error when a rate evaluation fails.
pub fn objective(
    problem: &PathProblem,
    rate: &dyn LocalRate,
    path: &DiscretePath,
) -> Result<(f64, f64, f64), RateError> {
    let action: f64 = action_terms(path, rate)?.iter().sum();
    let cost = problem.cost(path);
    Ok((action + cost, action, cost))
}

fn interval_term(rate: &dyn LocalRate, dt: f64, a: &[f64], b: &[f64]) -> Result<f64, RateError> {
    let mid: Vec<f64> = a.iter().zip(b).map(|(a, b)| 0.5 * (a + b)).collect();
    let vel: Vec<f64> = a.iter().zip(b).map(|(a, b)| (b - a) / dt).collect();
    Ok(dt * rate.rate(&mid, &vel)?)
}

/// Centered finite-difference gradient of `S + h` in the free knot coordinates,
/// flattened knot-major. Only the two intervals touching a knot are re-evaluated.
pub fn gradient(
    problem: &PathProblem,
    rate: &dyn LocalRate,
    path: &DiscretePath,
    rel_step: f64,
) -> Result<Vec<f64>, PathOptError> {
    let d = path.dim();
    let dt = path.dt();
    let m = path.intervals();
    let knots: Vec<usize> = problem.free_knots().collect();
    let per_knot: Vec<Result<Vec<f64>, PathOptError>> = knots
        .par_iter()
        .map(|&k| {
            let mut g = vec![0.0; d];
            let mut states = path.states().to_vec();
            for i in 0..d {
                let x = states[k][i];
                let eta = rel_step * (1.0 + x.abs());
                let mut local = |v: f64| -> Result<f64, RateError> {
                    states[k][i] = v;
                    let mut s = 0.0;
                    if k > 0 {
                        s += interval_term(rate, dt, &states[k - 1], &states[k])?;
                    }
                    if k < m {
                        s += interval_term(rate, dt, &states[k], &states[k + 1])?;
                    }
                    if let Some(h) = &problem.h {
                        let p = DiscretePath::new(dt, states.clone()).expect("same shape");
                        s += h.eval(&p);
                    }
                    Ok(s)
                };
                let plus = local(x + eta).map_err(|source| PathOptError::Gradient { knot: k, source })?;
                let minus = local(x - eta).map_err(|source| PathOptError::Gradient { knot: k, source })?;
                states[k][i] = x;
                g[i] = (plus - minus) / (2.0 * eta);
            }
            Ok(g)
        })
        .collect();
    let mut out = Vec::with_capacity(knots.len() * d);
    for g in per_knot {
        out.extend(g?);
    }
    Ok(out)
}

/// Solve `(K/dt) p = g` per component, with `K` the discrete H¹ Laplacian on the free
/// knots (Dirichlet at fixed ends, Neumann at a free end).
fn precondition(g: &[f64], d: usize, free_end: bool, dt: f64) -> Vec<f64> {
    let n = g.len() / d;
    let mut out = vec![0.0; g.len()];
    let mut c = vec![0.0; n];
    let mut r = vec![0.0; n];
    for comp in 0..d {
        // Thomas algorithm for tridiag(−1, 2, −1) with diag[n−1] = 1 when free.
        let diag = |j: usize| if free_end && j == n - 1 { 1.0 } else { 2.0 };
        let mut denom = diag(0);
        c[0] = -1.0 / denom;
        r[0] = g[comp] * dt / denom;
        for j in 1..n {
            denom = diag(j) + c[j - 1];
            c[j] = -1.0 / denom;
            r[j] = (g[j * d + comp] * dt + r[j - 1]) / denom;
        }
        out[(n - 1) * d + comp] = r[n - 1];
        for j in (0..n - 1).rev() {
            out[j * d + comp] = r[j] - c[j] * out[(j + 1) * d + comp];
        }
    }
    out
}

pub fn minimize_action(
    problem: &PathProblem,
    rate: &dyn LocalRate,
    init: Option<DiscretePath>,
    settings: &OptSettings,
) -> Result<PathOptResult, PathOptError> {
    problem.validate()?;
    let mut path = init.unwrap_or_else(|| problem.initial_path());
    if path.intervals() != problem.intervals || path.dim() != problem.x0.len() {
        return Err(PathOptError::Invalid(
            "initial path does not match the problem grid".into(),
        ));
    }
    let d = path.dim();
    let dt = problem.dt();
    {
        // Pin the constrained knots.
        let mut states = path.states().to_vec();
        states[0] = problem.x0.clone();
        if let Terminal::Fixed(end) = &problem.terminal {
            states[problem.intervals] = end.clone();
        }
        path = DiscretePath::new(dt, states)?;
    }
    let free_end = matches!(problem.terminal, Terminal::Free);
    let (mut value, _, _) = objective(problem, rate, &path).map_err(PathOptError::InitialPath)?;
    let mut history = vec![value];
    let mut iterations = 0;
    let mut converged = false;
    let mut g = gradient(problem, rate, &path, settings.fd_step)?;
    let mut grad_norm = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut stalls = 0;
    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(a, b)| a * b).sum::<f64>();
    while iterations < settings.max_iter {
        if grad_norm <= settings.grad_tol * (1.0 + value.abs()) {
            converged = true;
            break;
        }
        iterations += 1;
        // L-BFGS two-loop recursion with the H¹ solve as the base inverse Hessian.
        let mut p = {
            let mut q = g.clone();
            let mut alphas = Vec::with_capacity(memory.len());
            for (s, y, rho) in memory.iter().rev() {
                let a = rho * dot(s, &q);
                q.iter_mut().zip(y).for_each(|(q, y)| *q -= a * y);
                alphas.push(a);
            }
            let mut r = precondition(&q, d, free_end, dt);
            if let Some((s, y, _)) = memory.back() {
                let hy = precondition(y, d, free_end, dt);
                let scale = dot(s, y) / dot(y, &hy);
                r.iter_mut().for_each(|v| *v *= scale);
            }
            for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
                let b = rho * dot(y, &r);
                r.iter_mut().zip(s).for_each(|(r, s)| *r += (a - b) * s);
            }
            r
        };
        let mut slope = -dot(&g, &p);
        if !(slope < 0.0) {
            memory.clear();
            p = precondition(&g, d, free_end, dt);
            slope = -dot(&g, &p);
        }
        let mut accepted = None;
        let mut step = 1.0;
        for _ in 0..60 {
            let mut states = path.states().to_vec();
            for (j, k) in problem.free_knots().enumerate() {
                for i in 0..d {
                    states[k][i] -= step * p[j * d + i];
                }
            }
            let trial = DiscretePath::new(dt, states)?;
            if let Ok((v, _, _)) = objective(problem, rate, &trial) {
                if v <= value + settings.armijo * step * slope {
                    accepted = Some((trial, v));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((trial, v)) = accepted else {
            if memory.is_empty() {
                break;
            }
            memory.clear();
            continue;
        };
        let g_new = gradient(problem, rate, &trial, settings.fd_step)?;
        let s_vec: Vec<f64> = p.iter().map(|v| -step * v).collect();
        let y_vec: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s_vec, &y_vec);
        if sy > 1e-12 * dot(&s_vec, &s_vec).sqrt() * dot(&y_vec, &y_vec).sqrt() {
            if memory.len() == LBFGS_MEMORY {
                memory.pop_front();
            }
            memory.push_back((s_vec, y_vec, 1.0 / sy));
        }
        stalls = if v < value { 0 } else { stalls + 1 };
        path = trial;
        value = v;
        history.push(v);
        g = g_new;
        grad_norm = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if stalls >= 5 {
            // Rounding floor: the objective no longer moves.
            break;
        }
    }
    if !converged && grad_norm <= settings.grad_tol * (1.0 + value.abs()) {
        converged = true;
    }
    let (value, action, cost) = objective(problem, rate, &path).map_err(PathOptError::InitialPath)?;
    Ok(PathOptResult {
        schedule: Schedule::from_path(&path),
        path,
        value,
        action,
        cost,
        iterations,
        converged,
        grad_norm,
        history,
    })
}

/// `t, psi_*, psidot_*` rows; the velocity column holds the interval value from `t`
/// onward (the last row repeats the final interval).
pub fn write_csv<W: Write>(w: &mut W, result: &PathOptResult) -> io::Result<()> {
    let p = &result.path;
    let d = p.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|k| format!("psi_{k}")));
    header.extend((1..=d).map(|k| format!("psidot_{k}")));
    csv::write_header(w, &header.iter().map(String::as_str).collect::<Vec<_>>())?;
    for k in 0..=p.intervals() {
        let mut row = vec![csv::num(k as f64 * p.dt())];
        row.extend(p.state(k).iter().map(|v| csv::num(*v)));
        let vel = p.velocity(k.min(p.intervals() - 1));
        row.extend(vel.iter().map(|v| csv::num(*v)));
        csv::write_row(w, &row)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
