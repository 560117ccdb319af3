//! Built-in path functionals `h(φ)`: terminal cost, running cost and a smoothed exit indicator.

use crate::expr::{parse, Compiled, Expr};
use crate::model::{x_name, MultiscaleModel};
use crate::path::DiscretePath;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FunctionalError {
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
}

/// An expression in the slow variables `x_1..x_d`, compiled once.
#[derive(Debug, Clone)]
pub struct StateFn {
    source: String,
    dim: usize,
    compiled: Compiled,
}

impl StateFn {
    /// Parse `src`; model definitions such as `V` may be referenced by name.
    pub fn new(src: &str, model: &MultiscaleModel) -> Result<Self, FunctionalError> {
        let d = model.dim();
        let expr = parse(src).map_err(|e| FunctionalError::Parse(format!("{src:?}: {e}")))?;
        let expr = expand(&expr, model, 0)?;
        let compiled = Compiled::new(&expr, &|name| (0..d).find(|&k| x_name(k) == name))
            .map_err(|e| FunctionalError::Parse(format!("{src:?}: {e}")))?;
        Ok(StateFn {
            source: src.to_string(),
            dim: d,
            compiled,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.compiled.eval(&x[..self.dim])
    }
}

fn expand(e: &Expr, model: &MultiscaleModel, depth: usize) -> Result<Expr, FunctionalError> {
    if depth > 16 {
        return Err(FunctionalError::Invalid("definitions nest too deeply".into()));
    }
    let d = model.dim();
    let mut failure = None;
    let out = e.map_vars(&mut |name| {
        if d == 1 && name == "x" {
            return Some(Expr::var("x_1"));
        }
        if name == "y" || name.starts_with("y_") {
            failure = Some(format!("functionals depend on the slow state only, found {name}"));
            return None;
        }
        model.definition(name).cloned()
    });
    if let Some(msg) = failure {
        return Err(FunctionalError::Invalid(msg));
    }
    Ok(out)
}

/// `C^∞` step: 0 for `s ≤ 0`, 1 for `s ≥ 1`.
pub fn smooth_step(s: f64) -> f64 {
    let f = |t: f64| if t > 0.0 { (-1.0 / t).exp() } else { 0.0 };
    let a = f(s);
    let b = f(1.0 - s);
    if a + b == 0.0 {
        0.0
    } else {
        a / (a + b)
    }
}

#[derive(Debug, Clone)]
pub enum PathFunctional {
    Constant(f64),
    /// `F(φ(T))`.
    Terminal(StateFn),
    /// `∫₀ᵀ g(φ(t)) dt`.
    Running(StateFn),
    /// `A·(1 − step((max_t F(φ(t)) − level + width)/width))`: about `A` unless the
    /// path reaches `{F ≥ level}`, smoothed over `width`.
    Exit {
        level_fn: StateFn,
        level: f64,
        width: f64,
        amplitude: f64,
    },
}

impl PathFunctional {
    /// Value on a stored path; running costs use the trapezoid rule.
    pub fn eval(&self, path: &DiscretePath) -> f64 {
        let mut acc = self.accumulator(path.state(0));
        for k in 0..path.intervals() {
            acc.step(path.state(k), path.state(k + 1), path.dt());
        }
        acc.finish(path.end())
    }

    pub fn accumulator(&self, x0: &[f64]) -> Accumulator<'_> {
        let state = match self {
            PathFunctional::Exit { level_fn, .. } => level_fn.eval(x0),
            _ => 0.0,
        };
        Accumulator { h: self, state }
    }

    pub fn is_constant(&self) -> Option<f64> {
        match self {
            PathFunctional::Constant(c) => Some(*c),
            _ => None,
        }
    }
}

/// Streaming evaluation along a trajectory without storing it.
pub struct Accumulator<'a> {
    h: &'a PathFunctional,
    state: f64,
}

impl Accumulator<'_> {
    #[inline]
    pub fn step(&mut self, from: &[f64], to: &[f64], dt: f64) {
        match self.h {
            PathFunctional::Running(g) => self.state += 0.5 * dt * (g.eval(from) + g.eval(to)),
            PathFunctional::Exit { level_fn, .. } => self.state = self.state.max(level_fn.eval(to)),
            _ => {}
        }
    }

    pub fn finish(&self, end: &[f64]) -> f64 {
        match self.h {
            PathFunctional::Constant(c) => *c,
            PathFunctional::Terminal(f) => f.eval(end),
            PathFunctional::Running(_) => self.state,
            PathFunctional::Exit {
                level,
                width,
                amplitude,
                ..
            } => amplitude * (1.0 - smooth_step((self.state - level + width) / width)),
        }
    }
}
