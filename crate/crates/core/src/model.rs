//! The multiscale diffusion
//!
//! ```text
//! dX = [ (ε/δ) b(X, X/δ) + c(X, X/δ) ] dt + √ε σ(X, X/δ) dW,   X(0) = x0
//! ```
//!
//! with coefficients periodic in the fast variable and `δ(ε) = κ ε^a`.
//! The exponent `a` alone decides the scaling regime.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use nalgebra::DMatrix;

use crate::expr::{self, Compiled, EvalError, Expr, ParseError};

/// Largest state dimension the coefficient evaluator supports.
pub const MAX_DIM: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{field}: {source}")]
    Parse {
        field: String,
        #[source]
        source: ParseError,
    },
    #[error("{field}: {source}")]
    Eval {
        field: String,
        #[source]
        source: EvalError,
    },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("definition cycle through '{0}'")]
    Cycle(String),
    #[error("sigma*sigma^T is degenerate at x={x:?}, y={y:?}: min eigenvalue {min_eig:e} < {nu:e}")]
    Nondegeneracy {
        x: Vec<f64>,
        y: Vec<f64>,
        min_eig: f64,
        nu: f64,
    },
    #[error("{field} is not periodic in y_{direction} at x={x:?}, y={y:?} (jump {jump:e})")]
    NotPeriodic {
        field: String,
        direction: usize,
        x: Vec<f64>,
        y: Vec<f64>,
        jump: f64,
    },
    #[error("{field} is not finite at x={x:?}, y={y:?}")]
    NonFinite { field: String, x: Vec<f64>, y: Vec<f64> },
    #[error("invalid scaling: {0}")]
    Scaling(String),
    #[error("{0}")]
    Invalid(String),
}

/// Scaling regime of the family `δ(ε) = κ ε^a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regime {
    /// `ε/δ → ∞` (a > 1): homogenization.
    One,
    /// `ε/δ → γ` (a = 1).
    Two { gamma: f64 },
    /// `ε/δ → 0` (a < 1).
    Three,
}

impl Regime {
    pub fn index(&self) -> u8 {
        match self {
            Regime::One => 1,
            Regime::Two { .. } => 2,
            Regime::Three => 3,
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::One => write!(f, "1"),
            Regime::Two { gamma } => write!(f, "2(gamma={gamma})"),
            Regime::Three => write!(f, "3"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaling {
    pub a: f64,
    pub kappa: f64,
}

impl Scaling {
    pub fn delta(&self, eps: f64) -> f64 {
        self.kappa * eps.powf(self.a)
    }
}

/// Uncompiled description of a model, as read from a config file.
#[derive(Debug, Clone, Default)]
pub struct ModelSpec {
    pub dimension: usize,
    pub b: Vec<String>,
    pub c: Vec<String>,
    /// Row-major `d × d`.
    pub sigma: Vec<String>,
    /// Named helper functions and constants (`Q`, `V`, `D`, ...).
    pub definitions: BTreeMap<String, String>,
    /// Per-direction period of the fast variable; defaults to 1.
    pub period: Option<Vec<f64>>,
    pub a: f64,
    pub kappa: Option<f64>,
    pub gamma: Option<f64>,
    pub x0: Vec<f64>,
    /// Box of slow states sampled during validation; defaults to `x0 ± 2`.
    pub x_box: Option<(f64, f64)>,
    /// Nondegeneracy floor for `σσᵀ`.
    pub nu: Option<f64>,
}

/// Values of `b, c, σ` at one `(x, y)`.
#[derive(Debug, Clone, Copy)]
pub struct CoefficientValues {
    pub b: [f64; MAX_DIM],
    pub c: [f64; MAX_DIM],
    /// Row-major, leading `d × d` block used.
    pub sigma: [f64; MAX_DIM * MAX_DIM],
}

impl Default for CoefficientValues {
    fn default() -> Self {
        CoefficientValues {
            b: [0.0; MAX_DIM],
            c: [0.0; MAX_DIM],
            sigma: [0.0; MAX_DIM * MAX_DIM],
        }
    }
}

/// Coefficients `b, c, σ` as expressions in `x_1..x_d, y_1..y_d`.
#[derive(Debug, Clone)]
pub struct CoefficientField {
    dim: usize,
    b: Vec<Expr>,
    c: Vec<Expr>,
    sigma: Vec<Expr>,
    period: Vec<f64>,
    cb: Vec<Compiled>,
    cc: Vec<Compiled>,
    cs: Vec<Compiled>,
}

pub fn x_name(k: usize) -> String {
    format!("x_{}", k + 1)
}

pub fn y_name(k: usize) -> String {
    format!("y_{}", k + 1)
}

fn slot_of(dim: usize, name: &str) -> Option<usize> {
    let (head, idx) = name.split_once('_')?;
    let k: usize = idx.parse().ok()?;
    if k == 0 || k > dim {
        return None;
    }
    match head {
        "x" => Some(k - 1),
        "y" => Some(dim + k - 1),
        _ => None,
    }
}

/// `x`/`y` are aliases of `x_1`/`y_1` in one dimension.
fn canonical_name(dim: usize, name: &str) -> String {
    match (dim, name) {
        (1, "x") => "x_1".into(),
        (1, "y") => "y_1".into(),
        _ => name.to_string(),
    }
}

fn canonicalize(e: &Expr, dim: usize) -> Expr {
    e.map_vars(&mut |n| {
        let c = canonical_name(dim, n);
        (c != n).then_some(Expr::Var(c))
    })
}

struct Definitions {
    dim: usize,
    raw: BTreeMap<String, Expr>,
}

impl Definitions {
    fn parse(dim: usize, defs: &BTreeMap<String, String>) -> Result<Self, ModelError> {
        let mut raw = BTreeMap::new();
        for (k, v) in defs {
            let e = expr::parse(v).map_err(|source| ModelError::Parse {
                field: format!("definitions.{k}"),
                source,
            })?;
            raw.insert(k.clone(), canonicalize(&e, dim));
        }
        Ok(Definitions { dim, raw })
    }

    /// Inline definitions; `dF/dv` with `F` defined and `v` a coordinate is the
    /// derivative of `F` with respect to `v`.
    fn expand(&self, e: &Expr, stack: &mut Vec<String>) -> Result<Expr, ModelError> {
        if let Expr::Binary(expr::BinOp::Div, num, den) = e {
            // `-dQ/dy` parses as `(-dQ)/dy`
            let (num, negate) = match num.as_ref() {
                Expr::Neg(inner) => (inner.as_ref(), true),
                other => (other, false),
            };
            if let (Expr::Var(n), Expr::Var(d)) = (num, den.as_ref()) {
                if let (Some(f), Some(v)) = (n.strip_prefix('d'), d.strip_prefix('d')) {
                    let v = canonical_name(self.dim, v);
                    if self.raw.contains_key(f) && slot_of(self.dim, &v).is_some() {
                        let inner = self.expand(&Expr::Var(f.to_string()), stack)?;
                        let g = inner.differentiate(&v);
                        return Ok(if negate { expr::neg(g) } else { g });
                    }
                }
            }
        }
        Ok(match e {
            Expr::Var(n) => match self.raw.get(n) {
                Some(body) => {
                    if stack.contains(n) {
                        return Err(ModelError::Cycle(n.clone()));
                    }
                    stack.push(n.clone());
                    let out = self.expand(body, stack)?;
                    stack.pop();
                    out
                }
                None => e.clone(),
            },
            Expr::Num(_) | Expr::Pi => e.clone(),
            Expr::Neg(a) => Expr::Neg(Box::new(self.expand(a, stack)?)),
            Expr::Call(f, a) => Expr::Call(*f, Box::new(self.expand(a, stack)?)),
            Expr::Binary(op, a, b) => {
                Expr::Binary(*op, Box::new(self.expand(a, stack)?), Box::new(self.expand(b, stack)?))
            }
        })
    }

    fn resolve(&self, field: &str, src: &str) -> Result<Expr, ModelError> {
        let e = expr::parse(src).map_err(|source| ModelError::Parse {
            field: field.to_string(),
            source,
        })?;
        let e = self.expand(&canonicalize(&e, self.dim), &mut Vec::new())?;
        if let Some(bad) = e.free_vars().into_iter().find(|n| slot_of(self.dim, n).is_none()) {
            return Err(ModelError::Eval {
                field: field.to_string(),
                source: EvalError::Unbound(bad),
            });
        }
        Ok(e)
    }

    /// Expand a user definition by name (used for separable Langevin inputs).
    fn get(&self, name: &str) -> Option<Result<Expr, ModelError>> {
        self.raw
            .get(name)
            .map(|body| self.expand(body, &mut vec![name.to_string()]))
    }
}

impl CoefficientField {
    /// Build from expressions already written in `x_k, y_k`.
    pub fn new(dim: usize, b: Vec<Expr>, c: Vec<Expr>, sigma: Vec<Expr>, period: Vec<f64>) -> Result<Self, ModelError> {
        if dim == 0 || dim > MAX_DIM {
            return Err(ModelError::Dimension(format!(
                "dimension must be in 1..={MAX_DIM}, got {dim}"
            )));
        }
        if b.len() != dim || c.len() != dim || sigma.len() != dim * dim || period.len() != dim {
            return Err(ModelError::Dimension(format!(
                "d={dim} needs {dim} b, {dim} c, {} sigma entries and {dim} periods; got {}, {}, {}, {}",
                dim * dim,
                b.len(),
                c.len(),
                sigma.len(),
                period.len()
            )));
        }
        if let Some(p) = period.iter().find(|p| !(p.is_finite() && **p > 0.0)) {
            return Err(ModelError::Invalid(format!("period must be positive, got {p}")));
        }
        let b: Vec<Expr> = b.iter().map(|e| canonicalize(e, dim)).collect();
        let c: Vec<Expr> = c.iter().map(|e| canonicalize(e, dim)).collect();
        let sigma: Vec<Expr> = sigma.iter().map(|e| canonicalize(e, dim)).collect();
        let resolve = |n: &str| slot_of(dim, n);
        let compile = |name: &str, es: &[Expr]| -> Result<Vec<Compiled>, ModelError> {
            es.iter()
                .enumerate()
                .map(|(i, e)| {
                    Compiled::new(e, &resolve).map_err(|source| ModelError::Eval {
                        field: format!("{name}[{i}]"),
                        source,
                    })
                })
                .collect()
        };
        let cb = compile("b", &b)?;
        let cc = compile("c", &c)?;
        let cs = compile("sigma", &sigma)?;
        Ok(CoefficientField {
            dim,
            b,
            c,
            sigma,
            period,
            cb,
            cc,
            cs,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn period(&self) -> &[f64] {
        &self.period
    }

    pub fn b_exprs(&self) -> &[Expr] {
        &self.b
    }

    pub fn c_exprs(&self) -> &[Expr] {
        &self.c
    }

    pub fn sigma_exprs(&self) -> &[Expr] {
        &self.sigma
    }

    fn slots(&self, x: &[f64], y: &[f64]) -> [f64; 2 * MAX_DIM] {
        let d = self.dim;
        let mut s = [0.0; 2 * MAX_DIM];
        s[..d].copy_from_slice(&x[..d]);
        s[d..2 * d].copy_from_slice(&y[..d]);
        s
    }

    /// Evaluate all coefficients at `(x, y)`; `y` in user units (period `L`).
    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> CoefficientValues {
        let s = self.slots(x, y);
        let mut out = CoefficientValues::default();
        for (o, e) in out.b.iter_mut().zip(&self.cb) {
            *o = e.eval(&s);
        }
        for (o, e) in out.c.iter_mut().zip(&self.cc) {
            *o = e.eval(&s);
        }
        for (o, e) in out.sigma.iter_mut().zip(&self.cs) {
            *o = e.eval(&s);
        }
        out
    }

    pub fn eval_b(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let s = self.slots(x, y);
        for (o, e) in out.iter_mut().zip(&self.cb) {
            *o = e.eval(&s);
        }
    }

    /// `σσᵀ` at `(x, y)` as a dense matrix.
    pub fn diffusion_matrix(&self, x: &[f64], y: &[f64]) -> DMatrix<f64> {
        let v = self.eval(x, y);
        let d = self.dim;
        let s = DMatrix::from_fn(d, d, |i, j| v.sigma[i * d + j]);
        &s * s.transpose()
    }

    /// Sampled check of finiteness, nondegeneracy and periodicity on a
    /// `32^d` fast lattice for a few slow points in `x_box`.
    pub fn validate(&self, x_box: (f64, f64), nu: f64) -> Result<(), ModelError> {
        let d = self.dim;
        let per_dim = 32usize;
        let x_samples = 5usize;
        let n_y = per_dim.pow(d as u32);
        let n_x = x_samples.pow(d.min(2) as u32);
        let mut x = vec![0.0; d];
        let mut y = vec![0.0; d];
        // Pointwise checks cover the whole lattice before periodicity is tested.
        for pass in 0..2 {
            for ix in 0..n_x {
                let mut r = ix;
                for (k, xk) in x.iter_mut().enumerate() {
                    let j = if k < 2 { r % x_samples } else { x_samples / 2 };
                    if k < 2 {
                        r /= x_samples;
                    }
                    *xk = x_box.0 + (x_box.1 - x_box.0) * j as f64 / (x_samples - 1) as f64;
                }
                for iy in 0..n_y {
                    let mut r = iy;
                    for (k, yk) in y.iter_mut().enumerate() {
                        *yk = self.period[k] * (r % per_dim) as f64 / per_dim as f64;
                        r /= per_dim;
                    }
                    let v = self.eval(&x, &y);
                    if pass == 1 {
                        self.check_periodic(&x, &y, &v)?;
                        continue;
                    }
                    let finite = |name: &str, vals: &[f64]| -> Result<(), ModelError> {
                        if vals.iter().all(|v| v.is_finite()) {
                            Ok(())
                        } else {
                            Err(ModelError::NonFinite {
                                field: name.into(),
                                x: x.clone(),
                                y: y.clone(),
                            })
                        }
                    };
                    finite("b", &v.b[..d])?;
                    finite("c", &v.c[..d])?;
                    finite("sigma", &v.sigma[..d * d])?;
                    let min_eig = if d == 1 {
                        v.sigma[0] * v.sigma[0]
                    } else {
                        let a = self.diffusion_matrix(&x, &y);
                        a.symmetric_eigenvalues().min()
                    };
                    if !(min_eig >= nu) {
                        return Err(ModelError::Nondegeneracy {
                            x: x.clone(),
                            y: y.clone(),
                            min_eig,
                            nu,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn check_periodic(&self, x: &[f64], y: &[f64], v: &CoefficientValues) -> Result<(), ModelError> {
        let d = self.dim;
        for k in 0..d {
            let mut ys = y.to_vec();
            ys[k] += self.period[k];
            let w = self.eval(x, &ys);
            let pairs = [
                ("b", &v.b[..d], &w.b[..d]),
                ("c", &v.c[..d], &w.c[..d]),
                ("sigma", &v.sigma[..d * d], &w.sigma[..d * d]),
            ];
            for (name, p, q) in pairs {
                for (a, b) in p.iter().zip(q) {
                    let jump = (a - b).abs();
                    if jump > 1e-10 * a.abs().max(1.0) {
                        return Err(ModelError::NotPeriodic {
                            field: name.into(),
                            direction: k + 1,
                            x: x.to_vec(),
                            y: y.to_vec(),
                            jump,
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// A validated multiscale model. Immutable after construction.
#[derive(Debug, Clone)]
pub struct MultiscaleModel {
    pub coefficients: CoefficientField,
    pub scaling: Scaling,
    pub x0: Vec<f64>,
    definitions: BTreeMap<String, Expr>,
}

impl MultiscaleModel {
    pub fn dim(&self) -> usize {
        self.coefficients.dim()
    }

    pub fn delta(&self, eps: f64) -> f64 {
        self.scaling.delta(eps)
    }

    /// `γ = lim ε/δ = 1/κ` when `a = 1`.
    pub fn gamma(&self) -> Option<f64> {
        match self.regime() {
            Regime::Two { gamma } => Some(gamma),
            _ => None,
        }
    }

    pub fn regime(&self) -> Regime {
        classify_regime(&self.scaling)
    }

    /// A fully expanded user definition, e.g. the fast potential `Q`.
    pub fn definition(&self, name: &str) -> Option<&Expr> {
        self.definitions.get(name)
    }

    /// Same coefficients under a different scaling family.
    pub fn with_scaling(&self, scaling: Scaling) -> Result<Self, ModelError> {
        check_scaling(&scaling)?;
        Ok(MultiscaleModel {
            scaling,
            ..self.clone()
        })
    }
}

fn check_scaling(s: &Scaling) -> Result<(), ModelError> {
    if !(s.a.is_finite() && s.a > 0.0) {
        return Err(ModelError::Scaling(format!("a must be > 0, got {}", s.a)));
    }
    if !(s.kappa.is_finite() && s.kappa > 0.0) {
        return Err(ModelError::Scaling(format!("kappa must be > 0, got {}", s.kappa)));
    }
    Ok(())
}

/// Regime from the scaling exponent alone.
pub fn classify_regime(s: &Scaling) -> Regime {
    if s.a > 1.0 {
        Regime::One
    } else if s.a == 1.0 {
        Regime::Two { gamma: 1.0 / s.kappa }
    } else {
        Regime::Three
    }
}

pub fn build_model(spec: &ModelSpec) -> Result<MultiscaleModel, ModelError> {
    let d = spec.dimension;
    if d == 0 || d > MAX_DIM {
        return Err(ModelError::Dimension(format!(
            "dimension must be in 1..={MAX_DIM}, got {d}"
        )));
    }
    if spec.x0.len() != d {
        return Err(ModelError::Dimension(format!(
            "x0 has {} components, dimension is {d}",
            spec.x0.len()
        )));
    }
    let defs = Definitions::parse(d, &spec.definitions)?;
    let field = |name: &str, srcs: &[String]| -> Result<Vec<Expr>, ModelError> {
        srcs.iter()
            .enumerate()
            .map(|(i, s)| {
                let label = if srcs.len() == 1 {
                    name.to_string()
                } else {
                    format!("{name}[{i}]")
                };
                defs.resolve(&label, s)
            })
            .collect()
    };
    let b = field("b", &spec.b)?;
    let c = field("c", &spec.c)?;
    let sigma = field("sigma", &spec.sigma)?;
    let period = spec.period.clone().unwrap_or_else(|| vec![1.0; d]);
    let coefficients = CoefficientField::new(d, b, c, sigma, period)?;

    let kappa = match (spec.a == 1.0, spec.kappa, spec.gamma) {
        (true, Some(k), Some(g)) if ((1.0 / k) - g).abs() > 1e-12 * g.abs() => {
            return Err(ModelError::Scaling(format!(
                "gamma={g} disagrees with 1/kappa={}",
                1.0 / k
            )))
        }
        (true, None, Some(g)) => {
            if !(g > 0.0) {
                return Err(ModelError::Scaling(format!("gamma must be > 0, got {g}")));
            }
            1.0 / g
        }
        (_, Some(k), _) => k,
        (_, None, _) => 1.0,
    };
    let scaling = Scaling { a: spec.a, kappa };
    check_scaling(&scaling)?;

    let nu = spec.nu.unwrap_or(1e-8);
    let x_box = spec.x_box.unwrap_or_else(|| {
        let c = spec.x0[0];
        (c - 2.0, c + 2.0)
    });
    coefficients.validate(x_box, nu)?;

    let mut definitions = BTreeMap::new();
    let mut seen = HashSet::new();
    for name in spec.definitions.keys() {
        if seen.insert(name.clone()) {
            if let Some(e) = defs.get(name) {
                definitions.insert(name.clone(), e?);
            }
        }
    }
    Ok(MultiscaleModel {
        coefficients,
        scaling,
        x0: spec.x0.clone(),
        definitions,
    })
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum KernelError {
    #[error("Regime 1 velocity needs the cell-solution Jacobian dchi/dy")]
    MissingCellSolution,
    #[error("dimension mismatch in velocity kernel")]
    Dimension,
}

/// Averaged velocity `λ_i(x, y, z)` of the slow variable.
///
/// `dchi` is the row-major Jacobian `∂χ/∂y` at `(x, y)`, required in Regime 1.
pub fn velocity_kernel(
    regime: Regime,
    model: &MultiscaleModel,
    x: &[f64],
    y: &[f64],
    z: &[f64],
    dchi: Option<&[f64]>,
) -> Result<Vec<f64>, KernelError> {
    let d = model.dim();
    if x.len() != d || y.len() != d || z.len() != d {
        return Err(KernelError::Dimension);
    }
    let v = model.coefficients.eval(x, y);
    let mut base: Vec<f64> = (0..d)
        .map(|i| v.c[i] + (0..d).map(|j| v.sigma[i * d + j] * z[j]).sum::<f64>())
        .collect();
    match regime {
        Regime::One => {
            let j = dchi.ok_or(KernelError::MissingCellSolution)?;
            if j.len() != d * d {
                return Err(KernelError::Dimension);
            }
            Ok((0..d)
                .map(|i| base[i] + (0..d).map(|k| j[i * d + k] * base[k]).sum::<f64>())
                .collect())
        }
        Regime::Two { gamma } => {
            for (o, b) in base.iter_mut().zip(&v.b) {
                *o += gamma * b;
            }
            Ok(base)
        }
        Regime::Three => Ok(base),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn langevin_spec() -> ModelSpec {
        ModelSpec {
            dimension: 1,
            b: vec!["-dQ/dy".into()],
            c: vec!["-dV/dx".into()],
            sigma: vec!["sqrt(2*D)".into()],
            definitions: [
                ("Q".to_string(), "cos(2*pi*y)+sin(2*pi*y)".to_string()),
                ("V".to_string(), "1.5*(x^2\u{2212}1)^2".to_string()),
                ("D".to_string(), "1".to_string()),
            ]
            .into(),
            a: 2.0,
            x0: vec![-1.0],
            ..Default::default()
        }
    }

    fn simple(b: &str, c: &str, s: &str) -> ModelSpec {
        ModelSpec {
            dimension: 1,
            b: vec![b.into()],
            c: vec![c.into()],
            sigma: vec![s.into()],
            a: 2.0,
            x0: vec![0.0],
            ..Default::default()
        }
    }

    #[test]
    fn langevin_model_builds_and_expands_derivatives() {
        let m = build_model(&langevin_spec()).unwrap();
        let w = 2.0 * std::f64::consts::PI;
        let (x, y) = (0.4, 0.3);
        let v = m.coefficients.eval(&[x], &[y]);
        let want_b = -(-w * (w * y).sin() + w * (w * y).cos());
        assert!((v.b[0] - want_b).abs() < 1e-12);
        assert!((v.c[0] + 6.0 * x * (x * x - 1.0)).abs() < 1e-12);
        assert!((v.sigma[0] - 2f64.sqrt()).abs() < 1e-15);
        assert!(m.definition("Q").is_some());
    }

    #[test]
    fn trivial_model_is_valid() {
        assert!(build_model(&simple("0", "0", "1")).is_ok());
    }

    #[test]
    fn vanishing_sigma_is_rejected() {
        match build_model(&simple("0", "0", "y - 0.5")) {
            Err(ModelError::Nondegeneracy { y, .. }) => assert_eq!(y, vec![0.5]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_periodic_coefficient_is_rejected() {
        assert!(matches!(
            build_model(&simple("y", "0", "1")),
            Err(ModelError::NotPeriodic { .. })
        ));
    }

    #[test]
    fn parse_errors_carry_field_and_location() {
        let err = build_model(&simple("2*+", "0", "1")).unwrap_err();
        assert!(err.to_string().starts_with("b: 1:3:"), "{err}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut s = simple("0", "0", "1");
        s.dimension = 2;
        s.x0 = vec![0.0, 0.0];
        assert!(matches!(build_model(&s), Err(ModelError::Dimension(_))));
    }

    #[test]
    fn definition_cycles_are_rejected() {
        let mut s = simple("A", "0", "1");
        s.definitions = [("A".into(), "B".into()), ("B".into(), "A+1".into())].into();
        assert!(matches!(build_model(&s), Err(ModelError::Cycle(_))));
    }

    #[test]
    fn period_other_than_one_is_checked_in_user_units() {
        let mut s = simple("-dQ/dy", "0", "1");
        s.definitions = [("Q".into(), "cos(y)+sin(y)".into())].into();
        s.period = Some(vec![2.0 * std::f64::consts::PI]);
        assert!(build_model(&s).is_ok());
        s.period = None;
        assert!(matches!(build_model(&s), Err(ModelError::NotPeriodic { .. })));
    }

    #[test]
    fn regime_examples() {
        let r = |a, kappa| classify_regime(&Scaling { a, kappa });
        assert_eq!(r(2.0, 1.0), Regime::One);
        assert_eq!(r(1.0, 2.0), Regime::Two { gamma: 0.5 });
        assert_eq!(r(0.5, 1.0), Regime::Three);
    }

    #[test]
    fn gamma_fixes_kappa_in_regime_two() {
        let mut s = simple("0", "0", "1");
        s.a = 1.0;
        s.gamma = Some(4.0);
        let m = build_model(&s).unwrap();
        assert_eq!(m.gamma(), Some(4.0));
        assert!((m.delta(0.1) - 0.025).abs() < 1e-15);
        s.kappa = Some(1.0);
        assert!(build_model(&s).is_err());
    }

    #[test]
    fn velocity_kernel_examples() {
        let m = build_model(&simple("0", "0", "1")).unwrap();
        assert_eq!(
            velocity_kernel(Regime::Three, &m, &[0.0], &[0.3], &[2.0], None).unwrap(),
            vec![2.0]
        );
        let m2 = build_model(&simple("1", "0", "1")).unwrap();
        assert_eq!(
            velocity_kernel(Regime::Two { gamma: 1.0 }, &m2, &[0.0], &[0.3], &[0.0], None).unwrap(),
            vec![1.0]
        );
        assert_eq!(
            velocity_kernel(Regime::One, &m2, &[0.0], &[0.3], &[0.0], None),
            Err(KernelError::MissingCellSolution)
        );
        let ml = build_model(&langevin_spec()).unwrap();
        let x = 0.5;
        let c = -6.0 * x * (x * x - 1.0);
        let got = velocity_kernel(Regime::One, &ml, &[x], &[0.2], &[0.0], Some(&[0.7])).unwrap();
        assert!((got[0] - 1.7 * c).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn velocity_kernel_is_affine_in_control(
            y in 0.0f64..1.0, z1 in -3.0f64..3.0, z2 in -3.0f64..3.0, a in 0.0f64..1.0,
            j in -1.0f64..1.0, regime in 1u8..=3,
        ) {
            let m = build_model(&langevin_spec()).unwrap();
            let r = match regime { 1 => Regime::One, 2 => Regime::Two { gamma: 0.7 }, _ => Regime::Three };
            let dchi = [j];
            let l = |z: f64| velocity_kernel(r, &m, &[0.3], &[y], &[z], Some(&dchi)).unwrap()[0];
            let lhs = l(a * z1 + (1.0 - a) * z2);
            let rhs = a * l(z1) + (1.0 - a) * l(z2);
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn coefficients_are_periodic(y in 0.0f64..1.0, x in -2.0f64..2.0) {
            let m = build_model(&langevin_spec()).unwrap();
            let v = m.coefficients.eval(&[x], &[y]);
            let w = m.coefficients.eval(&[x], &[y + 1.0]);
            prop_assert!((v.b[0] - w.b[0]).abs() <= 1e-10);
            prop_assert!((v.c[0] - w.c[0]).abs() <= 1e-10);
            prop_assert!((v.sigma[0] - w.sigma[0]).abs() <= 1e-10);
        }

        #[test]
        fn classification_partitions_exponents(a in 0.01f64..5.0, kappa in 0.1f64..10.0) {
            let r = classify_regime(&Scaling { a, kappa });
            let expected = if a > 1.0 { 1 } else if a == 1.0 { 2 } else { 3 };
            prop_assert_eq!(r.index(), expected);
        }
    }
}
