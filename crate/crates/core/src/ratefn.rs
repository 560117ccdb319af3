//! Local rate functions of the three regimes and the action functional.
//!
//! * Regime 1: `L₁(x, β) = ½ (β − r)ᵀ q⁻¹ (β − r)` from homogenized data.
//! * Regime 2 (d = 1): `L₂(x, β) = sup_ζ [ζβ − H(ζ)]`, where `H(ζ) = γΛ(ζ)` and
//!   `Λ` is the principal eigenvalue of the twisted operator obtained from the
//!   ergodic HJB by `W̄ = −γ log φ`, `φ = e^{ζy/γ} ψ`.
//! * Regime 3 (d = 1): pointwise minimization over the fast velocity
//!   `w(y) = c + σv` under `∫ β/w dy = 1`.

use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::csv;
use crate::homogenize::{HomogenizeError, HomogenizedPoint, HomogenizedTable};
use crate::model::{MultiscaleModel, Regime};
use crate::path::DiscretePath;
use crate::torus::{self, stencil, Generator, TorusError, TorusGrid};

#[derive(Debug, thiserror::Error)]
pub enum RateError {
    #[error(transparent)]
    Homogenize(#[from] HomogenizeError),
    #[error(transparent)]
    Torus(#[from] TorusError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("effective diffusivity is not positive definite")]
    NotSpd,
    #[error("no maximizer of ζβ − H(ζ) found with |ζ| ≤ {z_max}")]
    NoBracket { z_max: f64 },
    #[error("the Regime-3 local rate is undefined at β = 0")]
    BetaZero,
    #[error("Regime-3 multiplier root could not be bracketed")]
    RootBracket,
    #[error("{0}")]
    Unsupported(String),
}

/// Dual variable attached to a local-rate value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dual {
    None,
    /// Regime-2 slope `ζ_β`.
    Zeta(f64),
    /// Regime-3 multiplier `θ`.
    Theta(f64),
}

impl Dual {
    pub fn value(&self) -> Option<f64> {
        match self {
            Dual::None => None,
            Dual::Zeta(v) | Dual::Theta(v) => Some(*v),
        }
    }
}

/// Data describing the control that attains a local rate.
#[derive(Debug, Clone)]
pub enum RateControl {
    /// `ū(y) = σᵀ(I + ∂χ/∂y)ᵀ a` with `a = q⁻¹(β − r)`.
    Regime1 {
        a: Vec<f64>,
    },
    Regime2(Arc<BellmanSolution>),
    /// Optimal fast velocity `w*` and control `(w* − c)/σ` on a grid.
    Regime3 {
        grid: TorusGrid,
        velocity: Vec<f64>,
        control: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct LocalRateResult {
    pub regime: Regime,
    pub x: Vec<f64>,
    pub beta: Vec<f64>,
    pub value: f64,
    pub dual: Dual,
    pub control: RateControl,
}

/// Evaluator of `L(x, β)`.
pub trait LocalRate: Sync {
    fn dim(&self) -> usize;
    fn rate(&self, x: &[f64], beta: &[f64]) -> Result<f64, RateError>;
}

/// `½ (β − r)ᵀ q⁻¹ (β − r)` and `q⁻¹(β − r)` by Cholesky.
pub fn quadratic_rate(r: &[f64], q: &[f64], beta: &[f64]) -> Result<(f64, Vec<f64>), RateError> {
    let d = r.len();
    if beta.len() != d || q.len() != d * d {
        return Err(RateError::Dimension(format!(
            "β has {} components, r has {d}",
            beta.len()
        )));
    }
    let chol = DMatrix::from_row_slice(d, d, q).cholesky().ok_or(RateError::NotSpd)?;
    let dev = DVector::from_iterator(d, beta.iter().zip(r).map(|(b, r)| b - r));
    let a = chol.solve(&dev);
    let value = 0.5 * dev.dot(&a);
    Ok((value.max(0.0), a.as_slice().to_vec()))
}

pub fn local_rate_r1(hom: &HomogenizedPoint, beta: &[f64]) -> Result<LocalRateResult, RateError> {
    let (value, a) = quadratic_rate(&hom.r, &hom.q, beta)?;
    Ok(LocalRateResult {
        regime: Regime::One,
        x: hom.x.clone(),
        beta: beta.to_vec(),
        value,
        dual: Dual::None,
        control: RateControl::Regime1 { a },
    })
}

/// Regime-1 rate with `r, q` interpolated from a memoized lattice.
pub struct Regime1Rate {
    pub table: Arc<HomogenizedTable>,
}

impl LocalRate for Regime1Rate {
    fn dim(&self) -> usize {
        self.table.model().dim()
    }

    fn rate(&self, x: &[f64], beta: &[f64]) -> Result<f64, RateError> {
        let (r, q) = self.table.effective_at(x)?;
        Ok(quadratic_rate(&r, &q, beta)?.0)
    }
}

/// Discretization of the Regime-2 cell operators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct R2Settings {
    pub n: usize,
    pub order: usize,
    /// Largest `|ζ|` searched for the maximizer.
    pub z_max: f64,
}

impl Default for R2Settings {
    fn default() -> Self {
        R2Settings {
            n: 256,
            order: torus::DEFAULT_ORDER,
            z_max: 50.0,
        }
    }
}

/// Solution of the ergodic HJB at slope `ζ` for frozen `x`.
#[derive(Debug, Clone)]
pub struct BellmanSolution {
    pub x: f64,
    pub zeta: f64,
    pub gamma: f64,
    pub grid: TorusGrid,
    /// Positive periodic factor `ψ` of `φ = e^{ζy/γ}ψ`, normalized to max 1.
    pub psi: Vec<f64>,
    /// `ψ′/ψ` at the nodes.
    pub dlog_psi: Vec<f64>,
    /// Principal eigenvalue `Λ` of the twisted operator.
    pub lambda: f64,
    /// `L̃(ζ) = −γΛ`.
    pub htilde: f64,
    /// `H(ζ) = −L̃(ζ)`.
    pub h: f64,
    /// `‖HJB residual‖∞` of the discrete solution.
    pub residual: f64,
    /// Optimal control `ū = −σ W̄′` at the nodes.
    pub control: Vec<f64>,
}

impl BellmanSolution {
    /// Periodic part `−γ log ψ` of `W̄`; the full value adds `−ζ y`.
    pub fn wbar_periodic(&self) -> Vec<f64> {
        self.psi.iter().map(|p| -self.gamma * p.ln()).collect()
    }

    /// `W̄′(y) = −ζ − γ ψ′/ψ`.
    pub fn grad_wbar_at(&self, y: f64) -> f64 {
        -self.zeta - self.gamma * crate::homogenize::interpolate(&self.grid, &self.dlog_psi, &[y])
    }

    pub fn control_at(&self, y: f64) -> f64 {
        crate::homogenize::interpolate(&self.grid, &self.control, &[y])
    }
}

fn require_1d(model: &MultiscaleModel, what: &str) -> Result<(), RateError> {
    if model.dim() != 1 {
        return Err(RateError::Unsupported(format!(
            "{what} is implemented for d = 1 only (model has d = {})",
            model.dim()
        )));
    }
    Ok(())
}

fn require_gamma(model: &MultiscaleModel) -> Result<f64, RateError> {
    model.gamma().ok_or_else(|| {
        RateError::Unsupported(format!(
            "Regime-2 quantities need a = 1 (model is in Regime {})",
            model.regime()
        ))
    })
}

/// Nodal `γb + c`, `σ` at slow state `x`.
fn r2_fields(model: &MultiscaleModel, gamma: f64, x: f64, grid: &TorusGrid) -> (Vec<f64>, Vec<f64>) {
    let mut drift = Vec::with_capacity(grid.len());
    let mut sigma = Vec::with_capacity(grid.len());
    for j in 0..grid.len() {
        let v = model.coefficients.eval(&[x], &grid.node(j)[..1]);
        drift.push(gamma * v.b[0] + v.c[0]);
        sigma.push(v.sigma[0]);
    }
    (drift, sigma)
}

struct R2Cell {
    gamma: f64,
    x: f64,
    grid: TorusGrid,
    order: usize,
    drift: Vec<f64>,
    sigma: Vec<f64>,
}

impl R2Cell {
    fn new(model: &MultiscaleModel, gamma: f64, x: f64, settings: &R2Settings) -> Result<Self, RateError> {
        require_1d(model, "the Regime-2 local rate")?;
        let grid = TorusGrid::with_period(1, settings.n, model.coefficients.period().to_vec())?;
        let (drift, sigma) = r2_fields(model, gamma, x, &grid);
        Ok(R2Cell {
            gamma,
            x,
            grid,
            order: settings.order,
            drift,
            sigma,
        })
    }

    /// Twisted operator for `φ = e^{ky}ψ`, `k = ζ/γ`.
    fn generator(&self, zeta: f64) -> Result<(Generator, f64), RateError> {
        let g = self.gamma;
        let k = zeta / g;
        let n = self.grid.len();
        let mut drift = Vec::with_capacity(n);
        let mut diff = Vec::with_capacity(n);
        let mut pot = Vec::with_capacity(n);
        for j in 0..n {
            let (v, s2) = (self.drift[j], self.sigma[j] * self.sigma[j]);
            drift.push(v + g * s2 * k);
            diff.push(0.5 * g * s2);
            pot.push(v * k + 0.5 * g * s2 * k * k);
        }
        Ok((Generator::new(self.grid.clone(), self.order, drift, diff, pot)?, k))
    }

    fn solve(&self, zeta: f64) -> Result<BellmanSolution, RateError> {
        let g = self.gamma;
        let n = self.grid.len();
        let (gen, _) = self.generator(zeta)?;
        let (lambda, psi) = torus::principal_eigenpair(&gen)?;
        let htilde = -g * lambda;
        let h = self.grid.spacing(0);
        let mut d1 = vec![0.0; n];
        let mut d2 = vec![0.0; n];
        stencil::apply_periodic(stencil::first(self.order), &psi, 1.0 / h, &mut d1);
        stencil::apply_periodic(stencil::second(self.order), &psi, 1.0 / (h * h), &mut d2);
        let mut residual = 0.0f64;
        let mut dlog_psi = Vec::with_capacity(n);
        let mut control = Vec::with_capacity(n);
        for j in 0..n {
            let lp = d1[j] / psi[j];
            let w1 = -zeta - g * lp;
            let w2 = -g * (d2[j] / psi[j] - lp * lp);
            let s2 = self.sigma[j] * self.sigma[j];
            let r = self.drift[j] * w1 + 0.5 * g * s2 * w2 - 0.5 * s2 * w1 * w1 - htilde;
            residual = residual.max(r.abs());
            dlog_psi.push(lp);
            control.push(-self.sigma[j] * w1);
        }
        Ok(BellmanSolution {
            x: self.x,
            zeta,
            gamma: g,
            grid: self.grid.clone(),
            psi,
            dlog_psi,
            lambda,
            htilde,
            h: g * lambda,
            residual,
            control,
        })
    }

    fn h(&self, zeta: f64) -> Result<f64, RateError> {
        Ok(self.solve(zeta)?.h)
    }

    /// `H′(ζ) = γ ⟨m, ∂_ζA ψ⟩ / ⟨m, ψ⟩` with `m` the left eigenvector, where
    /// `∂_ζA = σ² ∂_y + (v/γ + σ²k)` is exact for the discrete operator.
    fn dh(&self, zeta: f64) -> Result<f64, RateError> {
        let g = self.gamma;
        let k = zeta / g;
        let (gen, _) = self.generator(zeta)?;
        let (lambda, psi) = torus::principal_eigenpair(&gen)?;
        let m = torus::left_eigenvector(&gen, lambda)?;
        let n = self.grid.len();
        let mut d1 = vec![0.0; n];
        stencil::apply_periodic(stencil::first(self.order), &psi, 1.0 / self.grid.spacing(0), &mut d1);
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..n {
            let s2 = self.sigma[j] * self.sigma[j];
            num += m[j] * (s2 * d1[j] + (self.drift[j] / g + s2 * k) * psi[j]);
            den += m[j] * psi[j];
        }
        Ok(g * num / den)
    }
}

/// `L̃(ζ)` and the Bellman data at slope `ζ` for the model's own `γ`.
pub fn dual_r2(
    model: &MultiscaleModel,
    x: f64,
    zeta: f64,
    settings: &R2Settings,
) -> Result<BellmanSolution, RateError> {
    let gamma = require_gamma(model)?;
    R2Cell::new(model, gamma, x, settings)?.solve(zeta)
}

/// `L₂(x, β)` for the model's `γ`.
pub fn local_rate_r2(
    model: &MultiscaleModel,
    x: f64,
    beta: f64,
    settings: &R2Settings,
) -> Result<LocalRateResult, RateError> {
    let gamma = require_gamma(model)?;
    local_rate_r2_gamma(model, gamma, x, beta, settings)
}

/// `L₂(x, β)` with an explicit `γ` (the coefficients are taken from `model`).
pub fn local_rate_r2_gamma(
    model: &MultiscaleModel,
    gamma: f64,
    x: f64,
    beta: f64,
    settings: &R2Settings,
) -> Result<LocalRateResult, RateError> {
    if !(gamma > 0.0) {
        return Err(RateError::Unsupported(format!("γ must be positive, got {gamma}")));
    }
    let cell = R2Cell::new(model, gamma, x, settings)?;
    let f = |z: f64| -> Result<f64, RateError> { Ok(z * beta - cell.h(z)?) };
    let z_max = settings.z_max;

    // Bracket the maximizer of the concave objective by doubling steps from ζ = 0.
    let slope0 = beta - cell.dh(0.0)?;
    let dir: f64 = if slope0 >= 0.0 { 1.0 } else { -1.0 };
    let mut pts = vec![(0.0, f(0.0)?)];
    let mut step: f64 = 0.25;
    loop {
        let z = dir * step;
        if z.abs() > z_max {
            return Err(RateError::NoBracket { z_max });
        }
        let fz = f(z)?;
        let prev = pts.last().expect("non-empty").1;
        pts.push((z, fz));
        if fz < prev {
            break;
        }
        step *= 2.0;
    }
    let m = pts.len();
    let (mut a, mut b) = if m >= 3 {
        (pts[m - 3].0, pts[m - 1].0)
    } else {
        // The first step already descends: the maximizer lies between 0 and it.
        (pts[0].0, pts[1].0)
    };
    if a > b {
        std::mem::swap(&mut a, &mut b);
    }

    // Golden section down to a coarse width.
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c)?, f(d)?);
    while b - a > 1e-3 * (1.0 + a.abs().max(b.abs())) {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d)?;
        }
    }

    // Safeguarded Newton on g(ζ) = β − H′(ζ).
    let mut z = 0.5 * (a + b);
    for _ in 0..40 {
        let g = beta - cell.dh(z)?;
        if g > 0.0 {
            a = a.max(z);
        } else {
            b = b.min(z);
        }
        if g.abs() <= 1e-8 * (1.0 + beta.abs()) {
            break;
        }
        let eta = 1e-4 * (1.0 + z.abs());
        let h2 = (cell.dh(z + eta)? - cell.dh(z - eta)?) / (2.0 * eta);
        let mut next = if h2 > 0.0 { z + g / h2 } else { f64::NAN };
        if !(next > a && next < b) {
            next = 0.5 * (a + b);
        }
        let done = (next - z).abs() <= 1e-12 * (1.0 + z.abs());
        z = next;
        if done || b - a <= 1e-12 * (1.0 + z.abs()) {
            break;
        }
    }
    let sol = cell.solve(z)?;
    let value = (z * beta - sol.h).max(0.0);
    Ok(LocalRateResult {
        regime: Regime::Two { gamma },
        x: vec![x],
        beta: vec![beta],
        value,
        dual: Dual::Zeta(z),
        control: RateControl::Regime2(Arc::new(sol)),
    })
}

pub struct Regime2Rate {
    pub model: Arc<MultiscaleModel>,
    pub gamma: f64,
    pub settings: R2Settings,
}

impl LocalRate for Regime2Rate {
    fn dim(&self) -> usize {
        1
    }

    fn rate(&self, x: &[f64], beta: &[f64]) -> Result<f64, RateError> {
        Ok(local_rate_r2_gamma(&self.model, self.gamma, x[0], beta[0], &self.settings)?.value)
    }
}

/// Fast-velocity grid for Regime 3.
pub const R3_DEFAULT_N: usize = 1024;

/// `L₃(x, β)` for `d = 1`, evaluated on an `n`-point grid of the fast period.
pub fn local_rate_r3(model: &MultiscaleModel, x: f64, beta: f64, n: usize) -> Result<LocalRateResult, RateError> {
    require_1d(model, "the Regime-3 local rate")?;
    if beta == 0.0 {
        return Err(RateError::BetaZero);
    }
    if !beta.is_finite() {
        return Err(RateError::Dimension(format!("β must be finite, got {beta}")));
    }
    let grid = TorusGrid::with_period(1, n, model.coefficients.period().to_vec())?;
    // Reflection (β, c) → (−β, −c) reduces to β > 0.
    let s = beta.signum();
    let b = beta.abs();
    let mut c = Vec::with_capacity(n);
    let mut sig = Vec::with_capacity(n);
    for j in 0..n {
        let v = model.coefficients.eval(&[x], &grid.node(j)[..1]);
        c.push(s * v.c[0]);
        sig.push(v.sigma[0]);
    }
    let (theta, w) = r3_multiplier(&c, &sig, b)?;
    let integrand: Vec<f64> = (0..n)
        .map(|j| 0.5 * ((w[j] - c[j]) / sig[j]).powi(2) * b / w[j])
        .collect();
    let value = torus::quadrature(&integrand);
    let velocity: Vec<f64> = w.iter().map(|v| s * v).collect();
    let control: Vec<f64> = (0..n).map(|j| s * (w[j] - c[j]) / sig[j]).collect();
    Ok(LocalRateResult {
        regime: Regime::Three,
        x: vec![x],
        beta: vec![beta],
        value,
        dual: Dual::Theta(theta),
        control: RateControl::Regime3 {
            grid,
            velocity,
            control,
        },
    })
}

/// Solve `mean(β / w*(θ)) = 1` with `w* = √(c² + 2σ²θ)`; `θ` may be negative
/// down to `−min c²/(2σ²)` when the uncontrolled motion is faster than `β`.
fn r3_multiplier(c: &[f64], sig: &[f64], beta: f64) -> Result<(f64, Vec<f64>), RateError> {
    let w_of = |theta: f64| -> Vec<f64> {
        c.iter()
            .zip(sig)
            .map(|(c, s)| (c * c + 2.0 * s * s * theta).max(0.0).sqrt())
            .collect()
    };
    let g = |theta: f64| -> f64 {
        let w = w_of(theta);
        torus::quadrature(&w.iter().map(|w| beta / w).collect::<Vec<_>>()) - 1.0
    };
    let theta_min = c
        .iter()
        .zip(sig)
        .map(|(c, s)| -c * c / (2.0 * s * s))
        .fold(f64::NEG_INFINITY, f64::max);
    // g is decreasing on (θ_min, ∞), with g → +∞ at θ_min.
    let mut lo = theta_min;
    let mut hi = theta_min.abs().max(1.0);
    let mut it = 0;
    while g(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
        it += 1;
        if it > 200 {
            return Err(RateError::RootBracket);
        }
    }
    // Bisection to a coarse bracket, then Newton.
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let gm = g(mid);
        if !gm.is_finite() || gm > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-6 * (1.0 + hi.abs()) {
            break;
        }
    }
    let mut theta = hi;
    for _ in 0..50 {
        let w = w_of(theta);
        let gv = torus::quadrature(&w.iter().map(|w| beta / w).collect::<Vec<_>>()) - 1.0;
        let dg = -torus::quadrature(
            &w.iter()
                .zip(sig)
                .map(|(w, s)| beta * s * s / (w * w * w))
                .collect::<Vec<_>>(),
        );
        if gv.abs() <= 1e-15 {
            break;
        }
        if gv > 0.0 {
            lo = lo.max(theta);
        } else {
            hi = hi.min(theta);
        }
        let mut next = theta - gv / dg;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        let done = (next - theta).abs() <= 1e-15 * (1.0 + theta.abs());
        theta = next;
        if done {
            break;
        }
    }
    let w = w_of(theta);
    if w.iter().any(|v| !(*v > 0.0)) {
        return Err(RateError::RootBracket);
    }
    Ok((theta, w))
}

pub struct Regime3Rate {
    pub model: Arc<MultiscaleModel>,
    pub n: usize,
}

impl LocalRate for Regime3Rate {
    fn dim(&self) -> usize {
        1
    }

    fn rate(&self, x: &[f64], beta: &[f64]) -> Result<f64, RateError> {
        Ok(local_rate_r3(&self.model, x[0], beta[0], self.n)?.value)
    }
}

/// Any closure `(x, β) → L` as a rate.
pub struct FnRate<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> LocalRate for FnRate<F>
where
    F: Fn(&[f64], &[f64]) -> Result<f64, RateError> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn rate(&self, x: &[f64], beta: &[f64]) -> Result<f64, RateError> {
        (self.f)(x, beta)
    }
}

/// Per-interval midpoint contributions `Δt · L(φ_mid, Δφ/Δt)`.
pub fn action_terms(path: &DiscretePath, rate: &dyn LocalRate) -> Result<Vec<f64>, RateError> {
    if path.dim() != rate.dim() {
        return Err(RateError::Dimension(format!(
            "path has dimension {}, rate has {}",
            path.dim(),
            rate.dim()
        )));
    }
    (0..path.intervals())
        .into_par_iter()
        .map(|k| Ok(path.dt() * rate.rate(&path.midpoint(k), &path.velocity(k))?))
        .collect()
}

/// `S(φ) = ∫ L(φ, φ̇) dt`, propagating local-rate errors.
pub fn action_checked(path: &DiscretePath, rate: &dyn LocalRate) -> Result<f64, RateError> {
    Ok(action_terms(path, rate)?.iter().sum())
}

/// `S(φ)`, or `+∞` if any interval cannot be evaluated.
pub fn action(path: &DiscretePath, rate: &dyn LocalRate) -> f64 {
    action_checked(path, rate).unwrap_or(f64::INFINITY)
}

/// `x, β, L, dual` rows with 17 significant digits.
pub fn write_csv<W: Write>(w: &mut W, rows: &[LocalRateResult]) -> io::Result<()> {
    let d = rows.first().map_or(1, |r| r.x.len());
    let mut header: Vec<String> = (1..=d).map(|k| format!("x_{k}")).collect();
    header.extend((1..=d).map(|k| format!("beta_{k}")));
    header.push("L".into());
    header.push("dual".into());
    csv::write_row(w, &header)?;
    for r in rows {
        let mut row: Vec<String> = r.x.iter().chain(&r.beta).map(|v| csv::num(*v)).collect();
        row.push(csv::num(r.value));
        row.push(r.dual.value().map_or_else(String::new, csv::num));
        csv::write_row(w, &row)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests;
