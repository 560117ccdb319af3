//! Homogenization of the fast dynamics with the slow state frozen.
//!
//! For each `x`: the invariant density `μ(·|x)` of `L¹ = b·∇ + ½σσᵀ:∇∇`, the
//! cell solution `L¹χ = −b` with `∫χ dμ = 0`, and
//!
//! ```text
//! r(x) = ∫ (I + ∂χ/∂y) c dμ,    q(x) = ∫ (I + ∂χ/∂y) σσᵀ (I + ∂χ/∂y)ᵀ dμ.
//! ```

use std::collections::HashMap;
use std::io::{self, Write};
use std::sync::{Arc, RwLock};

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::csv;
use crate::expr::{Compiled, Expr};
use crate::model::{MultiscaleModel, Regime};
use crate::torus::{self, ControlInput, TorusError, TorusGrid};

#[derive(Debug, thiserror::Error)]
pub enum HomogenizeError {
    #[error(transparent)]
    Torus(#[from] TorusError),
    #[error("centering condition fails at x={x:?}: |∫ b dμ| = {residual:e} > {tolerance:e}")]
    NotCentered { x: Vec<f64>, residual: f64, tolerance: f64 },
    #[error("effective diffusivity is not positive definite at x={x:?} (min eigenvalue {min_eig:e}); grid too coarse")]
    NotSpd { x: Vec<f64>, min_eig: f64 },
    #[error("x={x:?} lies outside the homogenization lattice [{lo:?}, {hi:?}]")]
    OutsideLattice { x: Vec<f64>, lo: Vec<f64>, hi: Vec<f64> },
    #[error("{0}")]
    Invalid(String),
}

/// Grid resolution of the cell problems.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSettings {
    pub n: usize,
    pub order: usize,
}

impl CellSettings {
    pub fn default_for(d: usize) -> Self {
        CellSettings {
            n: if d == 1 { 256 } else { 32 },
            order: torus::DEFAULT_ORDER,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CenteringReport {
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Fast-variable solution at one frozen `x`.
#[derive(Debug, Clone)]
pub struct CellSolution {
    pub grid: TorusGrid,
    pub order: usize,
    /// Density of `μ(·|x)` with respect to the normalized torus measure.
    pub mu: Vec<f64>,
    /// `chi[l]` is the component `χ_l`.
    pub chi: Vec<Vec<f64>>,
    /// `dchi[l * d + k] = ∂χ_l/∂y_k`.
    pub dchi: Vec<Vec<f64>>,
    /// `‖L¹χ + b‖∞`.
    pub residual: f64,
    pub centering: CenteringReport,
}

/// Homogenized data at one `x`.
#[derive(Debug, Clone)]
pub struct HomogenizedPoint {
    pub x: Vec<f64>,
    pub cell: CellSolution,
    pub r: Vec<f64>,
    /// Row-major `d × d`, symmetric positive definite.
    pub q: Vec<f64>,
}

impl HomogenizedPoint {
    pub fn dim(&self) -> usize {
        self.r.len()
    }

    /// `∂χ/∂y` at an arbitrary fast point by periodic interpolation of the nodal values.
    pub fn dchi_at(&self, y: &[f64]) -> Vec<f64> {
        self.cell
            .dchi
            .iter()
            .map(|f| interpolate(&self.cell.grid, f, y))
            .collect()
    }
}

/// Periodic cubic Lagrange interpolation (tensor product in 2-D).
pub fn interpolate(grid: &TorusGrid, values: &[f64], y: &[f64]) -> f64 {
    let n = grid.n();
    let weights = |k: usize| -> ([usize; 4], [f64; 4]) {
        let s = y[k] / grid.spacing(k);
        let base = s.floor();
        let t = s - base;
        let i0 = (base as i64 - 1).rem_euclid(n as i64) as usize;
        let idx = [i0, (i0 + 1) % n, (i0 + 2) % n, (i0 + 3) % n];
        let w = [
            -t * (t - 1.0) * (t - 2.0) / 6.0,
            (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
            -(t + 1.0) * t * (t - 2.0) / 2.0,
            (t + 1.0) * t * (t - 1.0) / 6.0,
        ];
        (idx, w)
    };
    let (i1, w1) = weights(0);
    if grid.dim() == 1 {
        return (0..4).map(|a| w1[a] * values[i1[a]]).sum();
    }
    let (i2, w2) = weights(1);
    let mut s = 0.0;
    for b in 0..4 {
        for a in 0..4 {
            s += w1[a] * w2[b] * values[grid.flat([i1[a], i2[b]])];
        }
    }
    s
}

fn grid_for(model: &MultiscaleModel, settings: &CellSettings) -> Result<TorusGrid, HomogenizeError> {
    let d = model.dim();
    if d > 2 {
        return Err(TorusError::UnsupportedDimension(d).into());
    }
    Ok(TorusGrid::with_period(
        d,
        settings.n,
        model.coefficients.period().to_vec(),
    )?)
}

fn b_fields(model: &MultiscaleModel, x: &[f64], grid: &TorusGrid) -> Vec<Vec<f64>> {
    let d = model.dim();
    (0..d)
        .map(|l| grid.sample(|y| model.coefficients.eval(x, y).b[l]))
        .collect()
}

fn weighted_mean(f: &[f64], mu: &[f64]) -> f64 {
    torus::quadrature(&f.iter().zip(mu).map(|(a, b)| a * b).collect::<Vec<_>>())
}

fn centering_of(b: &[Vec<f64>], mu: &[f64]) -> CenteringReport {
    let residual = b.iter().map(|bl| weighted_mean(bl, mu).powi(2)).sum::<f64>().sqrt();
    let bmax = b.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    let tolerance = 1e-7 * (1.0 + bmax);
    CenteringReport {
        residual,
        tolerance,
        passed: residual <= tolerance,
    }
}

/// `‖∫ b(x, y) μ(dy|x)‖` with `μ` from the discrete invariant density.
pub fn check_centering(
    model: &MultiscaleModel,
    x: &[f64],
    settings: &CellSettings,
) -> Result<CenteringReport, HomogenizeError> {
    let grid = grid_for(model, settings)?;
    let gen = torus::assemble_generator(Regime::One, model, x, ControlInput::Zero, &grid, settings.order)?;
    let mu = torus::stationary_density(&gen)?;
    Ok(centering_of(&b_fields(model, x, &grid), &mu))
}

pub fn solve_cell_problem(
    model: &MultiscaleModel,
    x: &[f64],
    settings: &CellSettings,
) -> Result<CellSolution, HomogenizeError> {
    let d = model.dim();
    let grid = grid_for(model, settings)?;
    let gen = torus::assemble_generator(Regime::One, model, x, ControlInput::Zero, &grid, settings.order)?;
    let mu = torus::stationary_density(&gen)?;
    let b = b_fields(model, x, &grid);
    let centering = centering_of(&b, &mu);
    if !centering.passed {
        return Err(HomogenizeError::NotCentered {
            x: x.to_vec(),
            residual: centering.residual,
            tolerance: centering.tolerance,
        });
    }
    let all_zero = b.iter().flatten().all(|v| *v == 0.0);
    let (chi, residual) = if all_zero {
        (vec![vec![0.0; grid.len()]; d], 0.0)
    } else {
        let solver = gen.centered_solver(&mu)?;
        let op = gen.assemble();
        let mut residual = 0.0f64;
        let chi: Vec<Vec<f64>> = b
            .iter()
            .map(|bl| {
                let rhs: Vec<f64> = bl.iter().map(|v| -v).collect();
                let c = solver.solve(&rhs);
                let lc = op.apply(&c);
                for (a, v) in lc.iter().zip(bl) {
                    residual = residual.max((a + v).abs());
                }
                c
            })
            .collect();
        (chi, residual)
    };
    let mut dchi = Vec::with_capacity(d * d);
    for chi_l in &chi {
        for k in 0..d {
            dchi.push(torus::derivative(&grid, chi_l, k, settings.order));
        }
    }
    Ok(CellSolution {
        grid,
        order: settings.order,
        mu,
        chi,
        dchi,
        residual,
        centering,
    })
}

/// Smallest eigenvalue of a symmetric matrix given row-major.
pub fn min_eigenvalue(q: &[f64], d: usize) -> f64 {
    if d == 1 {
        return q[0];
    }
    DMatrix::from_row_slice(d, d, q).symmetric_eigenvalues().min()
}

pub fn effective_coefficients(
    model: &MultiscaleModel,
    x: &[f64],
    settings: &CellSettings,
) -> Result<HomogenizedPoint, HomogenizeError> {
    let cell = solve_cell_problem(model, x, settings)?;
    coefficients_from_cell(model, x, cell)
}

fn coefficients_from_cell(
    model: &MultiscaleModel,
    x: &[f64],
    cell: CellSolution,
) -> Result<HomogenizedPoint, HomogenizeError> {
    let d = model.dim();
    let grid = &cell.grid;
    let len = grid.len();
    // Integrands per node: (I + χ′) c and (I + χ′) σσᵀ (I + χ′)ᵀ.
    let mut r_int = vec![vec![0.0; len]; d];
    let mut q_int = vec![vec![0.0; len]; d * d];
    for j in 0..len {
        let y = grid.node(j);
        let v = model.coefficients.eval(x, &y[..d]);
        let mut m = DMatrix::<f64>::identity(d, d);
        for l in 0..d {
            for k in 0..d {
                m[(l, k)] += cell.dchi[l * d + k][j];
            }
        }
        let sigma = DMatrix::from_fn(d, d, |i, k| v.sigma[i * d + k]);
        let c = nalgebra::DVector::from_column_slice(&v.c[..d]);
        let rc = &m * c;
        let ms = &m * sigma;
        let qq = &ms * ms.transpose();
        for l in 0..d {
            r_int[l][j] = rc[l] * cell.mu[j];
            for k in 0..d {
                q_int[l * d + k][j] = qq[(l, k)] * cell.mu[j];
            }
        }
    }
    let r: Vec<f64> = r_int.iter().map(|f| torus::quadrature(f)).collect();
    let mut q: Vec<f64> = q_int.iter().map(|f| torus::quadrature(f)).collect();
    for l in 0..d {
        for k in l + 1..d {
            let s = 0.5 * (q[l * d + k] + q[k * d + l]);
            q[l * d + k] = s;
            q[k * d + l] = s;
        }
    }
    let min_eig = min_eigenvalue(&q, d);
    if !(min_eig > 0.0) {
        return Err(HomogenizeError::NotSpd { x: x.to_vec(), min_eig });
    }
    Ok(HomogenizedPoint {
        x: x.to_vec(),
        cell,
        r,
        q,
    })
}

/// Closed-form data for separable Langevin models `b = −∇Q`, `Q = Σ Q_i(y_i)`, `σ = √(2D) I`.
#[derive(Debug, Clone)]
pub struct SeparableHomogenization {
    pub z: Vec<f64>,
    pub zhat: Vec<f64>,
    /// Diagonal of `Θ = diag(1/(Z_i Ẑ_i))`.
    pub theta: Vec<f64>,
    /// Diagonal of `q = 2DΘ`.
    pub q: Vec<f64>,
    grad_v: Option<Vec<Compiled>>,
}

impl SeparableHomogenization {
    /// `r(x) = −Θ∇V(x)`, if a potential gradient was supplied.
    pub fn r(&self, x: &[f64]) -> Option<Vec<f64>> {
        let g = self.grad_v.as_ref()?;
        Some(g.iter().zip(&self.theta).map(|(gi, t)| -t * gi.eval(x)).collect())
    }
}

/// `q_i` from `Z_i = ∫e^{−Q_i/D}` and `Ẑ_i = ∫e^{Q_i/D}` by rectangle-rule quadrature.
///
/// Each `Q_i` may use `y` or `y_<k>` for its own coordinate; `grad_v` entries use `x_1..x_d`.
pub fn separable_effective_diffusivity(
    q_parts: &[Expr],
    diffusivity: f64,
    periods: &[f64],
    n: usize,
    grad_v: Option<&[Expr]>,
) -> Result<SeparableHomogenization, HomogenizeError> {
    if !(diffusivity > 0.0) {
        return Err(HomogenizeError::Invalid(format!(
            "diffusivity must be positive, got {diffusivity}"
        )));
    }
    if periods.len() != q_parts.len() {
        return Err(HomogenizeError::Invalid("one period per separable part".into()));
    }
    let d = q_parts.len();
    let (mut z, mut zhat, mut theta, mut q) = (vec![], vec![], vec![], vec![]);
    for (qi, &period) in q_parts.iter().zip(periods) {
        let f = Compiled::new(qi, &|name| (name == "y" || name.starts_with("y_")).then_some(0))
            .map_err(|e| HomogenizeError::Invalid(format!("separable part: {e}")))?;
        let g = TorusGrid::with_period(1, n, vec![period])?;
        let vals = g.sample(|y| f.eval(y));
        let zi = torus::quadrature(&vals.iter().map(|v| (-v / diffusivity).exp()).collect::<Vec<_>>());
        let zh = torus::quadrature(&vals.iter().map(|v| (v / diffusivity).exp()).collect::<Vec<_>>());
        z.push(zi);
        zhat.push(zh);
        theta.push(1.0 / (zi * zh));
        q.push(2.0 * diffusivity / (zi * zh));
    }
    let grad_v = match grad_v {
        None => None,
        Some(g) => {
            if g.len() != d {
                return Err(HomogenizeError::Invalid("grad V needs one entry per dimension".into()));
            }
            let resolve = |name: &str| -> Option<usize> {
                match (d, name) {
                    (1, "x") => Some(0),
                    _ => name
                        .strip_prefix("x_")
                        .and_then(|k| k.parse::<usize>().ok())
                        .filter(|k| (1..=d).contains(k))
                        .map(|k| k - 1),
                }
            };
            Some(
                g.iter()
                    .map(|e| Compiled::new(e, &resolve))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| HomogenizeError::Invalid(format!("grad V: {e}")))?,
            )
        }
    };
    Ok(SeparableHomogenization {
        z,
        zhat,
        theta,
        q,
        grad_v,
    })
}

/// Rectangular lattice of slow states.
#[derive(Debug, Clone, PartialEq)]
pub struct XLattice {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub count: Vec<usize>,
}

impl XLattice {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, count: Vec<usize>) -> Result<Self, HomogenizeError> {
        if lo.len() != hi.len() || lo.len() != count.len() || lo.is_empty() || lo.len() > 2 {
            return Err(HomogenizeError::Invalid(
                "x-lattice needs matching lo/hi/count of length 1 or 2".into(),
            ));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) || count.iter().any(|c| *c < 2) {
            return Err(HomogenizeError::Invalid(
                "x-lattice needs lo < hi and at least 2 points per direction".into(),
            ));
        }
        Ok(XLattice { lo, hi, count })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn step(&self, k: usize) -> f64 {
        (self.hi[k] - self.lo[k]) / (self.count[k] - 1) as f64
    }

    pub fn point(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter()
            .enumerate()
            .map(|(k, &i)| self.lo[k] + i as f64 * self.step(k))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.count.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![];
        for flat in 0..self.len() {
            let mut r = flat;
            out.push(
                self.count
                    .iter()
                    .map(|c| {
                        let i = r % c;
                        r /= c;
                        i
                    })
                    .collect(),
            );
        }
        out
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .enumerate()
            .all(|(k, v)| *v >= self.lo[k] - 1e-12 && *v <= self.hi[k] + 1e-12)
    }

    /// Corner indices and multilinear weights of the cell containing the clamped `x`.
    pub fn stencil(&self, x: &[f64]) -> Vec<(Vec<usize>, f64)> {
        let d = self.dim();
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for k in 0..d {
            let s = ((x[k] - self.lo[k]) / self.step(k)).clamp(0.0, (self.count[k] - 1) as f64);
            let i = (s.floor() as usize).min(self.count[k] - 2);
            base[k] = i;
            frac[k] = s - i as f64;
        }
        let mut out = Vec::with_capacity(1 << d);
        for corner in 0..(1usize << d) {
            let mut idx = base.clone();
            let mut w = 1.0;
            for k in 0..d {
                if corner >> k & 1 == 1 {
                    idx[k] += 1;
                    w *= frac[k];
                } else {
                    w *= 1.0 - frac[k];
                }
            }
            if w != 0.0 {
                out.push((idx, w));
            }
        }
        out
    }
}

/// Memoized homogenization on an x-lattice with multilinear interpolation between nodes.
///
/// Interpolated `r, q` carry an O(Δx²) error for smooth `x`-dependence.
#[derive(Debug)]
pub struct HomogenizedTable {
    model: Arc<MultiscaleModel>,
    settings: CellSettings,
    lattice: XLattice,
    memo: RwLock<HashMap<Vec<usize>, Arc<HomogenizedPoint>>>,
}

impl HomogenizedTable {
    pub fn new(
        model: Arc<MultiscaleModel>,
        settings: CellSettings,
        lattice: XLattice,
    ) -> Result<Self, HomogenizeError> {
        if lattice.dim() != model.dim() {
            return Err(HomogenizeError::Invalid(format!(
                "x-lattice has dimension {}, model has {}",
                lattice.dim(),
                model.dim()
            )));
        }
        Ok(HomogenizedTable {
            model,
            settings,
            lattice,
            memo: RwLock::new(HashMap::new()),
        })
    }

    pub fn model(&self) -> &MultiscaleModel {
        &self.model
    }

    pub fn lattice(&self) -> &XLattice {
        &self.lattice
    }

    pub fn settings(&self) -> &CellSettings {
        &self.settings
    }

    pub fn node(&self, idx: &[usize]) -> Result<Arc<HomogenizedPoint>, HomogenizeError> {
        if let Some(p) = self.memo.read().expect("memo lock").get(idx) {
            return Ok(p.clone());
        }
        let x = self.lattice.point(idx);
        let p = Arc::new(effective_coefficients(&self.model, &x, &self.settings)?);
        self.memo.write().expect("memo lock").insert(idx.to_vec(), p.clone());
        Ok(p)
    }

    /// Fill every lattice node, in parallel.
    pub fn precompute(&self) -> Result<(), HomogenizeError> {
        self.lattice
            .indices()
            .par_iter()
            .map(|idx| self.node(idx).map(|_| ()))
            .collect()
    }

    /// Corner data and weights around `x`, which is clamped to the lattice hull.
    pub fn corners(&self, x: &[f64]) -> Result<Vec<(Arc<HomogenizedPoint>, f64)>, HomogenizeError> {
        self.lattice
            .stencil(x)
            .into_iter()
            .map(|(idx, w)| self.node(&idx).map(|p| (p, w)))
            .collect()
    }

    fn check_hull(&self, x: &[f64]) -> Result<(), HomogenizeError> {
        if self.lattice.contains(x) {
            Ok(())
        } else {
            Err(HomogenizeError::OutsideLattice {
                x: x.to_vec(),
                lo: self.lattice.lo.clone(),
                hi: self.lattice.hi.clone(),
            })
        }
    }

    /// Interpolated `(r(x), q(x))`; `x` must lie in the lattice hull.
    pub fn effective_at(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>), HomogenizeError> {
        self.check_hull(x)?;
        let d = self.model.dim();
        let mut r = vec![0.0; d];
        let mut q = vec![0.0; d * d];
        for (p, w) in self.corners(x)? {
            for (a, b) in r.iter_mut().zip(&p.r) {
                *a += w * b;
            }
            for (a, b) in q.iter_mut().zip(&p.q) {
                *a += w * b;
            }
        }
        Ok((r, q))
    }
}

/// `x, r, q` rows with 17 significant digits.
pub fn write_csv<W: Write>(w: &mut W, points: &[HomogenizedPoint]) -> io::Result<()> {
    let d = points.first().map_or(1, |p| p.dim());
    let mut header: Vec<String> = (1..=d).map(|k| format!("x_{k}")).collect();
    header.extend((1..=d).map(|k| format!("r_{k}")));
    for l in 1..=d {
        for k in 1..=d {
            header.push(format!("q_{l}{k}"));
        }
    }
    csv::write_row(w, &header)?;
    for p in points {
        let row: Vec<String> = p.x.iter().chain(&p.r).chain(&p.q).map(|v| csv::num(*v)).collect();
        csv::write_row(w, &row)?;
    }
    Ok(())
}
