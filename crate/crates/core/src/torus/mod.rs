//! Finite-difference analysis on the fast torus.
//!
//! A [`Generator`] holds the pointwise coefficients of a second-order operator
//! `L f = v·∇f + A:∇∇f + w f`; it can be assembled at any supported stencil
//! order. One-dimensional operators are stored as cyclic band matrices,
//! two-dimensional ones densely.

pub mod banded;
pub mod stencil;

use nalgebra::{DMatrix, DVector};

use crate::model::{MultiscaleModel, Regime, MAX_DIM};
pub use banded::{CyclicBanded, CyclicLu};

/// Default stencil order of all torus discretizations.
pub const DEFAULT_ORDER: usize = 6;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TorusError {
    #[error("torus grids support d = 1 or 2, got {0}")]
    UnsupportedDimension(usize),
    #[error("grid size must be a power of two with at least {min} points, got {n}")]
    GridSize { n: usize, min: usize },
    #[error("stencil order must be one of 2, 4, 6, 8, got {0}")]
    Order(usize),
    #[error("singular discrete operator")]
    Singular,
    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("stationary density has non-positive mass {value:e} at node {index}")]
    NegativeMass { index: usize, value: f64 },
    #[error("operator is not elliptic: diffusion matrix is not positive definite at node {0}")]
    NotElliptic(usize),
    #[error("dominant eigenpair is not real and positive; discretization too coarse ({0})")]
    Eigen(String),
    #[error("coefficient is not finite at node {0}")]
    NonFinite(usize),
}

/// Uniform grid `y_j = j L / n` on the torus of side `L` in each direction.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusGrid {
    d: usize,
    n: usize,
    period: Vec<f64>,
}

impl TorusGrid {
    pub fn new(d: usize, n: usize) -> Result<Self, TorusError> {
        Self::with_period(d, n, vec![1.0; d])
    }

    pub fn with_period(d: usize, n: usize, period: Vec<f64>) -> Result<Self, TorusError> {
        if !(1..=2).contains(&d) {
            return Err(TorusError::UnsupportedDimension(d));
        }
        if !n.is_power_of_two() || n < 8 {
            return Err(TorusError::GridSize { n, min: 8 });
        }
        assert_eq!(period.len(), d);
        Ok(TorusGrid { d, n, period })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn period(&self) -> &[f64] {
        &self.period
    }

    /// Spacing in user units along direction `k`.
    pub fn spacing(&self, k: usize) -> f64 {
        self.period[k] / self.n as f64
    }

    /// Multi-index of a flat node index (direction 1 varies fastest).
    pub fn multi_index(&self, j: usize) -> [usize; 2] {
        [j % self.n, j / self.n]
    }

    pub fn flat(&self, i: [usize; 2]) -> usize {
        i[0] + self.n * i[1]
    }

    pub fn node(&self, j: usize) -> [f64; 2] {
        let m = self.multi_index(j);
        let mut y = [0.0; 2];
        for k in 0..self.d {
            y[k] = m[k] as f64 * self.spacing(k);
        }
        y
    }

    /// Sample `f` at every node.
    pub fn sample(&self, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
        (0..self.len()).map(|j| f(&self.node(j)[..self.d])).collect()
    }
}

/// Scalar grid values tied to their grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub grid: TorusGrid,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: TorusGrid, values: Vec<f64>) -> Self {
        assert_eq!(grid.len(), values.len());
        GridFunction { grid, values }
    }

    pub fn quadrature(&self) -> f64 {
        quadrature(&self.values)
    }
}

/// Rectangle rule for the normalized torus measure: the mean of the nodal values.
pub fn quadrature(values: &[f64]) -> f64 {
    // Pairwise summation keeps round-off at O(log n · eps).
    fn sum(v: &[f64]) -> f64 {
        if v.len() <= 32 {
            v.iter().sum()
        } else {
            let (a, b) = v.split_at(v.len() / 2);
            sum(a) + sum(b)
        }
    }
    sum(values) / values.len() as f64
}

/// Central-difference derivative of nodal values along direction `k`.
pub fn derivative(grid: &TorusGrid, values: &[f64], k: usize, order: usize) -> Vec<f64> {
    let w = stencil::first(order);
    let h = grid.spacing(k);
    let n = grid.n;
    let mut out = vec![0.0; values.len()];
    if grid.d == 1 {
        stencil::apply_periodic(w, values, 1.0 / h, &mut out);
        return out;
    }
    let p = w.len() / 2;
    for (j, o) in out.iter_mut().enumerate() {
        let m = grid.multi_index(j);
        let mut s = 0.0;
        for (q, wq) in w.iter().enumerate() {
            let mut mm = m;
            mm[k] = (m[k] + n + q - p) % n;
            s += wq * values[grid.flat(mm)];
        }
        *o = s / h;
    }
    out
}

/// Pointwise coefficients of `L f = v·∇f + A:∇∇f + w f` on a grid.
#[derive(Debug, Clone)]
pub struct Generator {
    grid: TorusGrid,
    order: usize,
    /// `d` entries per node.
    drift: Vec<f64>,
    /// Symmetric `d × d` per node, row-major; the full matrix `A`, not `A/2`.
    diffusion: Vec<f64>,
    /// Zero-order term per node.
    potential: Vec<f64>,
}

impl Generator {
    pub fn new(
        grid: TorusGrid,
        order: usize,
        drift: Vec<f64>,
        diffusion: Vec<f64>,
        potential: Vec<f64>,
    ) -> Result<Self, TorusError> {
        if !stencil::ORDERS.contains(&order) {
            return Err(TorusError::Order(order));
        }
        let (n, d) = (grid.len(), grid.d);
        assert_eq!(drift.len(), n * d);
        assert_eq!(diffusion.len(), n * d * d);
        assert_eq!(potential.len(), n);
        if grid.n < 4 * stencil::half_width(order) {
            return Err(TorusError::GridSize {
                n: grid.n,
                min: 4 * stencil::half_width(order),
            });
        }
        let bad = drift
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
            .map(|(i, _)| i / d)
            .or_else(|| diffusion.iter().position(|v| !v.is_finite()).map(|i| i / (d * d)))
            .or_else(|| potential.iter().position(|v| !v.is_finite()));
        if let Some(j) = bad {
            return Err(TorusError::NonFinite(j));
        }
        Ok(Generator {
            grid,
            order,
            drift,
            diffusion,
            potential,
        })
    }

    pub fn grid(&self) -> &TorusGrid {
        &self.grid
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn drift(&self) -> &[f64] {
        &self.drift
    }

    pub fn diffusion(&self) -> &[f64] {
        &self.diffusion
    }

    pub fn potential(&self) -> &[f64] {
        &self.potential
    }

    pub fn with_order(&self, order: usize) -> Result<Self, TorusError> {
        Generator::new(
            self.grid.clone(),
            order,
            self.drift.clone(),
            self.diffusion.clone(),
            self.potential.clone(),
        )
    }

    /// `L + cI`.
    pub fn shifted(&self, c: f64) -> Self {
        let mut g = self.clone();
        for w in &mut g.potential {
            *w += c;
        }
        g
    }

    /// Index of the first node where `A` fails to be positive definite.
    pub fn non_elliptic_node(&self) -> Option<usize> {
        let d = self.grid.d;
        (0..self.grid.len()).find(|&j| {
            let a = &self.diffusion[j * d * d..(j + 1) * d * d];
            if d == 1 {
                !(a[0] > 0.0)
            } else {
                !(a[0] > 0.0 && a[0] * a[3] - a[1] * a[2] > 0.0)
            }
        })
    }

    pub fn assemble(&self) -> Operator {
        if self.grid.d == 1 {
            Operator::Banded(self.assemble_1d(self.order, false))
        } else {
            Operator::Dense(self.assemble_2d(self.order, false))
        }
    }

    /// Monotone (Metzler) surrogate: second-order diffusion, upwind drift,
    /// no mixed derivatives. Used to seed eigen-solves.
    fn assemble_monotone(&self) -> Operator {
        if self.grid.d == 1 {
            Operator::Banded(self.assemble_1d(2, true))
        } else {
            Operator::Dense(self.assemble_2d(2, true))
        }
    }

    fn assemble_1d(&self, order: usize, upwind: bool) -> CyclicBanded {
        let n = self.grid.n;
        let h = self.grid.spacing(0);
        let p = stencil::half_width(order);
        let (w1, w2) = (stencil::first(order), stencil::second(order));
        let mut m = CyclicBanded::zeros(n, p);
        for i in 0..n {
            let (v, a) = (self.drift[i], self.diffusion[i]);
            let mut off = 0.0;
            for k in 0..=2 * p {
                if k == p {
                    continue;
                }
                let drift_w = if upwind { 0.0 } else { v * w1[k] / h };
                let e = drift_w + a * w2[k] / (h * h);
                m.add(i, k as isize - p as isize, e);
                off += e;
            }
            if upwind {
                let (kk, e) = if v >= 0.0 { (1, v / h) } else { (-1, -v / h) };
                m.add(i, kk, e);
                off += e;
            }
            m.add(i, 0, -off + self.potential[i]);
        }
        m
    }

    fn assemble_2d(&self, order: usize, monotone: bool) -> DMatrix<f64> {
        let g = &self.grid;
        let (n, len) = (g.n, g.len());
        let p = stencil::half_width(order);
        let (w1, w2) = (stencil::first(order), stencil::second(order));
        let h = [g.spacing(0), g.spacing(1)];
        let mut m = DMatrix::zeros(len, len);
        for j in 0..len {
            let mi = g.multi_index(j);
            let v = &self.drift[2 * j..2 * j + 2];
            let a = &self.diffusion[4 * j..4 * j + 4];
            let mut off = 0.0;
            let shift = |dir: usize, by: isize| -> usize {
                let mut mm = mi;
                mm[dir] = (mi[dir] as isize + by).rem_euclid(n as isize) as usize;
                g.flat(mm)
            };
            for dir in 0..2 {
                for k in 0..=2 * p {
                    if k == p {
                        continue;
                    }
                    let by = k as isize - p as isize;
                    let drift_w = if monotone { 0.0 } else { v[dir] * w1[k] / h[dir] };
                    let e = drift_w + a[3 * dir] * w2[k] / (h[dir] * h[dir]);
                    m[(j, shift(dir, by))] += e;
                    off += e;
                }
                if monotone {
                    let (by, e) = if v[dir] >= 0.0 {
                        (1, v[dir] / h[dir])
                    } else {
                        (-1, -v[dir] / h[dir])
                    };
                    m[(j, shift(dir, by))] += e;
                    off += e;
                }
            }
            let cross = a[1] + a[2];
            if !monotone && cross != 0.0 {
                for k in 0..=2 * p {
                    for l in 0..=2 * p {
                        let wkl = w1[k] * w1[l];
                        if wkl == 0.0 {
                            continue;
                        }
                        let mut mm = mi;
                        mm[0] = (mi[0] + n + k - p) % n;
                        mm[1] = (mi[1] + n + l - p) % n;
                        let e = cross * wkl / (h[0] * h[1]);
                        m[(j, g.flat(mm))] += e;
                        off += e;
                    }
                }
            }
            // Cross weights vanish on the diagonal, so `off` covers the whole row.
            m[(j, j)] += -off + self.potential[j];
        }
        m
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.assemble().apply(f)
    }

    /// Factor `L` with the bordering term `𝟙 (m/N)ᵀ` that pins `quadrature(χ m) = 0`.
    pub fn centered_solver(&self, weight: &[f64]) -> Result<CenteredSolver, TorusError> {
        let n = self.grid.len();
        let ones = vec![1.0; n];
        let wn: Vec<f64> = weight.iter().map(|w| w / n as f64).collect();
        let lu = self.assemble().factor(&[(ones, wn)])?;
        Ok(CenteredSolver {
            lu,
            weight: weight.to_vec(),
        })
    }
}

/// Solves `L χ = f` on the complement of the null space, with `∫ χ m = 0`.
pub struct CenteredSolver {
    lu: Factored,
    weight: Vec<f64>,
}

impl CenteredSolver {
    /// The component of `f` along `m` (which would violate solvability) is removed first.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let m = &self.weight;
        let mm: f64 = m.iter().map(|v| v * v).sum();
        let mf: f64 = m.iter().zip(rhs).map(|(a, b)| a * b).sum();
        let projected: Vec<f64> = rhs.iter().zip(m).map(|(f, w)| f - mf / mm * w).collect();
        self.lu.solve(&projected)
    }
}

/// An assembled discrete operator.
#[derive(Debug, Clone)]
pub enum Operator {
    Banded(CyclicBanded),
    Dense(DMatrix<f64>),
}

impl Operator {
    pub fn len(&self) -> usize {
        match self {
            Operator::Banded(b) => b.n(),
            Operator::Dense(m) => m.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        match self {
            Operator::Banded(b) => {
                let mut out = vec![0.0; f.len()];
                b.apply(f, &mut out);
                out
            }
            Operator::Dense(m) => (m * DVector::from_column_slice(f)).as_slice().to_vec(),
        }
    }

    pub fn transpose(&self) -> Self {
        match self {
            Operator::Banded(b) => Operator::Banded(b.transpose()),
            Operator::Dense(m) => Operator::Dense(m.transpose()),
        }
    }

    pub fn add_diagonal(&mut self, c: f64) {
        match self {
            Operator::Banded(b) => b.add_diagonal(c),
            Operator::Dense(m) => {
                for i in 0..m.nrows() {
                    m[(i, i)] += c;
                }
            }
        }
    }

    pub fn norm_inf(&self) -> f64 {
        match self {
            Operator::Banded(b) => b.norm_inf(),
            Operator::Dense(m) => m
                .row_iter()
                .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
                .fold(0.0, f64::max),
        }
    }

    /// Absolute row sums, the natural scale of round-off in `apply`.
    pub fn row_abs_sums(&self) -> Vec<f64> {
        match self {
            Operator::Banded(b) => {
                let p = b.half_width() as isize;
                (0..b.n()).map(|i| (-p..=p).map(|k| b.get(i, k).abs()).sum()).collect()
            }
            Operator::Dense(m) => m.row_iter().map(|r| r.iter().map(|v| v.abs()).sum()).collect(),
        }
    }

    pub fn is_metzler(&self) -> bool {
        match self {
            Operator::Banded(b) => {
                let p = b.half_width() as isize;
                (0..b.n()).all(|i| (-p..=p).all(|k| k == 0 || b.get(i, k) >= 0.0))
            }
            Operator::Dense(m) => (0..m.nrows()).all(|i| (0..m.ncols()).all(|j| i == j || m[(i, j)] >= 0.0)),
        }
    }

    /// Factor `self + Σ u vᵀ`.
    pub fn factor(&self, extra: &[(Vec<f64>, Vec<f64>)]) -> Result<Factored, TorusError> {
        match self {
            Operator::Banded(b) => Ok(Factored::Banded(b.factor(extra)?)),
            Operator::Dense(m) => {
                let mut m = m.clone();
                for (u, v) in extra {
                    for i in 0..m.nrows() {
                        if u[i] != 0.0 {
                            for j in 0..m.ncols() {
                                m[(i, j)] += u[i] * v[j];
                            }
                        }
                    }
                }
                let lu = m.lu();
                if !lu.is_invertible() {
                    return Err(TorusError::Singular);
                }
                Ok(Factored::Dense(lu))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Factored {
    Banded(CyclicLu),
    Dense(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Factored {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        match self {
            Factored::Banded(lu) => lu.solve(rhs),
            Factored::Dense(lu) => lu
                .solve(&DVector::from_column_slice(rhs))
                .expect("checked invertible")
                .as_slice()
                .to_vec(),
        }
    }
}

/// Control input for the Regime-2/3 operators.
#[derive(Debug, Clone)]
pub enum ControlInput<'a> {
    Zero,
    Constant(&'a [f64]),
    /// `d` entries per node.
    Field(&'a [f64]),
}

impl ControlInput<'_> {
    fn at(&self, j: usize, d: usize, out: &mut [f64]) {
        match self {
            ControlInput::Zero => out[..d].fill(0.0),
            ControlInput::Constant(z) => out[..d].copy_from_slice(&z[..d]),
            ControlInput::Field(z) => out[..d].copy_from_slice(&z[j * d..(j + 1) * d]),
        }
    }
}

/// Discretize the regime operator `L^i` at slow state `x`:
/// `L¹ = b·∇ + ½σσᵀ:∇∇`, `L² = (γb + c + σz)·∇ + (γ/2)σσᵀ:∇∇`, `L³ = (c + σz)·∇`.
pub fn assemble_generator(
    regime: Regime,
    model: &MultiscaleModel,
    x: &[f64],
    z: ControlInput<'_>,
    grid: &TorusGrid,
    order: usize,
) -> Result<Generator, TorusError> {
    let d = grid.d;
    if model.dim() != d {
        return Err(TorusError::UnsupportedDimension(model.dim()));
    }
    let len = grid.len();
    let mut drift = vec![0.0; len * d];
    let mut diffusion = vec![0.0; len * d * d];
    let mut zj = [0.0; MAX_DIM];
    for j in 0..len {
        let y = grid.node(j);
        let v = model.coefficients.eval(x, &y[..d]);
        z.at(j, d, &mut zj);
        let (bw, cw, aw) = match regime {
            Regime::One => (1.0, 0.0, 0.5),
            Regime::Two { gamma } => (gamma, 1.0, 0.5 * gamma),
            Regime::Three => (0.0, 1.0, 0.0),
        };
        let zw = if matches!(regime, Regime::One) { 0.0 } else { 1.0 };
        for i in 0..d {
            let sz: f64 = (0..d).map(|k| v.sigma[i * d + k] * zj[k]).sum();
            drift[j * d + i] = bw * v.b[i] + cw * v.c[i] + zw * sz;
            for k in 0..d {
                let ss: f64 = (0..d).map(|l| v.sigma[i * d + l] * v.sigma[k * d + l]).sum();
                diffusion[j * d * d + i * d + k] = aw * ss;
            }
        }
    }
    Generator::new(grid.clone(), order, drift, diffusion, vec![0.0; len])
}

/// Residual tolerance scale: `tol · max(1, h² ‖A‖∞)` keeps thresholds
/// meaningful when fine grids make operator entries large.
fn residual_scale(op: &Operator, grid: &TorusGrid) -> f64 {
    let h = grid.spacing(0) / grid.period[0];
    (op.norm_inf() * h * h).max(1.0)
}

/// Scaled residual accepted for the stationary density.
const DENSITY_TOL: f64 = 1e-9;

/// Invariant density `m` of an elliptic generator: `L* m = 0`, `quadrature(m) = 1`.
pub fn stationary_density(generator: &Generator) -> Result<Vec<f64>, TorusError> {
    if let Some(j) = generator.non_elliptic_node() {
        return Err(TorusError::NotElliptic(j));
    }
    let adj = generator.assemble().transpose();
    let scale = residual_scale(&adj, &generator.grid);
    let mut shifted = adj.clone();
    // Eigenvalues of L* other than 0 have negative real part.
    let tau = 1e-7;
    shifted.add_diagonal(-tau);
    let lu = shifted.factor(&[])?;
    let mut m = vec![1.0; adj.len()];
    let max_iter = 50;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..max_iter {
        let next = lu.solve(&m);
        let mass = quadrature(&next);
        if !(mass.is_finite() && mass != 0.0) {
            return Err(TorusError::Singular);
        }
        m = next.iter().map(|v| v / mass).collect();
        let r = adj.apply(&m);
        let mmax = m.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let residual = r.iter().fold(0.0f64, |a, v| a.max(v.abs())) / (mmax * scale);
        let prev = best.as_ref().map_or(f64::INFINITY, |b| b.0);
        if residual < prev {
            best = Some((residual, m.clone()));
        }
        // Past the tolerance, continue only while rounding still allows progress.
        if residual <= 1e-13 || (prev <= DENSITY_TOL && residual > 0.1 * prev) {
            break;
        }
    }
    match best {
        Some((residual, m)) if residual <= DENSITY_TOL => {
            if let Some((index, &value)) = m.iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                return Err(TorusError::NegativeMass { index, value });
            }
            Ok(m)
        }
        other => Err(TorusError::NoConvergence {
            what: "stationary density",
            iterations: max_iter,
            residual: other.map_or(f64::INFINITY, |b| b.0),
        }),
    }
}

/// Positive left eigenvector `m` (`Aᵀm = λm`, max m = 1) for the principal
/// eigenvalue `lambda` returned by [`principal_eigenpair`].
pub fn left_eigenvector(generator: &Generator, lambda: f64) -> Result<Vec<f64>, TorusError> {
    let adj = generator.assemble().transpose();
    let scale = residual_scale(&adj, &generator.grid);
    let mut shifted = adj.clone();
    shifted.add_diagonal(-(lambda + 1e-7 * (1.0 + lambda.abs())));
    let lu = shifted.factor(&[])?;
    let mut m = vec![1.0; adj.len()];
    let max_iter = 50;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let mut next = lu.solve(&m);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(TorusError::Singular);
        }
        normalize_max(&mut next);
        m = next;
        let r = adj.apply(&m);
        residual = r.iter().zip(&m).fold(0.0f64, |a, (r, v)| a.max((r - lambda * v).abs())) / scale;
        if residual <= 1e-9 {
            if let Some(bad) = m.iter().position(|x| !(*x > 0.0)) {
                return Err(TorusError::Eigen(format!(
                    "left eigenvector component {:e} at node {bad}",
                    m[bad]
                )));
            }
            return Ok(m);
        }
    }
    Err(TorusError::NoConvergence {
        what: "left eigenvector",
        iterations: max_iter,
        residual,
    })
}

fn collatz_wielandt(op: &Operator, v: &[f64]) -> (f64, f64) {
    let w = op.apply(v);
    w.iter()
        .zip(v)
        .map(|(a, b)| a / b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)))
}

fn normalize_max(v: &mut [f64]) {
    let (imax, _) = v.iter().enumerate().fold(
        (0, 0.0f64),
        |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) },
    );
    let s = v[imax];
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Eigenvalue of maximal real part and its positive eigenvector (max φ = 1).
///
/// A Perron iteration on the monotone surrogate gives the start, then Rayleigh
/// quotient iteration refines on the operator at full order.
pub fn principal_eigenpair(generator: &Generator) -> Result<(f64, Vec<f64>), TorusError> {
    let surrogate = generator.assemble_monotone();
    debug_assert!(surrogate.is_metzler());
    let n = surrogate.len();
    let mut v = vec![1.0; n];
    let (mut lo, mut hi) = collatz_wielandt(&surrogate, &v);
    for _ in 0..200 {
        if hi - lo <= 1e-9 * (1.0 + hi.abs()) {
            break;
        }
        // hi ≥ λ_max, so sI − M is a nonsingular M-matrix with a positive inverse.
        let s = hi + (hi - lo).max(1e-12 * (1.0 + hi.abs()));
        let mut m = surrogate.clone();
        m.add_diagonal(-s);
        let lu = m.factor(&[])?;
        let mut w = lu.solve(&v);
        normalize_max(&mut w);
        if w.iter().any(|x| !(*x > 0.0)) {
            break;
        }
        v = w;
        let (l, h) = collatz_wielandt(&surrogate, &v);
        lo = l.max(lo);
        hi = h.min(hi);
    }
    let mut lambda = 0.5 * (lo + hi);

    let op = generator.assemble();
    let scale = residual_scale(&op, &generator.grid);
    let tol = 1e-9;
    let residual_of = |v: &[f64], lambda: f64| -> f64 {
        op.apply(v)
            .iter()
            .zip(v)
            .map(|(a, b)| (a - lambda * b).abs())
            .fold(0.0, f64::max)
            / scale
    };
    let rayleigh = |v: &[f64]| -> f64 {
        let av = op.apply(v);
        av.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / v.iter().map(|b| b * b).sum::<f64>()
    };
    let max_iter = 60;
    let mut residual = residual_of(&v, lambda);
    let mut iterations = 0;
    // Keep refining past the tolerance while the residual still drops.
    let target = 1e-14;
    while residual > target && iterations < max_iter {
        iterations += 1;
        let mut m = op.clone();
        m.add_diagonal(-lambda);
        let w = match m.factor(&[]) {
            Ok(lu) => lu.solve(&v),
            Err(TorusError::Singular) => {
                m.add_diagonal(-1e-12 * (1.0 + lambda.abs()));
                m.factor(&[])?.solve(&v)
            }
            Err(e) => return Err(e),
        };
        if w.iter().any(|x| !x.is_finite()) {
            break;
        }
        let mut w = w;
        normalize_max(&mut w);
        let next_lambda = rayleigh(&w);
        let next = residual_of(&w, next_lambda);
        if residual <= tol && next > 0.1 * residual {
            if next < residual {
                v = w;
                lambda = next_lambda;
                residual = next;
            }
            break;
        }
        v = w;
        lambda = next_lambda;
        residual = next;
    }
    if residual > tol {
        return Err(TorusError::NoConvergence {
            what: "principal eigenpair",
            iterations,
            residual,
        });
    }
    if let Some(bad) = v.iter().position(|x| !(*x > 0.0)) {
        return Err(TorusError::Eigen(format!(
            "eigenvector component {:e} at node {bad}",
            v[bad]
        )));
    }
    Ok((lambda, v))
}
