//! Feedback controls `ū(t, x, y)` that attain the local rates, for importance sampling.

use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::csv;
use crate::homogenize::{HomogenizeError, HomogenizedPoint, HomogenizedTable, XLattice};
use crate::model::{MultiscaleModel, Regime};
use crate::path::DiscretePath;
use crate::ratefn::{local_rate_r2, BellmanSolution, R2Settings, RateControl, RateError};

#[derive(Debug, thiserror::Error)]
pub enum ControlError {
    #[error(transparent)]
    Homogenize(#[from] HomogenizeError),
    #[error("dual maximization failed at x = {x:?}, beta = {beta:?}: {source}")]
    Rate {
        x: Vec<f64>,
        beta: Vec<f64>,
        source: RateError,
    },
    #[error("path leaves the lattice hull at t = {t}: x = {x:?}")]
    OutsideLattice { t: f64, x: Vec<f64> },
    #[error("{0}")]
    Invalid(String),
}

/// Piecewise-constant velocity schedule `ψ̇` on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    dt: f64,
    velocities: Vec<Vec<f64>>,
}

impl Schedule {
    pub fn new(dt: f64, velocities: Vec<Vec<f64>>) -> Result<Self, ControlError> {
        if !(dt > 0.0 && dt.is_finite()) || velocities.is_empty() {
            return Err(ControlError::Invalid(
                "a schedule needs a positive step and at least one interval".into(),
            ));
        }
        let d = velocities[0].len();
        if velocities.iter().any(|v| v.len() != d) {
            return Err(ControlError::Invalid("schedule velocities differ in dimension".into()));
        }
        Ok(Schedule { dt, velocities })
    }

    pub fn from_path(path: &DiscretePath) -> Self {
        Schedule {
            dt: path.dt(),
            velocities: (0..path.intervals()).map(|k| path.velocity(k)).collect(),
        }
    }

    pub fn constant(horizon: f64, velocity: Vec<f64>) -> Self {
        Schedule {
            dt: horizon,
            velocities: vec![velocity],
        }
    }

    pub fn dim(&self) -> usize {
        self.velocities[0].len()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn intervals(&self) -> usize {
        self.velocities.len()
    }

    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocities
    }

    /// Interval index of `t`; times past the horizon use the last interval.
    #[inline]
    pub fn interval(&self, t: f64) -> usize {
        ((t / self.dt).floor().max(0.0) as usize).min(self.velocities.len() - 1)
    }

    pub fn at(&self, t: f64) -> &[f64] {
        &self.velocities[self.interval(t)]
    }
}

fn flat_index(lattice: &XLattice, idx: &[usize]) -> usize {
    let mut f = 0;
    for k in (0..idx.len()).rev() {
        f = f * lattice.count[k] + idx[k];
    }
    f
}

/// `ū = σᵀ(I + ∂χ/∂y)ᵀ a` with `a = q⁻¹(ψ̇ − r)` stored per (interval, node).
#[derive(Debug)]
pub struct Regime1Field {
    table: Arc<HomogenizedTable>,
    schedule: Schedule,
    nodes: Vec<Arc<HomogenizedPoint>>,
    coef: Vec<Vec<f64>>,
}

impl Regime1Field {
    pub fn table(&self) -> &HomogenizedTable {
        &self.table
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    fn node_control(&self, k: usize, node: usize, y: &[f64], out: &mut [f64]) {
        let p = &self.nodes[node];
        let a = &self.coef[k * self.nodes.len() + node];
        let d = a.len();
        let dchi = p.dchi_at(y);
        let v = self.table.model().coefficients.eval(&p.x, y);
        // w = (I + χ′)ᵀ a, then ū = σᵀ w.
        let mut w = [0.0; crate::model::MAX_DIM];
        for kk in 0..d {
            let mut s = a[kk];
            for l in 0..d {
                s += dchi[l * d + kk] * a[l];
            }
            w[kk] = s;
        }
        for (m, o) in out.iter_mut().enumerate().take(d) {
            *o = (0..d).map(|kk| v.sigma[kk * d + m] * w[kk]).sum();
        }
    }
}

/// Regime-2 Bellman solutions per (interval, lattice node), d = 1.
#[derive(Debug)]
pub struct Regime2Field {
    lattice: XLattice,
    schedule: Schedule,
    solutions: Vec<Arc<BellmanSolution>>,
}

impl Regime2Field {
    pub fn solution(&self, k: usize, node: usize) -> &BellmanSolution {
        &self.solutions[k * self.lattice.len() + node]
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }
}

#[derive(Debug)]
pub enum ControlField {
    Zero { dim: usize },
    Regime1(Regime1Field),
    Regime2(Regime2Field),
}

impl ControlField {
    pub fn dim(&self) -> usize {
        match self {
            ControlField::Zero { dim } => *dim,
            ControlField::Regime1(f) => f.table.model().dim(),
            ControlField::Regime2(_) => 1,
        }
    }

    pub fn regime(&self) -> Option<Regime> {
        match self {
            ControlField::Zero { .. } => None,
            ControlField::Regime1(_) => Some(Regime::One),
            ControlField::Regime2(f) => Some(Regime::Two {
                gamma: f.solutions[0].gamma,
            }),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, ControlField::Zero { .. })
    }

    fn lattice(&self) -> Option<&XLattice> {
        match self {
            ControlField::Zero { .. } => None,
            ControlField::Regime1(f) => Some(f.table.lattice()),
            ControlField::Regime2(f) => Some(&f.lattice),
        }
    }

    /// Evaluate at `(t, x, y)`; `y` in user units. `x` is clamped to the lattice hull.
    pub fn eval(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        match self {
            ControlField::Zero { .. } => {}
            ControlField::Regime1(f) => {
                let k = f.schedule.interval(t);
                let lat = f.table.lattice();
                let mut tmp = [0.0; crate::model::MAX_DIM];
                let d = out.len();
                for (idx, w) in lat.stencil(x) {
                    f.node_control(k, flat_index(lat, &idx), y, &mut tmp[..d]);
                    for (o, v) in out.iter_mut().zip(&tmp[..d]) {
                        *o += w * v;
                    }
                }
            }
            ControlField::Regime2(f) => {
                let k = f.schedule.interval(t);
                for (idx, w) in f.lattice.stencil(x) {
                    out[0] += w * f.solution(k, idx[0]).control_at(y[0]);
                }
            }
        }
    }

    /// As [`eval`](Self::eval) but rejects `x` outside the lattice hull.
    pub fn eval_strict(&self, t: f64, x: &[f64], y: &[f64], out: &mut [f64]) -> Result<(), ControlError> {
        if let Some(lat) = self.lattice() {
            if !lat.contains(x) {
                return Err(ControlError::OutsideLattice { t, x: x.to_vec() });
            }
        }
        self.eval(t, x, y, out);
        Ok(())
    }

    /// Sampled `sup ‖ū‖` over the given points.
    pub fn sup_norm(&self, times: &[f64], xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
        let d = self.dim();
        let mut out = vec![0.0; d];
        let mut sup: f64 = 0.0;
        for &t in times {
            for x in xs {
                for y in ys {
                    self.eval(t, x, y, &mut out);
                    sup = sup.max(out.iter().map(|v| v * v).sum::<f64>().sqrt());
                }
            }
        }
        sup
    }
}

fn check_path_in_hull(lattice: &XLattice, path: Option<&DiscretePath>) -> Result<(), ControlError> {
    if let Some(p) = path {
        for (k, s) in p.states().iter().enumerate() {
            if !lattice.contains(s) {
                return Err(ControlError::OutsideLattice {
                    t: k as f64 * p.dt(),
                    x: s.clone(),
                });
            }
        }
    }
    Ok(())
}

/// Regime-1 control for a velocity schedule. When `path` is given every state must lie
/// in the lattice hull.
pub fn regime1_control(
    table: Arc<HomogenizedTable>,
    schedule: Schedule,
    path: Option<&DiscretePath>,
) -> Result<ControlField, ControlError> {
    let d = table.model().dim();
    if schedule.dim() != d {
        return Err(ControlError::Invalid(format!(
            "schedule has dimension {}, model has {d}",
            schedule.dim()
        )));
    }
    check_path_in_hull(table.lattice(), path)?;
    table.precompute()?;
    let lat = table.lattice();
    let mut nodes: Vec<Option<Arc<HomogenizedPoint>>> = vec![None; lat.len()];
    for idx in lat.indices() {
        nodes[flat_index(lat, &idx)] = Some(table.node(&idx)?);
    }
    let nodes: Vec<_> = nodes.into_iter().map(|n| n.expect("every node filled")).collect();
    let mut coef = Vec::with_capacity(schedule.intervals() * nodes.len());
    for beta in schedule.velocities() {
        for p in &nodes {
            let q = DMatrix::from_row_slice(d, d, &p.q);
            let rhs = DVector::from_iterator(d, beta.iter().zip(&p.r).map(|(b, r)| b - r));
            let chol = q
                .cholesky()
                .ok_or_else(|| ControlError::Invalid(format!("q is not positive definite at x = {:?}", p.x)))?;
            coef.push(chol.solve(&rhs).iter().copied().collect());
        }
    }
    Ok(ControlField::Regime1(Regime1Field {
        table,
        schedule,
        nodes,
        coef,
    }))
}

/// Regime-2 control (d = 1): one Bellman solve per (interval, lattice node).
pub fn regime2_control(
    model: &MultiscaleModel,
    lattice: XLattice,
    schedule: Schedule,
    settings: &R2Settings,
    path: Option<&DiscretePath>,
) -> Result<ControlField, ControlError> {
    if model.dim() != 1 || lattice.dim() != 1 || schedule.dim() != 1 {
        return Err(ControlError::Invalid(
            "the Regime-2 control is implemented for d = 1".into(),
        ));
    }
    check_path_in_hull(&lattice, path)?;
    let nodes = lattice.len();
    let jobs: Vec<(usize, usize)> = (0..schedule.intervals())
        .flat_map(|k| (0..nodes).map(move |i| (k, i)))
        .collect();
    let solutions = jobs
        .par_iter()
        .map(|&(k, i)| {
            let x = lattice.point(&[i])[0];
            let beta = schedule.velocities()[k][0];
            let r = local_rate_r2(model, x, beta, settings).map_err(|source| ControlError::Rate {
                x: vec![x],
                beta: vec![beta],
                source,
            })?;
            match r.control {
                RateControl::Regime2(sol) => Ok(sol),
                _ => unreachable!("Regime-2 rate returns a Bellman solution"),
            }
        })
        .collect::<Result<Vec<_>, ControlError>>()?;
    Ok(ControlField::Regime2(Regime2Field {
        lattice,
        schedule,
        solutions,
    }))
}

/// Feedback `u(t, X) = field(t, X, wrap(X/δ))`; `wrap` is modulo the fast period.
#[derive(Debug, Clone)]
pub struct Feedback {
    field: Arc<ControlField>,
    eps: f64,
    delta: f64,
    period: Vec<f64>,
}

pub fn bind_feedback(field: Arc<ControlField>, eps: f64, delta: f64, period: &[f64]) -> Feedback {
    Feedback {
        field,
        eps,
        delta,
        period: period.to_vec(),
    }
}

impl Feedback {
    pub fn field(&self) -> &ControlField {
        &self.field
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    #[inline]
    pub fn fast(&self, x: &[f64], y: &mut [f64]) {
        for ((y, x), l) in y.iter_mut().zip(x).zip(&self.period) {
            *y = (x / self.delta).rem_euclid(*l);
        }
    }

    /// Control at `(t, X)`; also returns the fast coordinate in `y`.
    #[inline]
    pub fn eval(&self, t: f64, x: &[f64], y: &mut [f64], out: &mut [f64]) {
        self.fast(x, y);
        self.field.eval(t, x, y, out);
    }
}

/// `t, x_*, y_*, u_*` rows over a tensor lattice.
pub fn write_csv<W: Write>(
    w: &mut W,
    field: &ControlField,
    times: &[f64],
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
) -> io::Result<()> {
    let d = field.dim();
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|k| format!("x_{k}")));
    header.extend((1..=d).map(|k| format!("y_{k}")));
    header.extend((1..=d).map(|k| format!("u_{k}")));
    csv::write_header(w, &header.iter().map(String::as_str).collect::<Vec<_>>())?;
    let mut u = vec![0.0; d];
    for &t in times {
        for x in xs {
            for y in ys {
                field.eval(t, x, y, &mut u);
                let mut row = vec![t];
                row.extend_from_slice(x);
                row.extend_from_slice(y);
                row.extend_from_slice(&u);
                csv::write_row(w, &row.iter().map(|v| csv::num(*v)).collect::<Vec<_>>())?;
            }
        }
    }
    Ok(())
}
