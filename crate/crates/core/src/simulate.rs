//! Euler–Maruyama for `dX = [(ε/δ)b + c + σu]dt + √ε σ dW`, Girsanov weights and
//! empirical occupation measures.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::control::Feedback;
use crate::model::{MultiscaleModel, MAX_DIM};
use crate::path::DiscretePath;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("dt = {dt} exceeds the fast-scale limit delta^2/10 = {max}")]
    Step { dt: f64, max: f64 },
    #[error("horizon must be positive and finite, got {0}")]
    Horizon(f64),
    #[error("eps must be positive and finite, got {0}")]
    Eps(f64),
    #[error("state became non-finite at step {step} (t = {t})")]
    NonFinite { step: usize, t: f64 },
    #[error("{0}")]
    Dimension(String),
}

/// Largest admissible step `δ²/10`.
pub fn max_step(model: &MultiscaleModel, eps: f64) -> f64 {
    let delta = model.delta(eps);
    delta * delta / 10.0
}

/// Number of steps and the uniform step `horizon/steps ≤ dt`.
pub fn step_count(horizon: f64, dt: f64) -> (usize, f64) {
    let steps = ((horizon / dt) - 1e-9).ceil().max(1.0) as usize;
    (steps, horizon / steps as f64)
}

/// Generator for trajectory `stream` under master `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fixed data of one integration.
#[derive(Debug, Clone, Copy)]
pub struct Integrator<'a> {
    pub model: &'a MultiscaleModel,
    pub eps: f64,
    pub delta: f64,
    pub dt: f64,
    pub steps: usize,
    pub control: Option<&'a Feedback>,
}

/// State at the start of step `k`, before the update.
pub struct StepView<'a> {
    pub k: usize,
    pub t: f64,
    pub dt: f64,
    pub x: &'a [f64],
    /// Fast coordinate `wrap(x/δ)` in user units.
    pub y: &'a [f64],
    pub u: &'a [f64],
}

impl<'a> Integrator<'a> {
    pub fn new(
        model: &'a MultiscaleModel,
        eps: f64,
        horizon: f64,
        dt: f64,
        control: Option<&'a Feedback>,
    ) -> Result<Self, SimError> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(SimError::Eps(eps));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(SimError::Horizon(horizon));
        }
        let max = max_step(model, eps);
        if !(dt > 0.0 && dt <= max * (1.0 + 1e-12)) {
            return Err(SimError::Step { dt, max });
        }
        if let Some(fb) = control {
            if fb.field().dim() != model.dim() {
                return Err(SimError::Dimension(format!(
                    "control has dimension {}, model has {}",
                    fb.field().dim(),
                    model.dim()
                )));
            }
        }
        let (steps, dt) = step_count(horizon, dt);
        Ok(Integrator {
            model,
            eps,
            delta: model.delta(eps),
            dt,
            steps,
            control,
        })
    }

    /// Run from `x0` with Gaussian increments drawn by `noise` (already scaled by `√dt`).
    /// Returns the final state and the Girsanov log-weight.
    pub fn run(
        &self,
        x0: &[f64],
        noise: &mut dyn FnMut(&mut [f64]),
        observer: &mut dyn FnMut(&StepView),
    ) -> Result<(Vec<f64>, f64), SimError> {
        let d = self.model.dim();
        if x0.len() != d {
            return Err(SimError::Dimension(format!(
                "x0 has {} components, model has {d}",
                x0.len()
            )));
        }
        let period = self.model.coefficients.period();
        let scale = self.eps / self.delta;
        let sqrt_eps = self.eps.sqrt();
        let dt = self.dt;
        let mut x = [0.0; MAX_DIM];
        x[..d].copy_from_slice(x0);
        let mut y = [0.0; MAX_DIM];
        let mut u = [0.0; MAX_DIM];
        let mut dw = [0.0; MAX_DIM];
        let mut log_weight = 0.0;
        for k in 0..self.steps {
            let t = k as f64 * dt;
            for i in 0..d {
                y[i] = (x[i] / self.delta).rem_euclid(period[i]);
            }
            if let Some(fb) = self.control {
                fb.field().eval(t, &x[..d], &y[..d], &mut u[..d]);
            }
            observer(&StepView {
                k,
                t,
                dt,
                x: &x[..d],
                y: &y[..d],
                u: &u[..d],
            });
            noise(&mut dw[..d]);
            let v = self.model.coefficients.eval(&x[..d], &y[..d]);
            if self.control.is_some() {
                let mut dot = 0.0;
                let mut norm2 = 0.0;
                for i in 0..d {
                    dot += u[i] * dw[i];
                    norm2 += u[i] * u[i];
                }
                log_weight -= dot / sqrt_eps + 0.5 * norm2 * dt / self.eps;
            }
            let mut finite = true;
            for i in 0..d {
                let mut su = 0.0;
                let mut sw = 0.0;
                for j in 0..d {
                    su += v.sigma[i * d + j] * u[j];
                    sw += v.sigma[i * d + j] * dw[j];
                }
                x[i] += (scale * v.b[i] + v.c[i] + su) * dt + sqrt_eps * sw;
                finite &= x[i].is_finite();
            }
            if !finite || !log_weight.is_finite() {
                return Err(SimError::NonFinite { step: k + 1, t: t + dt });
            }
        }
        Ok((x[..d].to_vec(), log_weight))
    }

    /// Run with the stream `(seed, stream)`.
    pub fn run_seeded(
        &self,
        x0: &[f64],
        seed: u64,
        stream: u64,
        observer: &mut dyn FnMut(&StepView),
    ) -> Result<(Vec<f64>, f64), SimError> {
        let mut rng = stream_rng(seed, stream);
        let sqrt_dt = self.dt.sqrt();
        let mut noise = |dw: &mut [f64]| {
            for w in dw.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *w = z * sqrt_dt;
            }
        };
        self.run(x0, &mut noise, observer)
    }
}

/// One trajectory, stored every `stride` steps (the end state is always kept).
/// The log-weight is 0 for uncontrolled runs.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    model: &MultiscaleModel,
    eps: f64,
    x0: &[f64],
    horizon: f64,
    dt: f64,
    seed: u64,
    stream: u64,
    control: Option<&Feedback>,
    stride: usize,
) -> Result<DiscretePath, SimError> {
    let integ = Integrator::new(model, eps, horizon, dt, control)?;
    let stride = stride.max(1);
    if integ.steps % stride != 0 {
        return Err(SimError::Dimension(format!(
            "stride {stride} does not divide the {} steps",
            integ.steps
        )));
    }
    let mut states = Vec::with_capacity(integ.steps / stride + 1);
    let (end, lw) = integ.run_seeded(x0, seed, stream, &mut |s| {
        if s.k % stride == 0 {
            states.push(s.x.to_vec());
        }
    })?;
    states.push(end);
    let mut path = DiscretePath::new(integ.dt * stride as f64, states).expect("valid path");
    path.log_weight = Some(lw);
    Ok(path)
}

/// Binning of the occupation measure.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupationSettings {
    /// Sliding window `Δ`.
    pub window: f64,
    pub horizon: f64,
    pub y_bins: usize,
    pub z_bins: usize,
    /// Controls are clipped to `[-z_range, z_range]` per component.
    pub z_range: f64,
    pub t_bins: usize,
}

impl OccupationSettings {
    /// `Δ = √ε`, 32 fast bins, 33 control bins on `[-4, 4]`, 8 time bins.
    pub fn defaults(eps: f64, horizon: f64) -> Self {
        OccupationSettings {
            window: eps.sqrt(),
            horizon,
            y_bins: 32,
            z_bins: 33,
            z_range: 4.0,
            t_bins: 8,
        }
    }
}

/// Weighted bins over (time × control × fast variable); `y` is normalized to `[0, 1)^d`.
#[derive(Debug, Clone)]
pub struct OccupationMeasure {
    pub settings: OccupationSettings,
    dim: usize,
    period: Vec<f64>,
    z_cells: usize,
    y_cells: usize,
    bins: Vec<f64>,
    /// Samples whose control was clipped.
    pub clipped: usize,
}

const MAX_CELLS: usize = 1 << 24;

impl OccupationMeasure {
    pub fn new(dim: usize, period: &[f64], settings: OccupationSettings) -> Result<Self, SimError> {
        if !(settings.window > 0.0 && settings.horizon > 0.0)
            || settings.y_bins == 0
            || settings.z_bins == 0
            || settings.t_bins == 0
        {
            return Err(SimError::Dimension(
                "occupation bins and window must be positive".into(),
            ));
        }
        let z_cells = settings.z_bins.checked_pow(dim as u32).unwrap_or(usize::MAX);
        let y_cells = settings.y_bins.checked_pow(dim as u32).unwrap_or(usize::MAX);
        let total = z_cells.saturating_mul(y_cells).saturating_mul(settings.t_bins);
        if total > MAX_CELLS {
            return Err(SimError::Dimension(format!(
                "{total} occupation cells exceed the limit {MAX_CELLS}; reduce the bin counts"
            )));
        }
        Ok(OccupationMeasure {
            settings,
            dim,
            period: period.to_vec(),
            z_cells,
            y_cells,
            bins: vec![0.0; total],
            clipped: 0,
        })
    }

    fn z_cell(&mut self, z: &[f64]) -> usize {
        let s = &self.settings;
        let w = 2.0 * s.z_range / s.z_bins as f64;
        let mut cell = 0;
        let mut clipped = false;
        for k in (0..self.dim).rev() {
            let f = (z[k] + s.z_range) / w;
            let i = if f < 0.0 {
                clipped = true;
                0
            } else if f >= s.z_bins as f64 {
                clipped |= f > s.z_bins as f64;
                s.z_bins - 1
            } else {
                f as usize
            };
            cell = cell * s.z_bins + i;
        }
        if clipped {
            self.clipped += 1;
        }
        cell
    }

    fn y_cell(&self, y: &[f64]) -> usize {
        let n = self.settings.y_bins;
        let mut cell = 0;
        for k in (0..self.dim).rev() {
            let f = (y[k] / self.period[k]).rem_euclid(1.0);
            cell = cell * n + ((f * n as f64) as usize).min(n - 1);
        }
        cell
    }

    /// Add the sample held on `[s, s + dt)`: it counts toward every window start
    /// `t ∈ [s − Δ, s] ∩ [0, T]` with density `dt/Δ`.
    pub fn record(&mut self, s: f64, dt: f64, z: &[f64], y: &[f64]) {
        let zc = self.z_cell(z);
        let yc = self.y_cell(y);
        let st = &self.settings;
        let tw = st.horizon / st.t_bins as f64;
        let lo = (s - st.window).max(0.0);
        let hi = s.min(st.horizon);
        if hi <= lo {
            return;
        }
        let first = ((lo / tw) as usize).min(st.t_bins - 1);
        let last = ((hi / tw) as usize).min(st.t_bins - 1);
        let density = dt / st.window;
        for tb in first..=last {
            let a = (tb as f64 * tw).max(lo);
            let b = ((tb + 1) as f64 * tw).min(hi);
            if b > a {
                self.bins[(tb * self.z_cells + zc) * self.y_cells + yc] += density * (b - a);
            }
        }
    }

    pub fn merge(&mut self, other: &OccupationMeasure) {
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            *a += b;
        }
        self.clipped += other.clipped;
    }

    pub fn scale(&mut self, factor: f64) {
        self.bins.iter_mut().for_each(|b| *b *= factor);
    }

    /// Mass of `Z × Y × [0, t_bin_end]` per time bin, cumulative.
    pub fn cumulative_mass(&self) -> Vec<(f64, f64)> {
        let st = &self.settings;
        let tw = st.horizon / st.t_bins as f64;
        let per = self.z_cells * self.y_cells;
        let mut acc = 0.0;
        (0..st.t_bins)
            .map(|tb| {
                acc += self.bins[tb * per..(tb + 1) * per].iter().sum::<f64>();
                ((tb + 1) as f64 * tw, acc)
            })
            .collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.bins.iter().sum()
    }

    /// Fast-variable marginal over all times and controls, normalized to 1.
    pub fn y_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.y_cells];
        for (i, b) in self.bins.iter().enumerate() {
            out[i % self.y_cells] += b;
        }
        normalize(&mut out);
        out
    }

    /// Control marginal of component `k`, normalized to 1; bin centers alongside.
    pub fn z_marginal(&self, k: usize) -> (Vec<f64>, Vec<f64>) {
        let st = &self.settings;
        let mut out = vec![0.0; st.z_bins];
        for (i, b) in self.bins.iter().enumerate() {
            let zc = (i / self.y_cells) % self.z_cells;
            out[(zc / st.z_bins.pow(k as u32)) % st.z_bins] += b;
        }
        normalize(&mut out);
        let w = 2.0 * st.z_range / st.z_bins as f64;
        let centers = (0..st.z_bins).map(|i| -st.z_range + (i as f64 + 0.5) * w).collect();
        (centers, out)
    }
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    }
}

/// Occupation measure of a stored path; `controls[k]` is held on interval `k`
/// (zero when absent).
pub fn occupation_measure(
    path: &DiscretePath,
    controls: Option<&[Vec<f64>]>,
    delta: f64,
    period: &[f64],
    settings: OccupationSettings,
) -> Result<OccupationMeasure, SimError> {
    let d = path.dim();
    let mut occ = OccupationMeasure::new(d, period, settings)?;
    let zero = vec![0.0; d];
    let mut y = vec![0.0; d];
    for k in 0..path.intervals() {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = (path.state(k)[i] / delta).rem_euclid(period[i]);
        }
        let z = controls.map_or(&zero[..], |c| &c[k][..]);
        occ.record(k as f64 * path.dt(), path.dt(), z, &y);
    }
    Ok(occ)
}

/// Wasserstein-1 distance on the unit circle between two histograms on the same
/// equally spaced bins (mass placed at bin centers).
pub fn circle_w1(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len();
    let mut cum = Vec::with_capacity(n);
    let mut acc = 0.0;
    for (a, b) in p.iter().zip(q) {
        acc += a - b;
        cum.push(acc);
    }
    let mut sorted = cum.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = sorted[n / 2];
    cum.iter().map(|c| (c - median).abs()).sum::<f64>() / n as f64
}

#[cfg(test)]
mod tests;
