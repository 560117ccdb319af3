//! Monte Carlo estimates of `E[exp(−h(X^ε)/ε)]`, plain and importance-sampled.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::control::{bind_feedback, ControlField};
use crate::functional::PathFunctional;
use crate::model::MultiscaleModel;
use crate::simulate::{max_step, Integrator, SimError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum McError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("sample {index} is {value}; the estimator needs finite positive samples")]
    Sample { index: u64, value: f64 },
    #[error("importance sampling needs a control field")]
    MissingControl,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Standard,
    #[serde(rename = "is")]
    ImportanceSampling,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Standard => "standard",
            Scheme::ImportanceSampling => "is",
        }
    }
}

/// Streaming count, mean and sum of squared deviations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Moments {
    pub n: u64,
    pub mean: f64,
    pub m2: f64,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    /// Pooled moments of two disjoint samples.
    pub fn merge(&self, other: &Moments) -> Moments {
        if self.n == 0 {
            return *other;
        }
        if other.n == 0 {
            return *self;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        let (na, nb) = (self.n as f64, other.n as f64);
        Moments {
            n,
            mean: self.mean + d * nb / n as f64,
            m2: self.m2 + other.m2 + d * d * na * nb / n as f64,
        }
    }

    /// Unbiased sample variance (0 for fewer than two samples).
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct McSettings {
    pub eps: f64,
    pub n: u64,
    pub horizon: f64,
    /// Defaults to `δ²/10`.
    pub dt: Option<f64>,
    pub seed: u64,
    /// Trajectory `k` uses stream `first_stream + k`.
    pub first_stream: u64,
    /// Trajectories per work unit; fixes the merge order.
    pub chunk: u64,
}

impl McSettings {
    pub fn new(eps: f64, n: u64, seed: u64) -> Self {
        McSettings {
            eps,
            n,
            horizon: 1.0,
            dt: None,
            seed,
            first_stream: 0,
            chunk: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorReport {
    pub scheme: Scheme,
    pub n: u64,
    pub eps: f64,
    pub delta: f64,
    pub dt: f64,
    pub horizon: f64,
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
    pub rel_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub minus_eps_log_mean: f64,
    /// `−ε log` of the CI endpoints (low, high), when the lower endpoint is positive.
    pub minus_eps_log_ci: Option<[f64; 2]>,
    pub wall_seconds: Option<f64>,
    pub seed: u64,
    pub first_stream: u64,
}

impl EstimatorReport {
    pub fn from_moments(scheme: Scheme, m: &Moments, settings: &McSettings, delta: f64, dt: f64) -> Self {
        let variance = m.variance();
        let se = (variance / m.n.max(1) as f64).sqrt();
        let half = 1.96 * se;
        let eps = settings.eps;
        let (ci_low, ci_high) = (m.mean - half, m.mean + half);
        EstimatorReport {
            scheme,
            n: m.n,
            eps,
            delta,
            dt,
            horizon: settings.horizon,
            mean: m.mean,
            variance,
            std_error: se,
            rel_error: se / m.mean,
            ci_low,
            ci_high,
            minus_eps_log_mean: -eps * m.mean.ln(),
            minus_eps_log_ci: (ci_low > 0.0).then(|| [-eps * ci_high.ln(), -eps * ci_low.ln()]),
            wall_seconds: None,
            seed: settings.seed,
            first_stream: settings.first_stream,
        }
    }
}

/// One report plus the raw moments (for pooling).
#[derive(Debug, Clone)]
pub struct Estimate {
    pub report: EstimatorReport,
    pub moments: Moments,
}

pub fn estimate(
    model: &MultiscaleModel,
    h: &PathFunctional,
    settings: &McSettings,
    scheme: Scheme,
    control: Option<Arc<ControlField>>,
) -> Result<Estimate, McError> {
    let start = Instant::now();
    let eps = settings.eps;
    if settings.n == 0 || settings.chunk == 0 {
        return Err(McError::Invalid("N and the chunk size must be positive".into()));
    }
    let delta = model.delta(eps);
    let dt = settings.dt.unwrap_or_else(|| max_step(model, eps));
    let feedback = match scheme {
        Scheme::Standard => None,
        Scheme::ImportanceSampling => {
            let field = control.ok_or(McError::MissingControl)?;
            Some(bind_feedback(field, eps, delta, model.coefficients.period()))
        }
    };
    let integ = Integrator::new(model, eps, settings.horizon, dt, feedback.as_ref())?;

    let moments = if let Some(c0) = h.is_constant() {
        // The integrand does not depend on the path; every sample equals e^{−c₀/ε}.
        let v = (-c0 / eps).exp();
        check_sample(0, v)?;
        Moments {
            n: settings.n,
            mean: v,
            m2: 0.0,
        }
    } else {
        let chunks = settings.n.div_ceil(settings.chunk);
        let x0 = &model.x0;
        let parts: Vec<Result<Moments, McError>> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let lo = c * settings.chunk;
                let hi = (lo + settings.chunk).min(settings.n);
                let mut m = Moments::default();
                for k in lo..hi {
                    let stream = settings.first_stream + k;
                    let mut acc = h.accumulator(x0);
                    let mut prev: Vec<f64> = x0.clone();
                    let (end, lw) = integ.run_seeded(x0, settings.seed, stream, &mut |s| {
                        if s.k > 0 {
                            acc.step(&prev, s.x, s.dt);
                            prev.copy_from_slice(s.x);
                        }
                    })?;
                    acc.step(&prev, &end, integ.dt);
                    let hv = acc.finish(&end);
                    let v = match scheme {
                        Scheme::Standard => (-hv / eps).exp(),
                        Scheme::ImportanceSampling => (-hv / eps + lw).exp(),
                    };
                    check_sample(stream, v)?;
                    m.push(v);
                }
                Ok(m)
            })
            .collect();
        let mut total = Moments::default();
        for p in parts {
            total = total.merge(&p?);
        }
        total
    };
    let mut report = EstimatorReport::from_moments(scheme, &moments, settings, delta, integ.dt);
    report.wall_seconds = Some(start.elapsed().as_secs_f64());
    Ok(Estimate { report, moments })
}

fn check_sample(index: u64, v: f64) -> Result<(), McError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(McError::Sample { index, value: v })
    }
}

/// Reports along a descending ε ladder with the variational reference value.
#[derive(Debug, Clone, Serialize)]
pub struct LadderTable {
    pub reference: f64,
    pub rows: Vec<EstimatorReport>,
}

impl LadderTable {
    /// Relative distance of the smallest-ε entry from the reference.
    pub fn final_relative_gap(&self) -> f64 {
        let last = self.rows.last().expect("non-empty ladder");
        ((last.minus_eps_log_mean - self.reference) / self.reference).abs()
    }

    /// Indices `i` where the gap to the reference grows from row `i − 1` to row `i`
    /// by more than the two CI half-widths combined.
    pub fn reversals(&self) -> Vec<usize> {
        let half = |r: &EstimatorReport| match r.minus_eps_log_ci {
            Some([a, b]) => 0.5 * (b - a).abs(),
            None => f64::INFINITY,
        };
        (1..self.rows.len())
            .filter(|&i| {
                let (a, b) = (&self.rows[i - 1], &self.rows[i]);
                let ga = (a.minus_eps_log_mean - self.reference).abs();
                let gb = (b.minus_eps_log_mean - self.reference).abs();
                gb - ga > half(a) + half(b)
            })
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        use crate::csv::{num, write_header, write_row};
        write_header(
            w,
            &[
                "eps",
                "scheme",
                "n",
                "mean",
                "std_error",
                "rel_error",
                "minus_eps_log_mean",
                "reference",
            ],
        )?;
        for r in &self.rows {
            write_row(
                w,
                &[
                    num(r.eps),
                    r.scheme.name().to_string(),
                    r.n.to_string(),
                    num(r.mean),
                    num(r.std_error),
                    num(r.rel_error),
                    num(r.minus_eps_log_mean),
                    num(self.reference),
                ],
            )?;
        }
        Ok(())
    }
}

/// `−ε log E[e^{−h/ε}]` along a descending ladder of ε.
pub fn ldp_slope(
    model: &MultiscaleModel,
    h: &PathFunctional,
    ladder: &[f64],
    template: &McSettings,
    scheme: Scheme,
    control: Option<Arc<ControlField>>,
    reference: f64,
) -> Result<LadderTable, McError> {
    if ladder.is_empty() || ladder.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(McError::Invalid(
            "the ε ladder must be non-empty and strictly descending".into(),
        ));
    }
    let rows = ladder
        .iter()
        .map(|&eps| {
            let s = McSettings {
                eps,
                dt: None,
                ..template.clone()
            };
            estimate(model, h, &s, scheme, control.clone()).map(|e| e.report)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(LadderTable { reference, rows })
}

#[cfg(test)]
mod tests;
