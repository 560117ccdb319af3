//! Paths sampled on a uniform time grid.

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PathError {
    #[error("a path needs at least two states")]
    TooShort,
    #[error("time step must be positive and finite, got {0}")]
    Step(f64),
    #[error("state {index} has dimension {got}, expected {expected}")]
    Dimension { index: usize, got: usize, expected: usize },
}

/// States `φ(k Δt)`, `k = 0..=M`, plus the Girsanov log-weight of a controlled run.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath {
    dt: f64,
    states: Vec<Vec<f64>>,
    pub log_weight: Option<f64>,
}

impl DiscretePath {
    pub fn new(dt: f64, states: Vec<Vec<f64>>) -> Result<Self, PathError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(PathError::Step(dt));
        }
        if states.len() < 2 {
            return Err(PathError::TooShort);
        }
        let d = states[0].len();
        if let Some((index, s)) = states.iter().enumerate().find(|(_, s)| s.len() != d) {
            return Err(PathError::Dimension {
                index,
                got: s.len(),
                expected: d,
            });
        }
        Ok(DiscretePath {
            dt,
            states,
            log_weight: None,
        })
    }

    /// Sample `f` at `M + 1` equally spaced times on `[0, horizon]`.
    pub fn from_fn(horizon: f64, intervals: usize, f: impl Fn(f64) -> Vec<f64>) -> Result<Self, PathError> {
        let dt = horizon / intervals as f64;
        Self::new(dt, (0..=intervals).map(|k| f(k as f64 * dt)).collect())
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn intervals(&self) -> usize {
        self.states.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.intervals() as f64
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k]
    }

    pub fn end(&self) -> &[f64] {
        self.states.last().expect("non-empty")
    }

    /// Forward-difference velocity on interval `k`.
    pub fn velocity(&self, k: usize) -> Vec<f64> {
        self.states[k + 1]
            .iter()
            .zip(&self.states[k])
            .map(|(b, a)| (b - a) / self.dt)
            .collect()
    }

    pub fn midpoint(&self, k: usize) -> Vec<f64> {
        self.states[k + 1]
            .iter()
            .zip(&self.states[k])
            .map(|(b, a)| 0.5 * (a + b))
            .collect()
    }

    /// Index of the interval containing time `t` (clamped to the grid).
    pub fn interval_at(&self, t: f64) -> usize {
        ((t / self.dt).floor().max(0.0) as usize).min(self.intervals() - 1)
    }

    /// Piecewise-linear interpolation at time `t`.
    pub fn at(&self, t: f64) -> Vec<f64> {
        let k = self.interval_at(t);
        let s = ((t - k as f64 * self.dt) / self.dt).clamp(0.0, 1.0);
        self.states[k]
            .iter()
            .zip(&self.states[k + 1])
            .map(|(a, b)| a + s * (b - a))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_line_has_constant_velocity() {
        let p = DiscretePath::from_fn(1.0, 10, |t| vec![-1.0 + 2.0 * t]).unwrap();
        assert_eq!(p.intervals(), 10);
        for k in 0..10 {
            assert!((p.velocity(k)[0] - 2.0).abs() < 1e-12);
        }
        assert!((p.at(0.55)[0] - 0.1).abs() < 1e-12);
        assert_eq!(p.interval_at(1.0), 9);
    }

    #[test]
    fn invalid_paths_are_rejected() {
        assert_eq!(DiscretePath::new(0.1, vec![vec![0.0]]), Err(PathError::TooShort));
        assert_eq!(DiscretePath::new(-1.0, vec![vec![0.0]; 3]), Err(PathError::Step(-1.0)));
        assert!(matches!(
            DiscretePath::new(0.1, vec![vec![0.0], vec![0.0, 1.0]]),
            Err(PathError::Dimension { index: 1, .. })
        ));
    }
}
