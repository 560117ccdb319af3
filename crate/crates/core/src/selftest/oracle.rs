//! Reference computations that share no code with the solvers they check.

use minilp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem};

/// Adaptive Simpson quadrature with Richardson correction.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// Modified Bessel function `I₀` by its power series.
pub fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let (mut term, mut sum) = (1.0, 1.0);
    for k in 1..80 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

pub enum LpMode {
    /// `inf_P ∫ (½z² − ζλ) dP`, i.e. `L̃(ζ)`.
    Dual(f64),
    /// `inf_P ∫ ½z² dP` subject to `∫ λ dP = β`.
    Rate(f64),
}

/// Occupation-measure linear program over `P(dz dy)` on an `ny × nz` grid for the
/// 1-D kernel `λ = γb + c + σz` with generator `λ∂ + (γ/2)σ²∂²`. Invariance is
/// imposed against the nodal basis with central differences.
pub fn occupation_lp(coeffs: &dyn Fn(f64) -> (f64, f64, f64), gamma: f64, ny: usize, zs: &[f64], mode: LpMode) -> f64 {
    let h = 1.0 / ny as f64;
    let mut p = Problem::new(OptimizationDirection::Minimize);
    let mut invariance: Vec<LinearExpr> = (0..ny).map(|_| LinearExpr::empty()).collect();
    let mut mass = LinearExpr::empty();
    let mut velocity = LinearExpr::empty();
    for j in 0..ny {
        let (b, c, s) = coeffs(j as f64 * h);
        let a = 0.5 * gamma * s * s;
        for &z in zs {
            let lam = gamma * b + c + s * z;
            let cost = match mode {
                LpMode::Dual(zeta) => 0.5 * z * z - zeta * lam,
                LpMode::Rate(_) => 0.5 * z * z,
            };
            let v = p.add_var(cost, (0.0, f64::INFINITY));
            invariance[(j + ny - 1) % ny].add(v, a / (h * h) - lam / (2.0 * h));
            invariance[j].add(v, -2.0 * a / (h * h));
            invariance[(j + 1) % ny].add(v, a / (h * h) + lam / (2.0 * h));
            mass.add(v, 1.0);
            velocity.add(v, lam);
        }
    }
    // One invariance row is implied by the others.
    for row in invariance.into_iter().take(ny - 1) {
        p.add_constraint(row, ComparisonOp::Eq, 0.0);
    }
    p.add_constraint(mass, ComparisonOp::Eq, 1.0);
    if let LpMode::Rate(beta) = mode {
        p.add_constraint(velocity, ComparisonOp::Eq, beta);
    }
    p.solve().map(|s| s.objective()).unwrap_or(f64::NAN)
}

/// 1-D time-change problem `inf mean(½β(1/s − c)² s/σ²)` over densities `s > 0`
/// with `mean(βs) = 1`, by projected Newton on nodal values. Requires `β > 0`.
pub fn time_change_brute_force(c: &[f64], sig: &[f64], beta: f64) -> f64 {
    let n = c.len();
    let objective = |s: &[f64]| -> f64 {
        (0..n)
            .map(|j| 0.5 * beta * (1.0 / s[j] - c[j]).powi(2) * s[j] / (sig[j] * sig[j]))
            .sum::<f64>()
            / n as f64
    };
    let mut s = vec![1.0 / beta; n];
    for _ in 0..200 {
        let g: Vec<f64> = (0..n)
            .map(|j| 0.5 * beta * (c[j] * c[j] - 1.0 / (s[j] * s[j])) / (sig[j] * sig[j]))
            .collect();
        let hinv: Vec<f64> = (0..n).map(|j| sig[j] * sig[j] * s[j].powi(3) / beta).collect();
        let nu = (0..n).map(|j| hinv[j] * g[j]).sum::<f64>() / hinv.iter().sum::<f64>();
        let dir: Vec<f64> = (0..n).map(|j| -hinv[j] * (g[j] - nu)).collect();
        let f0 = objective(&s);
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = s.iter().zip(&dir).map(|(a, b)| a + t * b).collect();
            if trial.iter().all(|v| *v > 0.0) && objective(&trial) <= f0 {
                s = trial;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return f0;
            }
        }
    }
    objective(&s)
}
