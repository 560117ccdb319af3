use super::*;
use crate::functional::StateFn;
use crate::homogenize::{CellSettings, HomogenizedTable, XLattice};
use crate::model::{build_model, ModelSpec};
use crate::ratefn::{quadratic_rate, FnRate, Regime1Rate};
use std::sync::Arc;

/// Homogenized rate of flat Langevin dynamics: `(β + V′(x))²/(4D)`, `V = 1.5(x² − 1)²`.
fn flat_langevin(d: f64) -> impl LocalRate {
    FnRate {
        dim: 1,
        f: move |x: &[f64], beta: &[f64]| {
            let vp = 6.0 * x[0] * (x[0] * x[0] - 1.0);
            Ok(quadratic_rate(&[-vp], &[2.0 * d], beta)?.0)
        },
    }
}

fn brownian() -> impl LocalRate {
    FnRate {
        dim: 1,
        f: |_: &[f64], beta: &[f64]| Ok(0.5 * beta[0] * beta[0]),
    }
}

fn quasipotential(horizon: f64, m: usize) -> PathOptResult {
    let problem = PathProblem {
        horizon,
        intervals: m,
        x0: vec![-1.0],
        terminal: Terminal::Fixed(vec![0.0]),
        h: None,
    };
    minimize_action(&problem, &flat_langevin(1.0), None, &OptSettings::default()).unwrap()
}

#[test]
fn quasipotential_is_approached_from_above() {
    let r = quasipotential(8.0, 64);
    assert!(r.converged, "{} {}", r.iterations, r.grad_norm);
    assert!(r.value >= 1.5 && r.value <= 1.5 * 1.05, "{}", r.value);
    assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
    // Same M with a longer horizon coarsens Δt, and the midpoint error grows.
    assert!(quasipotential(4.0, 64).value < r.value);
}

#[test]
fn quasipotential_is_monotone_in_horizon_at_fixed_step() {
    // Padding with zero-cost rests at the critical points nests the discrete problems.
    let settings = OptSettings {
        grad_tol: 1e-9,
        ..OptSettings::default()
    };
    let values: Vec<f64> = [(2.0, 16), (4.0, 32), (8.0, 64)]
        .iter()
        .map(|&(t, m)| {
            let problem = PathProblem {
                horizon: t,
                intervals: m,
                x0: vec![-1.0],
                terminal: Terminal::Fixed(vec![0.0]),
                h: None,
            };
            minimize_action(&problem, &flat_langevin(1.0), None, &settings)
                .unwrap()
                .value
        })
        .collect();
    assert!(values.windows(2).all(|w| w[1] <= w[0] + 1e-10), "{values:?}");
    assert!(values[0] - values[2] > 1e-7);
}

#[test]
fn perturbed_start_reaches_the_same_value() {
    let problem = PathProblem {
        horizon: 4.0,
        intervals: 32,
        x0: vec![-1.0],
        terminal: Terminal::Fixed(vec![0.0]),
        h: None,
    };
    let rate = flat_langevin(1.0);
    let a = minimize_action(&problem, &rate, None, &OptSettings::default()).unwrap();
    let wiggle = DiscretePath::from_fn(4.0, 32, |t| {
        let s = t / 4.0;
        vec![-1.0 + s + 0.2 * (3.0 * std::f64::consts::PI * s).sin()]
    })
    .unwrap();
    let b = minimize_action(&problem, &rate, Some(wiggle), &OptSettings::default()).unwrap();
    assert!(a.converged && b.converged);
    assert!((a.value - b.value).abs() < 1e-4, "{} vs {}", a.value, b.value);
}

#[test]
fn refinement_changes_value_little() {
    let coarse = quasipotential(4.0, 32);
    let fine = quasipotential(4.0, 64);
    assert!(
        ((coarse.value - fine.value) / fine.value).abs() < 0.02,
        "{} {}",
        coarse.value,
        fine.value
    );
}

#[test]
fn gradient_is_richardson_consistent() {
    let problem = PathProblem {
        horizon: 2.0,
        intervals: 16,
        x0: vec![-1.0],
        terminal: Terminal::Free,
        h: None,
    };
    let path = DiscretePath::from_fn(2.0, 16, |t| vec![-1.0 + 0.3 * t + 0.1 * t * t]).unwrap();
    let rate = flat_langevin(1.0);
    let g1 = gradient(&problem, &rate, &path, 1e-5).unwrap();
    let g2 = gradient(&problem, &rate, &path, 5e-6).unwrap();
    let scale = g2.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for (a, b) in g1.iter().zip(&g2) {
        assert!((a - b).abs() <= 1e-4 * scale);
    }
}

#[test]
fn terminal_cost_with_brownian_rate() {
    // inf e²/2 + a(e − b)² = a b²/(1 + 2a), attained on the straight line.
    let model = build_model(&ModelSpec {
        dimension: 1,
        b: vec!["0".into()],
        c: vec!["0".into()],
        sigma: vec!["1".into()],
        a: 2.0,
        x0: vec![0.0],
        ..Default::default()
    })
    .unwrap();
    let (a, b) = (1.5, 0.8);
    let h = PathFunctional::Terminal(StateFn::new(&format!("{a}*(x - {b})^2"), &model).unwrap());
    let problem = PathProblem {
        horizon: 1.0,
        intervals: 16,
        x0: vec![0.0],
        terminal: Terminal::Free,
        h: Some(h),
    };
    let r = minimize_action(&problem, &brownian(), None, &OptSettings::default()).unwrap();
    assert!(r.converged);
    assert!((r.value - a * b * b / (1.0 + 2.0 * a)).abs() < 1e-8, "{}", r.value);
    assert!((r.path.end()[0] - 2.0 * a * b / (1.0 + 2.0 * a)).abs() < 1e-6);
    assert!((r.action + r.cost - r.value).abs() < 1e-15);
    for v in r.schedule.velocities() {
        assert!((v[0] - r.path.end()[0]).abs() < 1e-6);
    }
}

#[test]
fn free_endpoint_follows_the_zero_cost_flow() {
    let model = Arc::new(
        build_model(&ModelSpec {
            dimension: 1,
            b: vec!["-dQ/dy".into()],
            c: vec!["-dV/dx".into()],
            sigma: vec!["sqrt(2)".into()],
            definitions: [
                ("Q".to_string(), "0.5*cos(2*pi*y)".to_string()),
                ("V".to_string(), "1.5*(x^2-1)^2".to_string()),
            ]
            .into(),
            a: 2.0,
            x0: vec![-0.5],
            ..Default::default()
        })
        .unwrap(),
    );
    let lat = XLattice::new(vec![-1.5], vec![1.5], vec![31]).unwrap();
    let table = Arc::new(HomogenizedTable::new(model, CellSettings { n: 64, order: 6 }, lat).unwrap());
    let rate = Regime1Rate { table };
    let problem = PathProblem {
        horizon: 1.0,
        intervals: 16,
        x0: vec![-0.5],
        terminal: Terminal::Free,
        h: None,
    };
    let r = minimize_action(&problem, &rate, None, &OptSettings::default()).unwrap();
    assert!(r.value.abs() <= 1e-6, "{}", r.value);
    assert!(r.path.end()[0] < -0.8, "{}", r.path.end()[0]);
}

#[test]
fn csv_export() {
    let r = quasipotential(2.0, 8);
    let mut out = Vec::new();
    write_csv(&mut out, &r).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,psi_1,psidot_1");
    assert_eq!(text.lines().count(), 10);
}

#[test]
fn invalid_problems_are_rejected() {
    let p = PathProblem {
        horizon: 1.0,
        intervals: 1,
        x0: vec![0.0],
        terminal: Terminal::Free,
        h: None,
    };
    assert!(minimize_action(&p, &brownian(), None, &OptSettings::default()).is_err());
}
