use super::*;
use crate::control::{bind_feedback, regime1_control, ControlField, Schedule};
use crate::homogenize::{CellSettings, HomogenizedTable, XLattice};
use crate::model::{build_model, ModelSpec};
use std::sync::Arc;

fn model_1d(b: &str, c: &str, sigma: &str, kappa: f64, nu: Option<f64>) -> MultiscaleModel {
    build_model(&ModelSpec {
        dimension: 1,
        b: vec![b.into()],
        c: vec![c.into()],
        sigma: vec![sigma.into()],
        a: 2.0,
        kappa: Some(kappa),
        x0: vec![0.0],
        nu,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn frozen_dynamics_give_constant_path() {
    let m = model_1d("0", "0", "0", 1.0, Some(0.0));
    let p = simulate(&m, 0.5, &[0.7], 1.0, 0.005, 1, 0, None, 1).unwrap();
    assert!(p.states().iter().all(|s| s[0] == 0.7));
    assert_eq!(p.log_weight, Some(0.0));
    assert_eq!(p.intervals(), 200);
}

#[test]
fn zero_control_has_zero_weight() {
    let m = model_1d("sin(2*pi*y)", "-x", "1", 1.0, None);
    let zero = Arc::new(ControlField::Zero { dim: 1 });
    let fb = bind_feedback(zero, 0.5, m.delta(0.5), m.coefficients.period());
    let a = simulate(&m, 0.5, &[0.1], 1.0, 0.005, 3, 5, Some(&fb), 10).unwrap();
    let b = simulate(&m, 0.5, &[0.1], 1.0, 0.005, 3, 5, None, 10).unwrap();
    assert_eq!(a.log_weight, Some(0.0));
    assert_eq!(a.states(), b.states());
}

#[test]
fn step_rule_and_blow_up_are_reported() {
    let m = model_1d("0", "-x", "1", 1.0, None);
    let max = max_step(&m, 0.5);
    assert!((max - 0.0625 / 10.0).abs() < 1e-15);
    assert!(matches!(
        simulate(&m, 0.5, &[0.0], 1.0, 2.0 * max, 1, 0, None, 1),
        Err(SimError::Step { .. })
    ));
    assert!(matches!(
        simulate(&m, 0.5, &[0.0], -1.0, max, 1, 0, None, 1),
        Err(SimError::Horizon(_))
    ));
    let wild = model_1d("0", "x*x", "1", 10.0, None);
    let err = simulate(&wild, 1.0, &[10.0], 50.0, 0.5, 1, 0, None, 1).unwrap_err();
    assert!(matches!(err, SimError::NonFinite { step, .. } if step > 1));
}

#[test]
fn runs_are_reproducible_per_stream() {
    let m = model_1d("sin(2*pi*y)", "-x", "1", 1.0, None);
    let a = simulate(&m, 0.5, &[0.1], 0.5, 0.005, 42, 7, None, 1).unwrap();
    let b = simulate(&m, 0.5, &[0.1], 0.5, 0.005, 42, 7, None, 1).unwrap();
    let c = simulate(&m, 0.5, &[0.1], 0.5, 0.005, 42, 8, None, 1).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.states(), c.states());
}

#[test]
fn ornstein_uhlenbeck_moments() {
    let m = model_1d("0", "-x", "sqrt(2)", 1.0, None);
    let integ = Integrator::new(&m, 1.0, 1.0, 0.01, None).unwrap();
    let n = 100_000;
    let x0 = 1.0;
    let (mut s1, mut s2) = (0.0, 0.0);
    for k in 0..n {
        let (end, _) = integ.run_seeded(&[x0], 9, k, &mut |_| {}).unwrap();
        s1 += end[0];
        s2 += end[0] * end[0];
    }
    let mean = s1 / n as f64;
    let var = s2 / n as f64 - mean * mean;
    let want_mean = (-1.0f64).exp() * x0;
    let want_var = 1.0 - (-2.0f64).exp();
    let se_mean = (want_var / n as f64).sqrt();
    let se_var = want_var * (2.0 / n as f64).sqrt();
    assert!((mean - want_mean).abs() < 3.0 * se_mean, "{mean} vs {want_mean}");
    assert!((var - want_var).abs() < 3.0 * se_var, "{var} vs {want_var}");
}

#[test]
fn reweighting_is_unbiased() {
    let m = Arc::new(model_1d("0.5*sin(2*pi*y)", "-x", "1", 1.0, None));
    let lat = XLattice::new(vec![-3.0], vec![3.0], vec![7]).unwrap();
    let table = Arc::new(HomogenizedTable::new(m.clone(), CellSettings { n: 64, order: 6 }, lat).unwrap());
    let field = Arc::new(regime1_control(table, Schedule::constant(1.0, vec![1.0]), None).unwrap());
    let eps = 0.5;
    let fb = bind_feedback(field, eps, m.delta(eps), m.coefficients.period());
    let n = 10_000u64;
    let dt = max_step(&m, eps);
    let plain = Integrator::new(&m, eps, 1.0, dt, None).unwrap();
    let tilted = Integrator::new(&m, eps, 1.0, dt, Some(&fb)).unwrap();
    let f = |x: f64| (x - 0.3).tanh();
    let stats = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (mean, var / v.len() as f64)
    };
    let a: Vec<f64> = (0..n)
        .map(|k| f(plain.run_seeded(&[0.0], 1, k, &mut |_| {}).unwrap().0[0]))
        .collect();
    let b: Vec<f64> = (0..n)
        .map(|k| {
            let (end, lw) = tilted.run_seeded(&[0.0], 2, k, &mut |_| {}).unwrap();
            f(end[0]) * lw.exp()
        })
        .collect();
    let ((ma, va), (mb, vb)) = (stats(&a), stats(&b));
    assert!((ma - mb).abs() < 3.0 * (va + vb).sqrt(), "{ma} vs {mb}");
    // The tilt moves the controlled ensemble.
    let shifted: f64 = (0..200)
        .map(|k| tilted.run_seeded(&[0.0], 2, k, &mut |_| {}).unwrap().0[0])
        .sum::<f64>()
        / 200.0;
    assert!(shifted > 0.3);
}

#[test]
fn strong_error_shrinks_at_half_order() {
    let m = model_1d("0", "-x", "1 + 0.5*sin(x)", 1.0, None);
    let eps = 1.0;
    let fine = 1024;
    let horizon = 1.0;
    let paths = 200;
    let mut errs = [0.0; 2];
    for p in 0..paths {
        let mut rng = stream_rng(11, p);
        let sqrt_dt = (horizon / fine as f64).sqrt();
        let inc: Vec<f64> = (0..fine)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * sqrt_dt
            })
            .collect();
        let run = |steps: usize| -> f64 {
            let integ = Integrator::new(&m, eps, horizon, horizon / steps as f64, None).unwrap();
            let block = fine / steps;
            let mut k = 0;
            let mut noise = |dw: &mut [f64]| {
                dw[0] = inc[k * block..(k + 1) * block].iter().sum();
                k += 1;
            };
            integ.run(&[0.5], &mut noise, &mut |_| {}).unwrap().0[0]
        };
        let reference = run(fine);
        errs[0] += (run(16) - reference).abs();
        errs[1] += (run(32) - reference).abs();
    }
    let ratio = errs[0] / errs[1];
    assert!(ratio > 1.2 && ratio < 2.5, "{ratio}");
}

#[test]
fn occupation_mass_and_control_marginal() {
    let m = model_1d("sin(2*pi*y)", "0", "1", 1.0, None);
    let eps = 0.25;
    let horizon = 1.0;
    let dt = max_step(&m, eps);
    let p = simulate(&m, eps, &[0.0], horizon, dt, 5, 0, None, 1).unwrap();
    let z0 = 0.6;
    let controls = vec![vec![z0]; p.intervals()];
    let settings = OccupationSettings::defaults(eps, horizon);
    let window = settings.window;
    let occ = occupation_measure(&p, Some(&controls), m.delta(eps), &[1.0], settings).unwrap();
    for (t, mass) in occ.cumulative_mass() {
        assert!((mass - t).abs() <= 2.0 * window, "{t}: {mass}");
    }
    let (centers, zm) = occ.z_marginal(0);
    let peak = zm.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert!((zm[peak] - 1.0).abs() < 1e-12);
    let w = centers[1] - centers[0];
    assert!((centers[peak] - z0).abs() <= 0.5 * w);
    let ym = occ.y_marginal();
    assert_eq!(ym.len(), 32);
    assert!((ym.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn occupation_guards_cell_count() {
    let s = OccupationSettings {
        z_bins: 200,
        y_bins: 200,
        ..OccupationSettings::defaults(0.1, 1.0)
    };
    assert!(OccupationMeasure::new(2, &[1.0, 1.0], s).is_err());
}

#[test]
fn circle_distance_of_point_masses() {
    let n = 32;
    let unit = |i: usize| {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    };
    assert_eq!(circle_w1(&unit(3), &unit(3)), 0.0);
    assert!((circle_w1(&unit(0), &unit(5)) - 5.0 / 32.0).abs() < 1e-15);
    assert!((circle_w1(&unit(0), &unit(30)) - 2.0 / 32.0).abs() < 1e-15);
    let flat = vec![1.0 / n as f64; n];
    assert!((circle_w1(&flat, &flat)).abs() < 1e-15);
}
