use super::*;
use crate::homogenize::{effective_coefficients, CellSettings, XLattice};
use crate::model::{build_model, ModelSpec, Scaling};
use crate::selftest::oracle::{adaptive_simpson, linspace, occupation_lp, time_change_brute_force, LpMode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use std::f64::consts::PI;

fn model(b: &str, c: &str, sigma: &str, a: f64, gamma: Option<f64>) -> MultiscaleModel {
    build_model(&ModelSpec {
        dimension: 1,
        b: vec![b.into()],
        c: vec![c.into()],
        sigma: vec![sigma.into()],
        a,
        gamma,
        x0: vec![0.0],
        ..Default::default()
    })
    .unwrap()
}

const B: &str = "0.5*sin(2*pi*y)";
const C: &str = "0.5 + 0.3*cos(2*pi*y)";
const S: &str = "1 + 0.2*sin(2*pi*y)";

fn generic(gamma: f64) -> MultiscaleModel {
    model(B, C, S, 1.0, Some(gamma))
}

fn coeffs(y: f64) -> (f64, f64, f64) {
    let w = 2.0 * PI * y;
    (0.5 * w.sin(), 0.5 + 0.3 * w.cos(), 1.0 + 0.2 * w.sin())
}

fn lp_oracle(gamma: f64, ny: usize, zs: &[f64], mode: LpMode) -> f64 {
    occupation_lp(&coeffs, gamma, ny, zs, mode)
}

#[test]
fn regime1_examples() {
    assert_eq!(quadratic_rate(&[0.3], &[2.0], &[0.3]).unwrap().0, 0.0);
    assert!((quadratic_rate(&[0.0], &[2.0], &[1.0]).unwrap().0 - 0.25).abs() < 1e-15);
    assert!(matches!(
        quadratic_rate(&[0.0], &[-1.0], &[1.0]),
        Err(RateError::NotSpd)
    ));

    let flat = build_model(&ModelSpec {
        dimension: 1,
        b: vec!["0".into()],
        c: vec!["-dV/dx".into()],
        sigma: vec!["sqrt(2*D)".into()],
        definitions: [
            ("V".to_string(), "1.5*(x^2-1)^2".to_string()),
            ("D".to_string(), "0.8".to_string()),
        ]
        .into(),
        a: 2.0,
        x0: vec![0.0],
        ..Default::default()
    })
    .unwrap();
    let x = 0.3;
    let hom = effective_coefficients(&flat, &[x], &CellSettings::default_for(1)).unwrap();
    let beta = 0.7;
    let vp = 6.0 * x * (x * x - 1.0);
    let got = local_rate_r1(&hom, &[beta]).unwrap().value;
    assert!((got - (beta + vp).powi(2) / (4.0 * 0.8)).abs() < 1e-12);
}

#[test]
fn matrix_holder_inequality() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let d = 2;
    let nodes = 16;
    for _ in 0..1000 {
        let mu: Vec<f64> = (0..nodes).map(|_| rng.gen_range(0.05..1.0)).collect();
        let total: f64 = mu.iter().sum();
        let mu: Vec<f64> = mu.iter().map(|m| m / total).collect();
        let mut beta = DVector::<f64>::zeros(d);
        let mut q = DMatrix::<f64>::zeros(d, d);
        let mut cost = 0.0;
        for m in &mu {
            let kappa = DMatrix::<f64>::from_fn(d, d, |_, _| rng.gen_range(-2.0..2.0)) + DMatrix::identity(d, d) * 2.5;
            let u = DVector::<f64>::from_fn(d, |_, _| rng.gen_range(-3.0..3.0));
            beta += &kappa * &u * *m;
            q += &kappa * kappa.transpose() * *m;
            cost += u.norm_squared() * m;
        }
        let lhs = beta.dot(&q.cholesky().unwrap().solve(&beta));
        assert!(lhs <= cost + 1e-12, "{lhs} > {cost}");
    }
}

#[test]
fn constant_coefficient_dual() {
    let (sigma0, gamma) = (1.3, 0.8);
    let m = model("0", "0", &sigma0.to_string(), 1.0, Some(gamma));
    let s = R2Settings::default();
    for zeta in [-1.0, 0.0, 0.4, 2.0] {
        let sol = dual_r2(&m, 0.0, zeta, &s).unwrap();
        assert!((sol.htilde + sigma0 * sigma0 * zeta * zeta / 2.0).abs() < 1e-9);
        assert!((sol.h + sol.htilde).abs() < 1e-15);
        assert!(sol.residual <= 1e-7);
    }
    let r = local_rate_r2(&m, 0.0, 0.9, &s).unwrap();
    assert!((r.value - 0.81 / (2.0 * sigma0 * sigma0)).abs() < 1e-9);
    assert!((r.dual.value().unwrap() - 0.9 / (sigma0 * sigma0)).abs() < 1e-6);
    match &r.control {
        RateControl::Regime2(sol) => {
            for u in &sol.control {
                assert!((u - 0.9 / sigma0).abs() < 1e-6);
            }
        }
        _ => panic!(),
    }
}

#[test]
fn zero_slope_has_zero_dual() {
    let sol = dual_r2(&generic(1.0), 0.0, 0.0, &R2Settings::default()).unwrap();
    assert!(sol.htilde.abs() < 1e-10);
    assert!(sol.psi.iter().all(|p| (p - 1.0).abs() < 1e-9));
}

#[test]
fn dual_requires_regime_two() {
    let m = model(B, C, S, 2.0, None);
    assert!(matches!(
        dual_r2(&m, 0.0, 0.1, &R2Settings::default()),
        Err(RateError::Unsupported(_))
    ));
}

#[test]
fn dual_matches_occupation_measure_program() {
    let gamma = 1.0;
    let m = generic(gamma);
    let zs = linspace(-1.5, 1.5, 65);
    for zeta in [0.3, 0.8] {
        let sol = dual_r2(&m, 0.0, zeta, &R2Settings::default()).unwrap();
        assert!(sol.residual <= 1e-7, "{}", sol.residual);
        let lp = lp_oracle(gamma, 64, &zs, LpMode::Dual(zeta));
        assert!((sol.htilde - lp).abs() <= 1e-3, "ζ={zeta}: {} vs {lp}", sol.htilde);
    }
}

#[test]
fn rate_matches_occupation_measure_program() {
    let gamma = 1.0;
    let m = generic(gamma);
    let beta = 1.2;
    let r = local_rate_r2(&m, 0.0, beta, &R2Settings::default()).unwrap();
    let lp = lp_oracle(gamma, 16, &linspace(-1.5, 1.5, 9), LpMode::Rate(beta));
    assert!(((r.value - lp) / lp).abs() <= 0.05, "{} vs {lp}", r.value);
}

#[test]
fn zero_cost_velocity_and_duality() {
    let gamma = 1.0;
    let m = generic(gamma);
    let s = R2Settings::default();
    // β₀ = ∫ (γb + c) dμ₀.
    let grid = TorusGrid::new(1, s.n).unwrap();
    let gen =
        torus::assemble_generator(Regime::Two { gamma }, &m, &[0.0], torus::ControlInput::Zero, &grid, 6).unwrap();
    let mu0 = torus::stationary_density(&gen).unwrap();
    let beta0 = torus::quadrature(
        &grid
            .sample(|y| {
                let (b, c, _) = coeffs(y[0]);
                gamma * b + c
            })
            .iter()
            .zip(&mu0)
            .map(|(a, b)| a * b)
            .collect::<Vec<_>>(),
    );
    let r = local_rate_r2(&m, 0.0, beta0, &s).unwrap();
    assert!(r.value < 1e-12, "{}", r.value);
    assert!(r.dual.value().unwrap().abs() < 1e-6);

    for beta in [0.2, 1.0, 1.5] {
        let r = local_rate_r2(&m, 0.0, beta, &s).unwrap();
        let z = r.dual.value().unwrap();
        let sol = dual_r2(&m, 0.0, z, &s).unwrap();
        assert!((r.value - (z * beta - sol.h)).abs() <= 1e-6);
    }
}

#[test]
fn regime2_control_attains_rate() {
    // Under the returned control the fast motion has mean velocity β and
    // average cost ½∫ū² = L₂(β).
    let gamma = 1.0;
    let m = generic(gamma);
    let s = R2Settings::default();
    let beta = 1.1;
    let r = local_rate_r2(&m, 0.0, beta, &s).unwrap();
    let sol = match &r.control {
        RateControl::Regime2(sol) => sol.clone(),
        _ => panic!(),
    };
    let grid = sol.grid.clone();
    let gen = torus::assemble_generator(
        Regime::Two { gamma },
        &m,
        &[0.0],
        torus::ControlInput::Field(&sol.control),
        &grid,
        6,
    )
    .unwrap();
    let mu = torus::stationary_density(&gen).unwrap();
    let vel: Vec<f64> = (0..grid.len())
        .map(|j| {
            let (b, c, sg) = coeffs(grid.node(j)[0]);
            (gamma * b + c + sg * sol.control[j]) * mu[j]
        })
        .collect();
    let cost: Vec<f64> = (0..grid.len()).map(|j| 0.5 * sol.control[j].powi(2) * mu[j]).collect();
    assert!((torus::quadrature(&vel) - beta).abs() < 1e-6);
    assert!((torus::quadrature(&cost) - r.value).abs() < 1e-6);
}

#[test]
fn regime2_approaches_regime3_as_gamma_vanishes() {
    let m3 = model(B, C, S, 0.5, None);
    let beta = 1.0;
    let l3 = local_rate_r3(&m3, 0.0, beta, R3_DEFAULT_N).unwrap().value;
    let settings = R2Settings {
        n: 512,
        ..Default::default()
    };
    let gaps: Vec<f64> = [1.0, 0.1, 0.01]
        .iter()
        .map(|&g| (local_rate_r2_gamma(&m3, g, 0.0, beta, &settings).unwrap().value - l3).abs())
        .collect();
    assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
    assert!(gaps[2] / l3 <= 0.05, "{gaps:?} vs {l3}");
}

#[test]
fn regime3_closed_forms() {
    let m = model("0", "0", "1", 0.5, None);
    assert!((local_rate_r3(&m, 0.0, 2.0, 256).unwrap().value - 2.0).abs() < 1e-12);
    let m = model("0", "0", "1 + 0.5*cos(2*pi*y)", 0.5, None);
    let inv_sigma_mean = 1.0 / (1.0f64 - 0.25).sqrt();
    for beta in [0.5, -1.3] {
        let got = local_rate_r3(&m, 0.0, beta, 1024).unwrap().value;
        let want = 0.5 * beta * beta * inv_sigma_mean * inv_sigma_mean;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
    let m = model("0", "0.3", "1", 0.5, None);
    let r = local_rate_r3(&m, 0.0, 1.0, 256).unwrap();
    assert!((r.value - 0.245).abs() < 1e-12);
    assert!((r.dual.value().unwrap() - 0.455).abs() < 1e-12);
    assert!(matches!(local_rate_r3(&m, 0.0, 0.0, 256), Err(RateError::BetaZero)));
}

#[test]
fn regime3_matches_brute_force() {
    let n = 256;
    let cases = [
        ("0.3", "1", 1.0),
        (C, S, 1.0),
        (C, S, 0.3),
        ("0.2*sin(2*pi*y)", "1", -0.8),
    ];
    for (c_src, s_src, beta) in cases {
        let m = model("0", c_src, s_src, 0.5, None);
        let g = TorusGrid::new(1, n).unwrap();
        let c = g.sample(|y| m.coefficients.eval(&[0.0], y).c[0]);
        let sig = g.sample(|y| m.coefficients.eval(&[0.0], y).sigma[0]);
        let (cr, b) = if beta < 0.0 {
            (c.iter().map(|v| -v).collect::<Vec<_>>(), -beta)
        } else {
            (c.clone(), beta)
        };
        let brute = time_change_brute_force(&cr, &sig, b);
        let got = local_rate_r3(&m, 0.0, beta, n).unwrap().value;
        assert!((got - brute).abs() <= 1e-4, "{c_src}, β={beta}: {got} vs {brute}");
    }
}

#[test]
fn regime3_reflection_symmetry() {
    let a = model("0", C, S, 0.5, None);
    let b = model("0", "-(0.5 + 0.3*cos(2*pi*y))", S, 0.5, None);
    let la = local_rate_r3(&a, 0.0, 0.7, 512).unwrap().value;
    let lb = local_rate_r3(&b, 0.0, -0.7, 512).unwrap().value;
    assert!((la - lb).abs() < 1e-13);
}

fn straight(horizon: f64, m: usize, from: f64, to: f64) -> DiscretePath {
    DiscretePath::from_fn(horizon, m, |t| vec![from + (to - from) * t / horizon]).unwrap()
}

fn langevin_flat_rate(d: f64) -> impl LocalRate {
    FnRate {
        dim: 1,
        f: move |x: &[f64], beta: &[f64]| {
            let vp = 6.0 * x[0] * (x[0] * x[0] - 1.0);
            Ok(quadratic_rate(&[-vp], &[2.0 * d], beta)?.0)
        },
    }
}

#[test]
fn action_examples() {
    let rate = langevin_flat_rate(1.0);
    let still = DiscretePath::from_fn(1.0, 10, |_| vec![1.0]).unwrap();
    assert_eq!(action(&still, &rate), 0.0);

    // Forward flow ẋ = −V′(x) from 0.5, integrated finely with RK4.
    let f = |x: f64| -6.0 * x * (x * x - 1.0);
    let m = 100;
    let mut states = vec![vec![0.5]];
    let sub = 50;
    let dt = 1.0 / (m * sub) as f64;
    let mut x = 0.5;
    for k in 0..m * sub {
        let k1 = f(x);
        let k2 = f(x + 0.5 * dt * k1);
        let k3 = f(x + 0.5 * dt * k2);
        let k4 = f(x + dt * k3);
        x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (k + 1) % sub == 0 {
            states.push(vec![x]);
        }
    }
    let flow = DiscretePath::new(1.0 / m as f64, states).unwrap();
    assert!(action(&flow, &rate) < 1e-6);

    let path = straight(1.0, 400, -1.0, 0.0);
    let d = 1.0;
    let exact = adaptive_simpson(
        &|t: f64| {
            let x = -1.0 + t;
            (1.0 + 6.0 * x * (x * x - 1.0)).powi(2) / (4.0 * d)
        },
        0.0,
        1.0,
        1e-12,
    );
    let got = action(&path, &rate);
    assert!(((got - exact) / exact).abs() < 1e-5, "{got} vs {exact}");
}

#[test]
fn action_with_homogenized_table_and_failure_marker() {
    let m = Arc::new(
        build_model(&ModelSpec {
            dimension: 1,
            b: vec!["-dQ/dy".into()],
            c: vec!["-dV/dx".into()],
            sigma: vec!["sqrt(2)".into()],
            definitions: [
                ("Q".to_string(), "cos(2*pi*y)".to_string()),
                ("V".to_string(), "1.5*(x^2-1)^2".to_string()),
            ]
            .into(),
            a: 2.0,
            x0: vec![-1.0],
            ..Default::default()
        })
        .unwrap(),
    );
    let lat = XLattice::new(vec![-1.2], vec![1.2], vec![25]).unwrap();
    let table = Arc::new(HomogenizedTable::new(m, CellSettings { n: 128, order: 6 }, lat).unwrap());
    let rate = Regime1Rate { table };
    let still = DiscretePath::from_fn(1.0, 8, |_| vec![-1.0]).unwrap();
    assert!(action(&still, &rate) < 1e-20);
    let outside = straight(1.0, 8, 0.0, 2.0);
    assert_eq!(action(&outside, &rate), f64::INFINITY);
    assert!(action_checked(&outside, &rate).is_err());
}

#[test]
fn csv_rows() {
    let m = model("0", "0.3", "1", 0.5, None);
    let r = local_rate_r3(&m, 0.0, 1.0, 64).unwrap();
    let mut out = Vec::new();
    write_csv(&mut out, &[r]).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert!(text.starts_with("x_1,beta_1,L,dual\n"));
    assert_eq!(text.lines().nth(1).unwrap().split(',').count(), 4);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn regime1_is_convex(b1 in -3.0f64..3.0, b2 in -3.0f64..3.0, a in 0.0f64..1.0, r in -1.0f64..1.0, q in 0.1f64..3.0) {
        let l = |b: f64| quadratic_rate(&[r], &[q], &[b]).unwrap().0;
        prop_assert!(l(a * b1 + (1.0 - a) * b2) <= a * l(b1) + (1.0 - a) * l(b2) + 1e-8);
    }

    #[test]
    fn regime2_is_convex(b1 in -0.5f64..2.0, b2 in -0.5f64..2.0, a in 0.0f64..1.0) {
        let m = generic(1.0);
        let s = R2Settings { n: 128, ..Default::default() };
        let l = |b: f64| local_rate_r2(&m, 0.0, b, &s).unwrap().value;
        prop_assert!(l(a * b1 + (1.0 - a) * b2) <= a * l(b1) + (1.0 - a) * l(b2) + 1e-8);
    }

    #[test]
    fn regime3_is_convex(b1 in 0.05f64..3.0, b2 in 0.05f64..3.0, a in 0.0f64..1.0) {
        let m = model("0", C, S, 0.5, None);
        let l = |b: f64| local_rate_r3(&m, 0.0, b, 256).unwrap().value;
        prop_assert!(l(a * b1 + (1.0 - a) * b2) <= a * l(b1) + (1.0 - a) * l(b2) + 1e-8);
    }

    #[test]
    fn regime2_is_nonnegative_with_small_residual(beta in -1.0f64..2.5) {
        let m = generic(1.0);
        let r = local_rate_r2(&m, 0.0, beta, &R2Settings { n: 128, ..Default::default() }).unwrap();
        prop_assert!(r.value >= 0.0);
        if let RateControl::Regime2(sol) = &r.control {
            prop_assert!(sol.residual <= 1e-7, "{}", sol.residual);
        }
    }
}

#[test]
fn scaling_switch_keeps_coefficients() {
    let m = generic(1.0);
    let m2 = m.with_scaling(Scaling { a: 1.0, kappa: 2.0 }).unwrap();
    assert_eq!(m2.gamma(), Some(0.5));
}
