use super::*;
use crate::control::{regime1_control, Schedule};
use crate::functional::StateFn;
use crate::homogenize::{CellSettings, HomogenizedTable, XLattice};
use crate::model::{build_model, ModelSpec};
use proptest::prelude::*;

fn ou(kappa: f64) -> MultiscaleModel {
    build_model(&ModelSpec {
        dimension: 1,
        b: vec!["0.3*sin(2*pi*y)".into()],
        c: vec!["-x".into()],
        sigma: vec!["1".into()],
        a: 2.0,
        kappa: Some(kappa),
        x0: vec![0.0],
        ..Default::default()
    })
    .unwrap()
}

fn small(eps: f64, n: u64, seed: u64) -> McSettings {
    McSettings {
        horizon: 0.5,
        chunk: 64,
        ..McSettings::new(eps, n, seed)
    }
}

fn shift_control(model: &MultiscaleModel, velocity: f64) -> Arc<ControlField> {
    let lat = XLattice::new(vec![-3.0], vec![3.0], vec![7]).unwrap();
    let table =
        Arc::new(HomogenizedTable::new(Arc::new(model.clone()), CellSettings { n: 64, order: 6 }, lat).unwrap());
    Arc::new(regime1_control(table, Schedule::constant(1.0, vec![velocity]), None).unwrap())
}

#[test]
fn constant_functional_is_exact() {
    let m = ou(4.0);
    let h = PathFunctional::Constant(0.3);
    let s = small(0.25, 1000, 1);
    let control = shift_control(&m, 0.5);
    for (scheme, c) in [(Scheme::Standard, None), (Scheme::ImportanceSampling, Some(control))] {
        let e = estimate(&m, &h, &s, scheme, c).unwrap();
        assert_eq!(e.report.mean, (-0.3f64 / 0.25).exp());
        assert_eq!(e.report.variance, 0.0);
        assert_eq!(e.report.n, 1000);
        assert!(e.report.ci_low <= e.report.mean && e.report.mean <= e.report.ci_high);
    }
}

#[test]
fn reports_are_deterministic() {
    let m = ou(4.0);
    let h = PathFunctional::Terminal(StateFn::new("(x - 0.5)^2", &m).unwrap());
    let s = small(0.5, 300, 9);
    let mut a = estimate(&m, &h, &s, Scheme::Standard, None).unwrap().report;
    let mut b = estimate(&m, &h, &s, Scheme::Standard, None).unwrap().report;
    a.wall_seconds = None;
    b.wall_seconds = None;
    assert_eq!(a, b);
    assert!(a.variance >= 0.0 && a.mean > 0.0);
}

#[test]
fn disjoint_stream_ranges_pool_to_the_union() {
    let m = ou(4.0);
    let h = PathFunctional::Running(StateFn::new("x^2", &m).unwrap());
    let first = small(0.5, 200, 3);
    let second = McSettings {
        n: 136,
        first_stream: 200,
        ..first.clone()
    };
    let union = McSettings {
        n: 336,
        ..first.clone()
    };
    let a = estimate(&m, &h, &first, Scheme::Standard, None).unwrap().moments;
    let b = estimate(&m, &h, &second, Scheme::Standard, None).unwrap().moments;
    let u = estimate(&m, &h, &union, Scheme::Standard, None).unwrap().moments;
    let pooled = a.merge(&b);
    assert_eq!(pooled.n, u.n);
    assert!(((pooled.mean - u.mean) / u.mean).abs() < 1e-12);
    assert!(((pooled.m2 - u.m2) / u.m2).abs() < 1e-12);
}

#[test]
fn importance_sampling_agrees_with_plain_sampling() {
    let m = ou(4.0);
    let h = PathFunctional::Terminal(StateFn::new("2*(x - 0.6)^2", &m).unwrap());
    let s = small(0.5, 4000, 5);
    let plain = estimate(&m, &h, &s, Scheme::Standard, None).unwrap().report;
    let is = estimate(&m, &h, &s, Scheme::ImportanceSampling, Some(shift_control(&m, 1.0)))
        .unwrap()
        .report;
    let combined = (plain.std_error.powi(2) + is.std_error.powi(2)).sqrt();
    assert!(
        (plain.mean - is.mean).abs() < 3.0 * combined,
        "{} vs {}",
        plain.mean,
        is.mean
    );
}

#[test]
fn errors_are_reported() {
    let m = ou(4.0);
    let h = PathFunctional::Terminal(StateFn::new("log(x)", &m).unwrap());
    let s = small(0.5, 10, 1);
    assert!(matches!(
        estimate(&m, &h, &s, Scheme::ImportanceSampling, None),
        Err(McError::MissingControl)
    ));
    assert!(matches!(
        estimate(&m, &h, &s, Scheme::Standard, None),
        Err(McError::Sample { .. })
    ));
    let zero = PathFunctional::Constant(0.0);
    assert!(ldp_slope(&m, &zero, &[0.25, 0.5], &s, Scheme::Standard, None, 0.0).is_err());
}

#[test]
fn zero_functional_ladder() {
    let m = ou(4.0);
    let h = PathFunctional::Constant(0.0);
    let t = ldp_slope(
        &m,
        &h,
        &[0.5, 0.25, 0.125],
        &small(0.5, 100, 1),
        Scheme::Standard,
        None,
        0.0,
    )
    .unwrap();
    assert!(t.rows.iter().all(|r| r.minus_eps_log_mean == 0.0));
    assert!(t.reversals().is_empty());
    let mut out = Vec::new();
    t.write_csv(&mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap().lines().count(), 4);
}

proptest! {
    #[test]
    fn pooled_moments_match_single_pass(xs in prop::collection::vec(-1e3f64..1e3, 2..200), cut in 0usize..200) {
        let cut = cut.min(xs.len());
        let mut a = Moments::default();
        let mut b = Moments::default();
        let mut all = Moments::default();
        xs[..cut].iter().for_each(|x| a.push(*x));
        xs[cut..].iter().for_each(|x| b.push(*x));
        xs.iter().for_each(|x| all.push(*x));
        let p = a.merge(&b);
        prop_assert_eq!(p.n, all.n);
        prop_assert!((p.mean - all.mean).abs() <= 1e-9 * (1.0 + all.mean.abs()));
        prop_assert!((p.m2 - all.m2).abs() <= 1e-9 * (1.0 + all.m2.abs()));
    }
}
