//! Numbered acceptance criteria. Each test prints one PASS/FAIL line; the
//! tolerances live in `msldp::selftest`.

use msldp::selftest;

fn check(id: u32) {
    let r = selftest::run(id).expect("known criterion");
    println!("{}", r.line());
    assert!(r.passed, "criterion {id} failed: {}", r.detail);
}

#[test]
fn criterion_01_cell_problem() {
    check(1);
}

#[test]
fn criterion_02_effective_diffusivity() {
    check(2);
}

#[test]
fn criterion_03_regime2_local_rate() {
    check(3);
}

#[test]
fn criterion_04_regime3_local_rate() {
    check(4);
}

#[test]
fn criterion_05_holder_inequality() {
    check(5);
}

#[test]
fn criterion_06_homogenization_limit() {
    check(6);
}

#[test]
fn criterion_07_importance_sampling() {
    check(7);
}

#[test]
fn criterion_08_ldp_slope() {
    check(8);
}

#[test]
fn criterion_09_quasipotential() {
    check(9);
}

#[test]
fn criterion_10_regime_bridge() {
    check(10);
}
