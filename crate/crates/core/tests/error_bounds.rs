use nfqs::error_bounds::*;
use nfqs::flow::{Architecture, FlowModel, QnvpModel};
use nfqs::nn::rng_from_seed;
use nfqs::oracle::grid::{unstable_state, Grid1D};
use nfqs::Error;
use num_complex::Complex64;
use statrs::function::erf::erfc;

/// Oscillator ground state `π^{-1/4} e^{-x²/2}` as a one-layer flow.
fn ground() -> FlowModel {
    let m = QnvpModel::new(1, 1, vec![], false).unwrap();
    let re = m.s_bias_offset(0, 0, false);
    let mut f = FlowModel::zeroed(Architecture::Qnvp(m)).unwrap();
    f.params.0[re] = 0.5f64.sqrt().sqrt() - 1.0;
    f
}

#[test]
fn ledger_sums_root_losses() {
    let mut l = ErrorLedger::new(BoundMode::Rigorous);
    for _ in 0..5 {
        l.accumulate(0.1, 0.0).unwrap();
    }
    assert_eq!(l.current(), 0.0);

    let mut l = ErrorLedger::new(BoundMode::Rigorous);
    l.accumulate(0.1, 1e-4).unwrap();
    l.accumulate(0.1, 4e-4).unwrap();
    assert!((l.current() - 0.003).abs() < 1e-15);
    assert_eq!(l.len(), 2);
    assert!((l.times[1] - 0.2).abs() < 1e-15);
}

#[test]
fn ledger_adds_initial_error_and_never_decreases() {
    let mut l = ErrorLedger::new(BoundMode::Rigorous).with_initial_error(0.01);
    let mut last = l.total();
    for loss in [1e-4, 0.0, 3e-3, 1e-6] {
        l.accumulate(0.1, loss).unwrap();
        assert!(l.total() >= last);
        last = l.total();
    }
    assert!((l.total() - l.current() - 0.01).abs() < 1e-15);
}

#[test]
fn random_walk_adds_in_quadrature() {
    let mut l = ErrorLedger::new(BoundMode::RandomWalk);
    l.accumulate(0.1, 9e-4).unwrap();
    l.accumulate(0.1, 16e-4).unwrap();
    assert!((l.current() - 0.005).abs() < 1e-15);
}

#[test]
fn ledger_rejects_bad_losses() {
    let mut l = ErrorLedger::new(BoundMode::Rigorous);
    assert!(matches!(l.accumulate(0.1, -1e-3), Err(Error::NegativeLoss(_))));
    assert!(l.accumulate(0.1, f64::NAN).is_err());
    assert!(l.is_empty());
}

#[test]
fn error_norm_and_observable_bound() {
    assert_eq!(state_error_norm(0.0), 0.0);
    assert!((state_error_norm(1.0) - 2f64.sqrt()).abs() < 1e-15);
    assert!((state_error_norm(0.005) - 0.1).abs() < 1e-15);
    assert_eq!(state_error_norm(5.0), 2.0);
    assert!((observable_bound(1.0, 0.1) - 0.21).abs() < 1e-15);
    assert_eq!(observable_bound(1.0, 0.0), 0.0);
    let b = ObservableBound::new(1.0, 0.3, 0.005);
    assert!((b.error_bar - 0.21).abs() < 1e-12);
}

#[test]
fn theta_of_the_gaussian_tail() {
    let flow = ground();
    let n = 1 << 16;
    let est = theta_expectation(&flow, 2.0, n, &mut rng_from_seed(4)).unwrap();
    let exact = 0.5 * erfc(2.0);
    assert!((exact - 0.00234).abs() < 1e-5);
    assert!((est.mean - exact).abs() < 3.0 * est.std_error, "{est:?} vs {exact}");

    let all = theta_expectation(&flow, -100.0, 4096, &mut rng_from_seed(5)).unwrap();
    assert_eq!(all.mean, 1.0);

    let half = theta_expectation(&flow, 0.0, n, &mut rng_from_seed(6)).unwrap();
    assert!((half.mean - 0.5).abs() < 3.0 * half.std_error, "{half:?}");
}

#[test]
fn theta_quadrature_matches_the_tail() {
    let grid = Grid1D::default();
    let (norm, theta) = theta_quadrature(&ground(), &grid, 2.0).unwrap();
    assert!((norm - 1.0).abs() < 1e-6, "{norm}");
    assert!((theta - 0.5 * erfc(2.0)).abs() < 1e-5, "{theta}");
}

#[test]
fn overlap_error_of_phase_rotations() {
    let grid = Grid1D::default();
    let psi = unstable_state(&grid).psi;
    let rot = |c: Complex64| -> Vec<Complex64> { psi.iter().map(|p| p * c).collect() };
    assert!(overlap_error(&grid, &psi, &psi).unwrap().abs() < 1e-9);
    assert!((overlap_error(&grid, &rot(Complex64::new(-1.0, 0.0)), &psi).unwrap() - 2.0).abs() < 1e-9);
    assert!((overlap_error(&grid, &rot(Complex64::i()), &psi).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn flow_overlap_against_the_oracle() {
    let grid = Grid1D::default();
    let oracle = unstable_state(&grid).psi;
    let e = overlap_error_vs_oracle(&ground(), &grid, &oracle).unwrap();
    assert!(e.abs() < 1e-6, "{e}");
}

#[test]
fn coarse_grids_are_refused() {
    let grid = Grid1D::new(-6.0, 12.0, 200).unwrap();
    let psi = vec![Complex64::new(0.0, 0.0); 200];
    assert!(matches!(overlap_error(&grid, &psi, &psi), Err(Error::GridTooCoarse { .. })));
    let fine = Grid1D::default();
    assert!(matches!(
        overlap_error(&fine, &psi, &psi),
        Err(Error::DimensionMismatch { .. })
    ));
}
