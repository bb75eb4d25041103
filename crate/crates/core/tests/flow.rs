use std::f64::consts::{E, PI};

use approx::assert_abs_diff_eq;
use nfqs::autodiff::{Mat, Tape};
use nfqs::flow::{Architecture, FlowModel, QcnfModel, QnvpModel};
use nfqs::nn::{rng_from_seed, ParamKind, ParamVector};
use nfqs::Error;
use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

fn qnvp(n: usize, depth: usize, hidden: Vec<usize>) -> QnvpModel {
    QnvpModel::new(n, depth, hidden, false).unwrap()
}

fn random_qnvp(n: usize, depth: usize, scale: f64, seed: u64) -> FlowModel {
    let arch = Architecture::Qnvp(QnvpModel::new(n, depth, vec![8], true).unwrap());
    FlowModel::init_with_scale(arch, scale, &mut rng_from_seed(seed)).unwrap()
}

fn random_qcnf(n: usize, n_steps: usize, scale: f64, seed: u64) -> FlowModel {
    let arch = Architecture::Qcnf(QcnfModel::new(n, vec![8], false, n_steps).unwrap());
    FlowModel::init_with_scale(arch, scale, &mut rng_from_seed(seed)).unwrap()
}

fn trapezoid(f: &[f64], dx: f64) -> f64 {
    let n = f.len();
    dx * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[n - 1]))
}

fn norm_1d(flow: &FlowModel) -> f64 {
    let n = 8192;
    let dx = 24.0 / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| -12.0 + i as f64 * dx).collect();
    let psi = flow.psi_1d(&xs).unwrap();
    trapezoid(&psi.iter().map(|p| p.norm_sqr()).collect::<Vec<_>>(), dx)
}

fn gauss_log(y: &[f64]) -> f64 {
    -(y.len() as f64) / 4.0 * (2.0 * PI).ln() - y.iter().map(|v| v * v).sum::<f64>() / 4.0
}

#[test]
fn identity_coupling() {
    let m = qnvp(3, 1, vec![]);
    let f = FlowModel::zeroed(Architecture::Qnvp(m)).unwrap();
    let y = [0.3, -1.2, 0.7];
    let e = f.forward(&y).unwrap();
    assert_eq!(e.x, y.to_vec());
    assert_eq!(e.phase, 0.0);
    assert_abs_diff_eq!(e.log_abs_psi, gauss_log(&y), epsilon = 1e-15);
}

#[test]
fn constant_real_scaling_two_coords() {
    let m = qnvp(2, 1, vec![]);
    assert_eq!(m.layers[0].mask.0, vec![true, false]);
    let off = m.s_bias_offset(0, 1, false);
    let mut f = FlowModel::zeroed(Architecture::Qnvp(m)).unwrap();
    f.params.0[off] = 1.0;
    let e = f.forward(&[0.5, 1.0]).unwrap();
    assert_abs_diff_eq!(e.x[0], 0.5, epsilon = 1e-15);
    assert_abs_diff_eq!(e.x[1], 4.0, epsilon = 1e-15);
    assert_abs_diff_eq!(e.phase, 0.0);
    assert_abs_diff_eq!(e.log_abs_psi, gauss_log(&[0.5, 1.0]) - 0.5 * 4.0_f64.ln(), epsilon = 1e-14);
}

#[test]
fn unit_modulus_scaling_only_rotates_phase() {
    let m = qnvp(2, 1, vec![]);
    let (re, im) = (m.s_bias_offset(0, 1, false), m.s_bias_offset(0, 1, true));
    let mut f = FlowModel::zeroed(Architecture::Qnvp(m)).unwrap();
    f.params.0[re] = -1.0;
    f.params.0[im] = 1.0;
    let e = f.forward(&[0.5, 1.0]).unwrap();
    assert_abs_diff_eq!(e.x[1], 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(e.phase, PI / 2.0, epsilon = 1e-15);
    assert_abs_diff_eq!(e.log_abs_psi, gauss_log(&[0.5, 1.0]), epsilon = 1e-15);
}

#[test]
fn vanishing_scale_is_reported() {
    let m = qnvp(2, 1, vec![]);
    let re = m.s_bias_offset(0, 1, false);
    let mut f = FlowModel::zeroed(Architecture::Qnvp(m)).unwrap();
    f.params.0[re] = -1.0;
    match f.forward(&[0.5, 1.0]) {
        Err(Error::ScalePinch { layer: 0, coord: 1, .. }) => {}
        other => panic!("expected ScalePinch, got {other:?}"),
    }
}

#[test]
fn phases_add_across_layers() {
    let m = qnvp(2, 2, vec![]);
    let offs = [
        (m.s_bias_offset(0, 1, false), m.s_bias_offset(0, 1, true)),
        (m.s_bias_offset(1, 0, false), m.s_bias_offset(1, 0, true)),
    ];
    let mut f = FlowModel::zeroed(Architecture::Qnvp(m)).unwrap();
    let angles = [0.4, -1.1];
    for ((re, im), a) in offs.iter().zip(angles) {
        f.params.0[*re] = 2.0 * f64::cos(a) - 1.0;
        f.params.0[*im] = 2.0 * f64::sin(a);
    }
    let e = f.forward(&[0.1, 0.2]).unwrap();
    assert_abs_diff_eq!(e.phase, angles[0] + angles[1], epsilon = 1e-14);
}

#[test]
fn invalid_models_rejected() {
    assert!(QnvpModel::new(3, 0, vec![8], false).is_err());
    assert!(QnvpModel::new(0, 2, vec![8], false).is_err());
    // A single layer leaves odd coordinates untouched.
    assert!(QnvpModel::new(3, 1, vec![8], false).is_ok());
    let mut m = qnvp(3, 2, vec![]);
    m.layers[1].mask = m.layers[0].mask.clone();
    assert!(m.validate().is_err());
    assert!(QcnfModel::new(2, vec![4], false, 0).is_err());
}

#[test]
fn identity_coupling_samples_are_standard_normal() {
    let f = FlowModel::zeroed(Architecture::Qnvp(qnvp(2, 2, vec![4]))).unwrap();
    let s = f.sample(1 << 15, &mut rng_from_seed(1)).unwrap();
    let n = s.len() as f64;
    for c in 0..2 {
        let col = s.x.column(c);
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // Standard error of a sample variance of a unit Gaussian is sqrt(2/n).
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n).sqrt(), "var {var}");
    }
}

#[test]
fn quarter_scaling_gives_sixteenth_variance() {
    let m = qnvp(1, 1, vec![]);
    let re = m.s_bias_offset(0, 0, false);
    let mut f = FlowModel::zeroed(Architecture::Qnvp(m)).unwrap();
    f.params.0[re] = -0.5;
    let s = f.sample(1 << 15, &mut rng_from_seed(2)).unwrap();
    let n = s.len() as f64;
    let var = s.x.iter().map(|v| v * v).sum::<f64>() / n;
    let target = 1.0 / 16.0;
    assert!((var - target).abs() < 3.0 * target * (2.0 / n).sqrt(), "var {var}");
}

#[test]
fn one_dimensional_flows_are_normalized() {
    for seed in 0..3 {
        let f = random_qnvp(1, 4, 0.3, seed);
        assert!((norm_1d(&f) - 1.0).abs() < 1e-3);
        let f = random_qcnf(1, 16, 0.6, seed);
        assert!((norm_1d(&f) - 1.0).abs() < 1e-3);
    }
}

fn histogram_chi2(flow: &FlowModel, seed: u64) -> f64 {
    let n_samples = 1 << 15;
    let s = flow.sample(n_samples, &mut rng_from_seed(seed)).unwrap();
    let (lo, hi, bins) = (-3.0, 3.0, 24);
    let w = (hi - lo) / bins as f64;
    let mut counts = vec![0.0; bins];
    for &x in s.x.iter() {
        if x >= lo && x < hi {
            counts[((x - lo) / w) as usize] += 1.0;
        }
    }
    let mut chi2 = 0.0;
    let mut used = 0;
    for (b, c) in counts.iter().enumerate() {
        let sub = 64;
        let xs: Vec<f64> = (0..=sub).map(|k| lo + w * (b as f64 + k as f64 / sub as f64)).collect();
        let p: Vec<f64> = flow.psi_1d(&xs).unwrap().iter().map(|z| z.norm_sqr()).collect();
        let expect = trapezoid(&p, w / sub as f64) * n_samples as f64;
        if expect > 20.0 {
            chi2 += (c - expect).powi(2) / expect;
            used += 1;
        }
    }
    chi2 / used as f64
}

#[test]
fn sample_histogram_matches_density() {
    let chi = histogram_chi2(&random_qnvp(1, 2, 0.6, 7), 70);
    assert!(chi < 2.5, "qnvp chi2/bin {chi}");
    let chi = histogram_chi2(&random_qcnf(1, 8, 0.8, 8), 80);
    assert!(chi < 2.5, "qcnf chi2/bin {chi}");
}

#[test]
fn qnvp_logdet_matches_finite_difference_jacobian() {
    let f = random_qnvp(4, 2, 0.5, 3);
    let d = f.logdet_check(&[0.3, -0.8, 1.1, 0.2], 1e-6).unwrap();
    assert!(d < 1e-6, "{d}");
    let id = FlowModel::zeroed(Architecture::Qnvp(qnvp(4, 2, vec![]))).unwrap();
    assert!(id.logdet_check(&[0.3, -0.8, 1.1, 0.2], 1e-6).unwrap() < 1e-9);
    let m = qnvp(2, 1, vec![]);
    let off = m.s_bias_offset(0, 1, false);
    let mut c = FlowModel::zeroed(Architecture::Qnvp(m)).unwrap();
    c.params.0[off] = 0.7;
    assert!(c.logdet_check(&[0.4, -0.2], 1e-6).unwrap() < 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]
    #[test]
    fn qnvp_logdet_property(n in 1usize..=8, depth in 1usize..=4, seed in 0u64..1000, y in prop::collection::vec(-2.0f64..2.0, 8)) {
        let depth = if n > 1 { depth.max(2) } else { depth };
        let f = random_qnvp(n, depth, 0.5, seed);
        let d = f.logdet_check(&y[..n], 1e-3).unwrap();
        prop_assert!(d < 1e-6, "discrepancy {}", d);
    }
}

fn linear_field(n: usize, a: &[f64], phase_rate: f64) -> FlowModel {
    let m = QcnfModel::new(n, vec![], false, 16).unwrap();
    let spec = m.field.clone();
    let mut f = FlowModel::zeroed(Architecture::Qcnf(m)).unwrap();
    for i in 0..n {
        for j in 0..n {
            f.params.0[spec.offset(0, ParamKind::Weight, i * n + j).unwrap()] = a[i * n + j];
        }
    }
    f.params.0[spec.offset(0, ParamKind::Bias, n).unwrap()] = phase_rate;
    f
}

#[test]
fn qcnf_zero_field_is_identity() {
    let f = FlowModel::zeroed(Architecture::Qcnf(QcnfModel::new(2, vec![4], true, 16).unwrap())).unwrap();
    let y = [0.2, -0.9];
    let e = f.forward(&y).unwrap();
    assert_eq!(e.x, y.to_vec());
    assert_eq!(e.phase, 0.0);
    assert_abs_diff_eq!(e.log_abs_psi, gauss_log(&y), epsilon = 1e-15);
}

#[test]
fn qcnf_linear_contraction() {
    let n = 3;
    let mut a = vec![0.0; 9];
    for i in 0..n {
        a[i * n + i] = -1.0;
    }
    let f = linear_field(n, &a, 0.0);
    let y = [0.5, -1.0, 2.0];
    let e = f.forward(&y).unwrap();
    for i in 0..n {
        // RK4 with 16 steps: global error ~ h^4/120 relative.
        assert!((e.x[i] - y[i] / E).abs() < 1e-6 * y[i].abs());
    }
    // Constant divergence -N integrates exactly.
    assert_abs_diff_eq!(e.log_abs_psi, gauss_log(&y) + 1.5, epsilon = 1e-13);
}

#[test]
fn qcnf_constant_phase_rate() {
    let f = linear_field(2, &[0.0; 4], 0.37);
    let e = f.forward(&[0.1, 0.2]).unwrap();
    assert_eq!(e.x, vec![0.1, 0.2]);
    assert_abs_diff_eq!(e.phase, 0.37, epsilon = 1e-15);
}

#[test]
fn qcnf_phase_is_linear_in_phase_output() {
    let f = random_qcnf(2, 16, 0.7, 4);
    let Architecture::Qcnf(m) = &f.arch else { unreachable!() };
    let spec = m.field.clone();
    let out_layer = spec.hidden_widths.len();
    let hidden = spec.hidden_widths[0];
    let mut g = f.clone();
    let lambda = -2.5;
    for j in 0..hidden {
        let o = spec.offset(out_layer, ParamKind::Weight, 2 * hidden + j).unwrap();
        g.params.0[o] *= lambda;
    }
    let o = spec.offset(out_layer, ParamKind::Bias, 2).unwrap();
    g.params.0[o] *= lambda;
    let (a, b) = (f.forward(&[0.3, -0.4]).unwrap(), g.forward(&[0.3, -0.4]).unwrap());
    assert_eq!(a.x, b.x);
    assert_abs_diff_eq!(b.phase, lambda * a.phase, epsilon = 1e-14);
}

#[test]
fn qcnf_trace_examples() {
    let a = [0.3, -1.0, 2.0, 0.5, -0.7, 0.1, 1.5, 0.2, 1.1];
    let f = linear_field(3, &a, 0.0);
    let Architecture::Qcnf(m) = &f.arch else { unreachable!() };
    assert_abs_diff_eq!(m.trace_hessian(&f.params, &[0.4, 0.1, -2.0]).unwrap(), 0.7, epsilon = 1e-14);

    let c = QcnfModel::new(3, vec![], false, 4).unwrap();
    let spec = c.field.clone();
    let mut params = ParamVector::zeros(c.param_count());
    for k in 0..4 {
        params.0[spec.offset(0, ParamKind::Bias, k).unwrap()] = 0.3 * k as f64 + 0.1;
    }
    assert_eq!(c.trace_hessian(&params, &[1.0, 2.0, 3.0]).unwrap(), 0.0);

    let r = random_qcnf(3, 4, 0.9, 5);
    let Architecture::Qcnf(m) = &r.arch else { unreachable!() };
    let z = [0.3, -0.6, 0.9];
    let exact = m.trace_hessian(&r.params, &z).unwrap();
    let h = 1e-5;
    let field_at = |p: &[f64]| {
        nfqs::nn::mlp_apply(&m.field, &r.params, p).unwrap()
    };
    let mut fd = 0.0;
    for i in 0..3 {
        let mut zp = z;
        let mut zm = z;
        zp[i] += h;
        zm[i] -= h;
        fd += (field_at(&zp)[i] - field_at(&zm)[i]) / (2.0 * h);
    }
    assert!(((exact - fd) / exact).abs() < 1e-6, "{exact} vs {fd}");
}

#[test]
fn qcnf_trace_logdet_matches_full_jacobian() {
    for (n, seed) in [(1, 1u64), (2, 2), (4, 3), (6, 4)] {
        let f = random_qcnf(n, 256, 1.0, seed);
        let Architecture::Qcnf(m) = &f.arch else { unreachable!() };
        let y: Vec<f64> = (0..n).map(|i| 0.7 * (i as f64 - 1.3)).collect();
        let brute = m.jacobian_logdet(&f.params, &y).unwrap();
        let e = f.forward(&y).unwrap();
        let traced = -2.0 * (e.log_abs_psi - gauss_log(&y));
        assert!((brute - traced).abs() < 1e-5, "n={n}: {brute} vs {traced}");
    }
}

#[test]
fn qcnf_samples() {
    let f = FlowModel::zeroed(Architecture::Qcnf(QcnfModel::new(1, vec![4], false, 4).unwrap())).unwrap();
    let s = f.sample(1 << 14, &mut rng_from_seed(9)).unwrap();
    let mut xs: Vec<f64> = s.x.iter().copied().collect();
    xs.sort_by(f64::total_cmp);
    let nrm = Normal::new(0.0, 1.0).unwrap();
    let n = xs.len() as f64;
    let ks = xs
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let c = nrm.cdf(x);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max);
    // 1% critical value of the one-sample KS statistic.
    assert!(ks < 1.628 / n.sqrt(), "KS {ks}");

    let mut a = vec![0.0; 4];
    a[0] = -1.0;
    a[3] = -1.0;
    let f = linear_field(2, &a, 0.0);
    let s = f.sample(1 << 15, &mut rng_from_seed(10)).unwrap();
    let target = (-2.0f64).exp();
    for c in 0..2 {
        let var = s.x.column(c).iter().map(|v| v * v).sum::<f64>() / s.len() as f64;
        assert!((var - target).abs() < 3.0 * target * (2.0 / s.len() as f64).sqrt(), "var {var}");
    }
}

fn fd_param_check(f: &FlowModel, y: &[f64]) {
    let n = f.n_dof();
    let tape = Tape::new();
    let w = f.bind(&tape, true);
    let yv = tape.constant(Mat::from_shape_vec((1, n), y.to_vec()).unwrap());
    let ev = f.eval(&w, &yv).unwrap();
    let out = ev.log_abs_psi.add(&ev.phase.scale(0.3));
    let g = tape.backward(&out);
    let mut grad = vec![0.0; f.params.len()];
    nfqs::nn::gather_grads(&w, &g, &mut grad);
    let h = 1e-5;
    for k in (0..f.params.len()).step_by(3) {
        let mut p = f.clone();
        p.params.0[k] += h;
        let a = p.forward(y).unwrap();
        p.params.0[k] -= 2.0 * h;
        let b = p.forward(y).unwrap();
        let fd = ((a.log_abs_psi + 0.3 * a.phase) - (b.log_abs_psi + 0.3 * b.phase)) / (2.0 * h);
        let err = (fd - grad[k]).abs() / fd.abs().max(1e-3);
        assert!(err < 1e-4, "param {k}: {} vs {fd}", grad[k]);
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    fd_param_check(&random_qnvp(3, 2, 0.5, 11), &[0.2, -0.5, 0.9]);
    fd_param_check(&random_qcnf(2, 8, 0.8, 12), &[0.4, -0.3]);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    for f in [random_qnvp(3, 2, 0.5, 21), random_qcnf(2, 8, 0.5, 22)] {
        let s = f.to_json().unwrap();
        let g = FlowModel::from_json(&s).unwrap();
        assert_eq!(f, g);
        for (a, b) in f.params.0.iter().zip(&g.params.0) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
    assert!(FlowModel::from_json("{\"format_version\":99}").is_err());
    let bad = random_qnvp(2, 2, 0.5, 1).to_json().unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
    assert!(matches!(FlowModel::from_json(&bad), Err(Error::Checkpoint(_))));
}

#[test]
fn inversion_recovers_base_points() {
    for f in [random_qnvp(1, 3, 0.8, 31), random_qnvp(3, 3, 0.5, 32), random_qcnf(1, 8, 0.8, 33), random_qcnf(2, 8, 0.6, 34)] {
        let s = f.sample(64, &mut rng_from_seed(35)).unwrap();
        let y = f.invert(&s.x, None).unwrap();
        let diff = (&y - &s.y).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        assert!(diff < 1e-9, "{diff}");
    }
}

#[test]
fn x_gradients_match_finite_differences() {
    for f in [random_qnvp(2, 2, 0.6, 41), random_qcnf(2, 8, 0.8, 42)] {
        let y0 = [0.3, -0.7];
        let tape = Tape::no_grad();
        let w = f.bind(&tape, false);
        let g = f
            .x_gradients(&w, &tape.constant(Mat::from_shape_vec((1, 2), y0.to_vec()).unwrap()))
            .unwrap();
        let x0 = g.x.value().clone();
        let h = 1e-5;
        for i in 0..2 {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[[0, i]] += h;
            xm[[0, i]] -= h;
            let (p, m) = (f.psi_at(&xp).unwrap()[0], f.psi_at(&xm).unwrap()[0]);
            let dl = (p.norm().ln() - m.norm().ln()) / (2.0 * h);
            let dp = (p.arg() - m.arg()) / (2.0 * h);
            assert!((dl - g.grad_log.value()[[0, i]]).abs() < 1e-6, "{dl}");
            assert!((dp - g.grad_phase.value()[[0, i]]).abs() < 1e-6, "{dp}");
        }
    }
}

#[test]
fn second_x_derivatives_match_finite_differences() {
    for f in [random_qnvp(1, 3, 0.8, 51), random_qcnf(1, 8, 0.8, 52)] {
        let tape = Tape::no_grad();
        let w = f.bind(&tape, false);
        let d = f.x_derivs_1d(&w, &tape.constant(Mat::from_elem((1, 1), 0.4))).unwrap();
        let x0 = d.x.item();
        let h = 1e-3;
        let xs = [x0 - 2.0 * h, x0 - h, x0, x0 + h, x0 + 2.0 * h];
        let psi = f.psi_1d(&xs).unwrap();
        let l: Vec<f64> = psi.iter().map(|p| p.norm().ln()).collect();
        let ph: Vec<f64> = psi.iter().map(|p| p.arg()).collect();
        let d1 = |v: &[f64]| (v[0] - 8.0 * v[1] + 8.0 * v[3] - v[4]) / (12.0 * h);
        let d2 = |v: &[f64]| (-v[0] + 16.0 * v[1] - 30.0 * v[2] + 16.0 * v[3] - v[4]) / (12.0 * h * h);
        assert!((d1(&l) - d.d_log.item()).abs() < 1e-7);
        assert!((d1(&ph) - d.d_phase.item()).abs() < 1e-7);
        assert!((d2(&l) - d.d2_log.item()).abs() < 1e-5);
        assert!((d2(&ph) - d.d2_phase.item()).abs() < 1e-5);
    }
}

#[test]
fn taped_preimage_gives_fixed_x_parameter_gradient() {
    for f in [random_qnvp(1, 2, 0.8, 61), random_qcnf(1, 8, 0.8, 62), random_qnvp(2, 2, 0.6, 63)] {
        let n = f.n_dof();
        let x = Mat::from_shape_fn((1, n), |(_, i)| 0.5 - 0.8 * i as f64);
        let (ys, jac) = f.invert_with_jacobian(&x, None).unwrap();
        let tape = Tape::new();
        let w = f.bind(&tape, true);
        let y = f.taped_preimage(&w, &x, &ys, &jac).unwrap();
        let ev = f.eval(&w, &y).unwrap();
        let g = tape.backward(&ev.log_abs_psi.add(&ev.phase));
        let mut grad = vec![0.0; f.params.len()];
        nfqs::nn::gather_grads(&w, &g, &mut grad);
        let h = 1e-6;
        for k in (0..f.params.len()).step_by(5) {
            let mut p = f.clone();
            p.params.0[k] += h;
            let a = p.psi_at(&x).unwrap()[0];
            p.params.0[k] -= 2.0 * h;
            let b = p.psi_at(&x).unwrap()[0];
            let fd = (a.norm().ln() + a.arg() - b.norm().ln() - b.arg()) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6 * fd.abs().max(1.0), "param {k}: {} vs {fd}", grad[k]);
        }
    }
}
