use nfqs::evolution::{evolve, fit_step, inner_product, loss_evolution, loss_evolution_and_grad, EvolveConfig};
use nfqs::flow::{Architecture, FlowModel, QcnfModel, QnvpModel};
use nfqs::hamiltonian::{HamiltonianSpec, TunnelSpec};
use nfqs::nn::rng_from_seed;
use nfqs::oracle::grid::Grid1D;

const E0: f64 = 0.5;

fn harmonic() -> HamiltonianSpec {
    HamiltonianSpec::harmonic(1, 1.0, 1.0)
}

/// `x = y/√2` with a constant phase `delta`: the oscillator ground state
/// times `e^{iδ}`.
fn ground(delta: f64) -> FlowModel {
    let m = QnvpModel::new(1, 1, vec![], false).unwrap();
    let (re, im) = (m.s_bias_offset(0, 0, false), m.s_bias_offset(0, 0, true));
    let mut f = FlowModel::zeroed(Architecture::Qnvp(m)).unwrap();
    let s = 0.5f64.sqrt().sqrt();
    f.params.0[re] = s * delta.cos() - 1.0;
    f.params.0[im] = s * delta.sin();
    f
}

#[test]
fn unchanged_eigenstate_costs_e0_squared() {
    let old = ground(0.0);
    let batch = old.sample(512, &mut rng_from_seed(1)).unwrap();
    let l = loss_evolution(&old, &old, &harmonic(), 0.1, &batch).unwrap();
    assert!((l - E0 * E0).abs() < 1e-10, "{l}");
}

#[test]
fn cayley_step_is_exact() {
    let dt = 0.1;
    let delta = -2.0 * (E0 * dt / 2.0).atan();
    let old = ground(0.0);
    let batch = old.sample(512, &mut rng_from_seed(2)).unwrap();
    let l = loss_evolution(&ground(delta), &old, &harmonic(), dt, &batch).unwrap();
    assert!(l < 1e-10, "{l}");
}

#[test]
fn continuum_phase_leaves_a_fourth_order_residual() {
    let dt = 0.1;
    let old = ground(0.0);
    let batch = old.sample(512, &mut rng_from_seed(3)).unwrap();
    let l = loss_evolution(&ground(-E0 * dt), &old, &harmonic(), dt, &batch).unwrap();
    let series = E0.powi(6) * dt.powi(4) / 144.0;
    assert!((l / series - 1.0).abs() < 0.05, "{l} vs {series}");
}

#[test]
fn one_step_of_an_eigenstate_is_a_phase() {
    let cfg = EvolveConfig {
        batch: 256,
        n_steps: 1,
        ..EvolveConfig::default()
    };
    let psi = ground(0.0);
    let fit = fit_step(&psi, &harmonic(), &cfg, &mut rng_from_seed(4)).unwrap();
    assert!(fit.converged && fit.final_loss <= cfg.loss_threshold);
    let grid = Grid1D::default();
    let xs = grid.points();
    let a = psi.psi_1d(&xs).unwrap();
    let b = fit.flow.psi_1d(&xs).unwrap();
    let ov = inner_product(&grid, &b, &a).norm();
    let limit = 10.0 * cfg.loss_threshold * cfg.dt * cfg.dt;
    assert!(1.0 - ov < limit, "1 - |<psi'|psi>| = {} vs {limit}", 1.0 - ov);
}

#[test]
fn stationary_state_stays_put() {
    let cfg = EvolveConfig {
        batch: 256,
        n_steps: 10,
        ..EvolveConfig::default()
    };
    let trace = evolve(&ground(0.0), &harmonic(), &cfg).unwrap();
    assert_eq!(trace.records.len(), 11);
    for (r, s) in trace.records.iter().zip(&trace.states) {
        assert!(r.converged);
        assert!((r.norm - 1.0).abs() < 1e-3);
        let batch = s.sample(4096, &mut rng_from_seed(5)).unwrap();
        let mean_x = batch.x.iter().sum::<f64>() / 4096.0;
        assert!(mean_x.abs() < 0.02);
        let e = nfqs::variational::evaluate_energy(s, &harmonic(), 4096, &mut rng_from_seed(6)).unwrap();
        assert!((e.mean / E0 - 1.0).abs() < 0.01, "{e:?}");
    }
    let b = &trace.rigorous.cumulative_bound;
    assert!(b.windows(2).all(|w| w[1] >= w[0]));
    let last = trace.records.last().unwrap();
    assert!((last.t - 1.0).abs() < 1e-12);
    assert!(last.bound_rigorous <= 1.0 * cfg.loss_threshold.sqrt() * 1.5 + 1e-12);
}

#[test]
fn zero_steps_keep_only_the_start() {
    let cfg = EvolveConfig {
        n_steps: 0,
        ..EvolveConfig::default()
    };
    let trace = evolve(&ground(0.0), &harmonic(), &cfg).unwrap();
    assert_eq!(trace.records.len(), 1);
    assert_eq!(trace.records[0].t, 0.0);
    assert_eq!(trace.records[0].bound_rigorous, 0.0);
    let mut buf = Vec::new();
    trace.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("step,t,final_loss"));
}

#[test]
fn rejects_bad_configs_and_dimensions() {
    let cfg = EvolveConfig { dt: 0.0, ..EvolveConfig::default() };
    assert!(evolve(&ground(0.0), &harmonic(), &cfg).is_err());
    let cfg = EvolveConfig { loss_threshold: 0.0, ..EvolveConfig::default() };
    assert!(evolve(&ground(0.0), &harmonic(), &cfg).is_err());
    let two = FlowModel::zeroed(Architecture::Qnvp(QnvpModel::new(2, 2, vec![], false).unwrap())).unwrap();
    assert!(evolve(&two, &HamiltonianSpec::harmonic(2, 1.0, 1.0), &EvolveConfig::default()).is_err());
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let arch = Architecture::Qcnf(QcnfModel::new(1, vec![6], true, 4).unwrap());
    let old = FlowModel::init_with_scale(arch, 0.4, &mut rng_from_seed(7)).unwrap();
    let mut new = old.clone();
    for (i, p) in new.params.0.iter_mut().enumerate() {
        *p += 0.01 * ((i as f64) * 0.7).sin();
    }
    let ham = HamiltonianSpec::tunnel(TunnelSpec::default());
    let batch = old.sample(16, &mut rng_from_seed(8)).unwrap();
    let (_, g) = loss_evolution_and_grad(&new, &old, &ham, 0.1, &batch).unwrap();
    let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let h = 1e-5;
    for i in 0..g.len() {
        let mut p = new.clone();
        p.params.0[i] += h;
        let lp = loss_evolution(&p, &old, &ham, 0.1, &batch).unwrap();
        p.params.0[i] -= 2.0 * h;
        let lm = loss_evolution(&p, &old, &ham, 0.1, &batch).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - g[i]).abs() / g[i].abs().max(1e-2 * scale).max(1e-8);
        assert!(err < 1e-4, "param {i}: fd {fd} vs {}", g[i]);
    }
}
