//! The `ground`, `evolve`, `pimc` and `exact` experiments.

use std::time::Instant;

use nfqs::error_bounds::overlap_error;
use nfqs::evolution::{evolve_with, prepare_initial_tunneling, EvolutionTrace};
use nfqs::flow::FlowModel;
use nfqs::hamiltonian::{HamiltonianSpec, Potential};
use nfqs::nn::rng_from_seed;
use nfqs::oracle::grid::{grid_evolve_to, grid_observables, unstable_state, Grid1D, GridState};
use nfqs::oracle::pimc::pimc_energy;
use nfqs::variational::{evaluate_energy, train_ground_with, EnergyEstimate, TrainRecord};
use num_complex::Complex64;
use serde::Serialize;

use crate::check::{run_checks, Fault};
use crate::config::{Experiment, ExperimentConfig};
use crate::output::{num, write_manifest, OutDir};
use crate::CliError;

/// Runs the configured experiment and writes its outputs and manifest.
pub fn run(cfg: &ExperimentConfig, fault: Option<Fault>) -> Result<(), CliError> {
    let started = Instant::now();
    let mut out = OutDir::create(&cfg.out)?;
    let result = match cfg.experiment {
        Experiment::Ground => run_ground(cfg, &mut out),
        Experiment::Evolve => run_evolve(cfg, &mut out),
        Experiment::Pimc => run_pimc(cfg, &mut out),
        Experiment::Exact => run_exact(cfg, &mut out),
        Experiment::Check => run_checks(&mut out, fault),
    };
    // Failed checks still leave a complete record behind.
    if result.is_ok() || matches!(result, Err(CliError::ChecksFailed(_))) {
        write_manifest(&out, cfg, started)?;
    }
    result
}

#[derive(Serialize)]
struct RestartSummary {
    seed: u64,
    energy: f64,
    std_error: f64,
    final_loss: f64,
}

#[derive(Serialize)]
pub struct GroundSummary {
    pub g2: Option<f64>,
    pub depth: usize,
    pub architecture: String,
    pub energy: f64,
    pub std_error: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub train_steps: usize,
    restarts: Vec<RestartSummary>,
}

fn run_ground(cfg: &ExperimentConfig, out: &mut OutDir) -> Result<(), CliError> {
    let Some(sweep) = &cfg.sweep else {
        ground_once(cfg, &cfg.hamiltonian, cfg.flow.depth, out, "")?;
        return Ok(());
    };
    let mut rows = Vec::new();
    for &g2 in &sweep.g2 {
        for &depth in &sweep.depth {
            let mut ham = cfg.hamiltonian.clone();
            if let Potential::Trap(t) = &mut ham.potential {
                t.g2 = g2;
            }
            let prefix = format!("g2_{g2}_d{depth}_");
            eprintln!("[ground] sweep point g2={g2} depth={depth}");
            let s = ground_once(cfg, &ham, depth, out, &prefix)?;
            rows.push(vec![num(g2), depth.to_string(), num(s.energy), num(s.std_error)]);
        }
    }
    out.csv("sweep.csv", &["g2", "depth", "energy", "std_error"], rows)
}

fn ground_once(
    cfg: &ExperimentConfig,
    ham: &HamiltonianSpec,
    depth: usize,
    out: &mut OutDir,
    prefix: &str,
) -> Result<GroundSummary, CliError> {
    let flow_cfg = crate::config::FlowConfig { depth, ..cfg.flow.clone() };
    let every = (cfg.train.steps / 10).max(1);
    let mut best: Option<(EnergyEstimate, FlowModel, Vec<TrainRecord>, u64)> = None;
    let mut restarts = Vec::new();
    for r in 0..cfg.restarts as u64 {
        let seed = cfg.seed.wrapping_add(r);
        let flow = flow_cfg.build(ham.n_dof(), seed)?;
        let train = nfqs::variational::TrainConfig { seed, ..cfg.train.clone() };
        let t0 = Instant::now();
        let (trained, curve) = train_ground_with(&flow, ham, &train, |step, loss| {
            if (step + 1) % every == 0 {
                eprintln!("[ground] seed {seed} step {} loss {loss:.5} ({:.0}s)", step + 1, t0.elapsed().as_secs_f64());
            }
        })?;
        let mut rng = rng_from_seed(seed ^ 0x5eed_e7a1);
        let e = evaluate_energy(&trained, ham, cfg.train.eval_samples, &mut rng)?;
        eprintln!("[ground] seed {seed} energy {:.5} ± {:.5}", e.mean, e.std_error);
        restarts.push(RestartSummary {
            seed,
            energy: e.mean,
            std_error: e.std_error,
            final_loss: curve.last().map_or(f64::NAN, |c| c.loss),
        });
        if best.as_ref().is_none_or(|b| e.mean < b.0.mean) {
            best = Some((e, trained, curve, seed));
        }
    }
    let (e, flow, curve, seed) = best.expect("at least one restart");
    let summary = GroundSummary {
        g2: match &ham.potential {
            Potential::Trap(t) => Some(t.g2),
            _ => None,
        },
        depth,
        architecture: flow.arch.name().to_string(),
        energy: e.mean,
        std_error: e.std_error,
        n_samples: e.n_samples,
        seed,
        train_steps: cfg.train.steps,
        restarts,
    };
    out.json(&format!("{prefix}energy.json"), &summary)?;
    out.csv(
        &format!("{prefix}training.csv"),
        &["step", "loss"],
        curve.iter().map(|r| [r.step.to_string(), num(r.loss)]),
    )?;
    flow.save(&out.path(&format!("{prefix}checkpoint.json")))?;
    Ok(summary)
}

/// Index of the trace row closest to `t`, if one lies within half a step.
fn row_at(times: &[f64], t: f64, dt: f64) -> Option<usize> {
    times.iter().position(|&s| (s - t).abs() < 0.5 * dt)
}

fn snapshot_name(t: f64) -> String {
    format!("snapshot_t{t}.csv")
}

fn write_snapshot(out: &mut OutDir, name: &str, grid: &Grid1D, psi: &[Complex64]) -> Result<(), CliError> {
    out.csv(
        name,
        &["x", "density", "re_psi", "im_psi"],
        grid.points()
            .into_iter()
            .zip(psi)
            .map(|(x, p)| [num(x), num(p.norm_sqr()), num(p.re), num(p.im)]),
    )
}

fn run_evolve(cfg: &ExperimentConfig, out: &mut OutDir) -> Result<(), CliError> {
    let grid = &cfg.evolve.grid;
    let t0 = Instant::now();
    let flow = cfg.flow.build(1, cfg.seed)?;
    eprintln!("[evolve] preparing the starting state ({} steps)", cfg.init_train.steps);
    let (start, report) = prepare_initial_tunneling(&flow, &cfg.init_train, grid)?;
    eprintln!(
        "[evolve] start fidelity {:.6}, energy {:.5} ({:.0}s)",
        report.fidelity,
        report.energy.mean,
        t0.elapsed().as_secs_f64()
    );
    out.json("initial.json", &report)?;
    start.save(&out.path("initial_checkpoint.json"))?;

    // E(0) against the exact state the comparison starts from, so that the
    // first row compares a quantity with itself.
    let oracle = oracle_start(grid, report.global_phase);
    let e0 = overlap_error(grid, &start.psi_1d(&grid.points())?, &oracle.psi)?;
    let evo = nfqs::evolution::EvolveConfig {
        initial_error: report.overlap_error.max(e0),
        ..cfg.evolve.clone()
    };
    let trace = evolve_with(&start, &cfg.hamiltonian, &evo, |r| {
        eprintln!(
            "[evolve] step {} t={:.2} loss {:.2e} holdout {:.2e} iters {}{} theta {:.5} bound {:.4} ({:.0}s)",
            r.step,
            r.t,
            r.final_loss,
            r.holdout_loss,
            r.inner_iters,
            if r.converged { "" } else { " (not converged)" },
            r.theta,
            r.bound_rigorous,
            t0.elapsed().as_secs_f64()
        );
    })?;
    trace.write_csv(std::fs::File::create(out.path("trace.csv"))?)?;
    let times: Vec<f64> = trace.records.iter().map(|r| r.t).collect();
    for &t in &cfg.snapshot_times {
        match row_at(&times, t, evo.dt) {
            Some(i) => {
                let psi = trace.states[i].psi_1d(&grid.points())?;
                write_snapshot(out, &snapshot_name(t), grid, &psi)?;
            }
            None => eprintln!("[evolve] no step at t={t}; snapshot skipped"),
        }
    }
    if cfg.save_states {
        for (r, s) in trace.records.iter().zip(&trace.states) {
            s.save(&out.path(&format!("state_{:04}.json", r.step)))?;
        }
    }
    if cfg.compare_grid {
        compare_with_grid(cfg, &trace, oracle, out)?;
    }
    Ok(())
}

/// The analytic start carrying the flow's global phase, so the measured
/// overlap error begins at the flow's own initial error.
fn oracle_start(grid: &Grid1D, phase: f64) -> GridState {
    let rot = Complex64::from_polar(1.0, phase);
    let mut oracle = unstable_state(grid);
    oracle.psi.iter_mut().for_each(|c| *c *= rot);
    oracle
}

/// Runs the grid oracle in lockstep with the trace.
fn compare_with_grid(
    cfg: &ExperimentConfig,
    trace: &EvolutionTrace,
    mut oracle: GridState,
    out: &mut OutDir,
) -> Result<(), CliError> {
    let grid = &cfg.evolve.grid;
    let mut rows = Vec::new();
    let mut prev_t = 0.0;
    for (r, s) in trace.records.iter().zip(&trace.states) {
        if r.t > prev_t {
            oracle = grid_evolve_to(&oracle, &cfg.hamiltonian, grid, cfg.grid_dt, r.t - prev_t)?;
            prev_t = r.t;
        }
        let psi = s.psi_1d(&grid.points())?;
        let measured = overlap_error(grid, &psi, &oracle.psi)?;
        let (theta_grid, _) = grid_observables(&oracle, grid, cfg.evolve.theta_x0);
        let diff = (r.theta - theta_grid).abs();
        rows.push([
            r.step.to_string(),
            num(r.t),
            num(r.theta),
            num(theta_grid),
            num(diff),
            num(r.theta_bound),
            num(measured),
            num(r.bound_rigorous),
            (diff <= r.theta_bound && measured <= r.bound_rigorous).to_string(),
        ]);
    }
    out.csv(
        "compare.csv",
        &[
            "step",
            "t",
            "theta_flow",
            "theta_grid",
            "theta_abs_diff",
            "theta_bound",
            "overlap_error",
            "bound_rigorous",
            "bound_holds",
        ],
        rows,
    )
}

fn run_exact(cfg: &ExperimentConfig, out: &mut OutDir) -> Result<(), CliError> {
    let grid = &cfg.evolve.grid;
    let ham = &cfg.hamiltonian;
    let x0 = cfg.evolve.theta_x0;
    let mut state: GridState = unstable_state(grid);
    let mut rows = Vec::new();
    let mut snaps = Vec::new();
    for step in 0..=cfg.evolve.n_steps {
        if step > 0 {
            state = grid_evolve_to(&state, ham, grid, cfg.grid_dt, cfg.evolve.dt)?;
        }
        let t = step as f64 * cfg.evolve.dt;
        let (theta, _) = grid_observables(&state, grid, x0);
        rows.push([
            step.to_string(),
            num(t),
            num(theta),
            num(state.norm2(grid)),
            num(state.energy(grid, ham)?),
            num(state.mean_x(grid)),
        ]);
        for &ts in &cfg.snapshot_times {
            if (ts - t).abs() < 0.5 * cfg.evolve.dt {
                snaps.push((ts, state.psi.clone()));
            }
        }
    }
    out.csv("exact_trace.csv", &["step", "t", "theta", "norm", "energy", "mean_x"], rows)?;
    for (t, psi) in snaps {
        write_snapshot(out, &format!("exact_{}", snapshot_name(t)), grid, &psi)?;
    }
    Ok(())
}

fn run_pimc(cfg: &ExperimentConfig, out: &mut OutDir) -> Result<(), CliError> {
    let spec = cfg.trap()?;
    let t0 = Instant::now();
    let res = pimc_energy(spec, &cfg.pimc)?;
    for w in &res.warnings {
        eprintln!("[pimc] warning: {w}");
    }
    eprintln!(
        "[pimc] g2={} energy {:.5} ± {:.5} ({:.0}s)",
        spec.g2,
        res.energy.mean,
        res.energy.std_error,
        t0.elapsed().as_secs_f64()
    );
    out.json("pimc.json", &res.record(spec, &cfg.pimc))?;
    out.json("pimc_detail.json", &res)?;
    Ok(())
}
