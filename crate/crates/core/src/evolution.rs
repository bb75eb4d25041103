//! Real-time evolution by per-step residual minimization.
//!
//! Each step fits `ψ'` to the implicit-midpoint rule
//! `(ψ' − ψ)/Δt + i(Ĥψ + Ĥψ')/2 = 0`, minimizing the mean square residual
//! divided by `|ψ|²` over samples drawn from `|ψ|²`. With `ρ = ψ'/ψ` and the
//! local energies `ε = Ĥψ/ψ`, `ε' = Ĥψ'/ψ'`, the integrand is
//! `|(ρ − 1)/Δt + i(ε + ρε')/2|²`.
//!
//! Only one coordinate is supported: `ψ'` must be evaluated at points that
//! `ψ` sampled, which needs the inverse map and its second derivatives.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Fun, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::error_bounds::{observable_bound, state_error_norm, theta_quadrature, BoundMode, ErrorLedger};
use crate::flow::{FlowModel, SampleBatch};
use crate::hamiltonian::{local_energy, local_energy_1d, HamiltonianSpec};
use crate::nn::{gather_grads, rng_from_seed, ParamVector, Rng};
use crate::optim::Adam;
use crate::oracle::grid::Grid1D;
use crate::variational::{evaluate_energy, train_ground, EnergyEstimate, TrainConfig};

/// Barrier-top position used for the tunneling probability `⟨θ(x − x₀)⟩`.
pub const THETA_X0: f64 = 2.0;
/// Fidelity the prepared starting state must exceed.
pub const INITIAL_FIDELITY: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolveConfig {
    pub dt: f64,
    pub n_steps: usize,
    pub loss_threshold: f64,
    pub max_inner_iters: usize,
    pub learning_rate: f64,
    pub batch: usize,
    /// Inner iterations between fresh batches.
    pub resample_every: usize,
    pub seed: u64,
    pub theta_x0: f64,
    /// Quadrature grid for norms and `⟨Θ⟩`.
    pub grid: Grid1D,
    /// Steps between quadrature norm checks.
    pub norm_check_every: usize,
    /// Error of the starting state, added to every bound.
    pub initial_error: f64,
}

impl Default for EvolveConfig {
    fn default() -> Self {
        EvolveConfig {
            dt: 0.1,
            n_steps: 50,
            loss_threshold: 1e-4,
            max_inner_iters: 5_000,
            learning_rate: 1e-3,
            batch: 1 << 12,
            resample_every: 50,
            seed: 0,
            theta_x0: THETA_X0,
            grid: Grid1D::default(),
            norm_check_every: 10,
            initial_error: 0.0,
        }
    }
}

impl EvolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("dt must be positive".into()));
        }
        if !(self.loss_threshold > 0.0) {
            return Err(Error::InvalidConfig("loss_threshold must be positive".into()));
        }
        if self.max_inner_iters == 0 || self.batch < 2 || self.resample_every == 0 || self.norm_check_every == 0 {
            return Err(Error::InvalidConfig(
                "max_inner_iters, resample_every and norm_check_every must be positive, batch at least 2".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if !(self.initial_error >= 0.0) {
            return Err(Error::InvalidConfig("initial_error must be non-negative".into()));
        }
        self.grid.validate()
    }
}

/// One row of the trace. Row 0 is the starting state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub step: usize,
    pub t: f64,
    /// Loss on the batch that met the threshold (or the last one tried).
    pub final_loss: f64,
    /// Loss of the accepted state on a fresh batch.
    pub holdout_loss: f64,
    pub inner_iters: usize,
    /// False when `max_inner_iters` ran out above the threshold.
    pub converged: bool,
    pub theta: f64,
    pub norm: f64,
    pub sqrt_loss: f64,
    pub bound_rigorous: f64,
    pub bound_random_walk: f64,
    pub e_norm: f64,
    pub theta_bound: f64,
}

#[derive(Clone, Debug)]
pub struct EvolutionTrace {
    pub records: Vec<StepResult>,
    pub states: Vec<FlowModel>,
    pub rigorous: ErrorLedger,
    pub random_walk: ErrorLedger,
}

impl EvolutionTrace {
    pub const CSV_HEADER: [&'static str; 14] = [
        "step",
        "t",
        "final_loss",
        "holdout_loss",
        "inner_iters",
        "converged",
        "theta",
        "norm",
        "sqrt_loss",
        "bound_rigorous",
        "bound_random_walk",
        "e_norm",
        "theta_bound",
        "not_converged_flag",
    ];

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(Self::CSV_HEADER)?;
        for r in &self.records {
            out.write_record([
                r.step.to_string(),
                format!("{:.6}", r.t),
                format!("{:e}", r.final_loss),
                format!("{:e}", r.holdout_loss),
                r.inner_iters.to_string(),
                r.converged.to_string(),
                format!("{:.10}", r.theta),
                format!("{:.10}", r.norm),
                format!("{:e}", r.sqrt_loss),
                format!("{:e}", r.bound_rigorous),
                format!("{:e}", r.bound_random_walk),
                format!("{:e}", r.e_norm),
                format!("{:e}", r.theta_bound),
                u8::from(!r.converged).to_string(),
            ])?;
        }
        out.flush()
    }
}

/// Samples of `ψ_old` with everything the loss needs from it.
struct OldBatch {
    x: Mat,
    log_abs: Mat,
    phase: Mat,
    eps_re: Mat,
    eps_im: Mat,
    v: Mat,
    guess: Mat,
}

fn column(v: impl IntoIterator<Item = f64>, rows: usize) -> Mat {
    Mat::from_shape_vec((rows, 1), v.into_iter().collect()).expect("column")
}

impl OldBatch {
    fn from_batch(old: &FlowModel, ham: &HamiltonianSpec, batch: &SampleBatch) -> Result<Self> {
        let rows = batch.len();
        let eps = local_energy(old, ham, &batch.y)?;
        let (v, _) = ham.potential_batch(&batch.x)?;
        Ok(OldBatch {
            x: batch.x.clone(),
            log_abs: column(batch.log_abs_psi.iter().copied(), rows),
            phase: column(batch.phase.iter().copied(), rows),
            eps_re: column(eps.iter().map(|c| c.re), rows),
            eps_im: column(eps.iter().map(|c| c.im), rows),
            v: column(v, rows),
            guess: batch.y.clone(),
        })
    }

    fn draw(old: &FlowModel, ham: &HamiltonianSpec, n: usize, rng: &mut Rng) -> Result<Self> {
        Self::from_batch(old, ham, &old.sample(n, rng)?)
    }
}

fn check_1d(new: &FlowModel, old: &FlowModel, ham: &HamiltonianSpec) -> Result<()> {
    if new.n_dof() != 1 || old.n_dof() != 1 || ham.n_dof() != 1 {
        return Err(Error::Unsupported("evolution is implemented for a single coordinate".into()));
    }
    Ok(())
}

/// Loss on the tape for `ψ_new` bound to `w`. Updates the inversion guess.
fn loss_var(new: &FlowModel, w: &[Var], ham: &HamiltonianSpec, ob: &mut OldBatch, dt: f64) -> Result<Var> {
    let tape = w[0].tape().clone();
    let (ystar, jac) = new.invert_with_jacobian(&ob.x, Some(&ob.guess))?;
    let y = new.taped_preimage(w, &ob.x, &ystar, &jac)?;
    ob.guess = ystar;
    let d = new.x_derivs_1d(w, &y)?;
    let c = |m: &Mat| tape.constant(m.clone());
    let (er, ei) = local_energy_1d(&d.d_log, &d.d_phase, &d.d2_log, &d.d2_phase, &c(&ob.v), ham.mass());
    let mag = d.log_abs_psi.sub(&c(&ob.log_abs)).exp();
    let dp = d.phase.sub(&c(&ob.phase));
    let rr = mag.mul(&dp.unary(Fun::Cos));
    let ri = mag.mul(&dp.unary(Fun::Sin));
    let pe_r = rr.mul(&er).sub(&ri.mul(&ei));
    let pe_i = rr.mul(&ei).add(&ri.mul(&er));
    let res_re = rr.add_scalar(-1.0).scale(1.0 / dt).sub(&c(&ob.eps_im).add(&pe_i).scale(0.5));
    let res_im = ri.scale(1.0 / dt).add(&c(&ob.eps_re).add(&pe_r).scale(0.5));
    Ok(res_re.square().add(&res_im.square()).mean_all())
}

/// Importance-sampled residual of one implicit-midpoint step, on a batch
/// drawn from `|ψ_old|²`.
pub fn loss_evolution(
    psi_new: &FlowModel,
    psi_old: &FlowModel,
    ham: &HamiltonianSpec,
    dt: f64,
    batch: &SampleBatch,
) -> Result<f64> {
    check_1d(psi_new, psi_old, ham)?;
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig("dt must be positive".into()));
    }
    let mut ob = OldBatch::from_batch(psi_old, ham, batch)?;
    let tape = Tape::no_grad();
    let w = psi_new.bind(&tape, false);
    Ok(loss_var(psi_new, &w, ham, &mut ob, dt)?.item())
}

/// [`loss_evolution`] and its gradient with respect to `psi_new`'s parameters.
pub fn loss_evolution_and_grad(
    psi_new: &FlowModel,
    psi_old: &FlowModel,
    ham: &HamiltonianSpec,
    dt: f64,
    batch: &SampleBatch,
) -> Result<(f64, Vec<f64>)> {
    check_1d(psi_new, psi_old, ham)?;
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig("dt must be positive".into()));
    }
    let mut ob = OldBatch::from_batch(psi_old, ham, batch)?;
    loss_and_grad(psi_new, ham, &mut ob, dt)
}

fn loss_and_grad(new: &FlowModel, ham: &HamiltonianSpec, ob: &mut OldBatch, dt: f64) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let w = new.bind(&tape, true);
    let loss = loss_var(new, &w, ham, ob, dt)?;
    let grads = tape.backward(&loss);
    let mut g = vec![0.0; new.params.len()];
    gather_grads(&w, &grads, &mut g);
    Ok((loss.item(), g))
}

/// Result of fitting one step.
#[derive(Clone, Debug)]
pub struct StepFit {
    pub flow: FlowModel,
    pub final_loss: f64,
    pub holdout_loss: f64,
    pub inner_iters: usize,
    pub converged: bool,
}

/// Fits `ψ(t + Δt)` starting from `ψ(t)`'s parameters with a fresh Adam.
pub fn fit_step(current: &FlowModel, ham: &HamiltonianSpec, cfg: &EvolveConfig, rng: &mut Rng) -> Result<StepFit> {
    fit_step_with(current, current, ham, cfg, rng, |_, _| {})
}

/// As [`fit_step`], starting the optimizer from `start` and reporting
/// `(iteration, batch loss)` as it goes.
pub fn fit_step_with(
    current: &FlowModel,
    start: &FlowModel,
    ham: &HamiltonianSpec,
    cfg: &EvolveConfig,
    rng: &mut Rng,
    mut progress: impl FnMut(usize, f64),
) -> Result<StepFit> {
    check_1d(start, current, ham)?;
    let mut cand = start.clone();
    let mut adam = Adam::with_lr(cand.params.len(), cfg.learning_rate);
    let mut ob = OldBatch::draw(current, ham, cfg.batch, rng)?;
    let mut final_loss = f64::INFINITY;
    let mut iters = 0;
    let mut converged = false;
    for it in 0..cfg.max_inner_iters {
        if it > 0 && it % cfg.resample_every == 0 {
            ob = OldBatch::draw(current, ham, cfg.batch, rng)?;
        }
        let (loss, grad) = loss_and_grad(&cand, ham, &mut ob, cfg.dt)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("evolution loss at inner iteration {it}"),
            });
        }
        final_loss = loss;
        iters = it + 1;
        progress(it, loss);
        if loss <= cfg.loss_threshold {
            converged = true;
            break;
        }
        if it + 1 == cfg.max_inner_iters {
            break;
        }
        let mut p = cand.params.0.clone();
        adam.step(&mut p, &grad);
        cand.params = ParamVector(p);
    }
    let mut fresh = OldBatch::draw(current, ham, cfg.batch, rng)?;
    let tape = Tape::no_grad();
    let w = cand.bind(&tape, false);
    let holdout_loss = loss_var(&cand, &w, ham, &mut fresh, cfg.dt)?.item();
    Ok(StepFit {
        flow: cand,
        final_loss,
        holdout_loss,
        inner_iters: iters,
        converged,
    })
}

fn record(
    step: usize,
    t: f64,
    fit: Option<&StepFit>,
    theta: f64,
    norm: f64,
    rig: &ErrorLedger,
    rw: &ErrorLedger,
) -> StepResult {
    let total = rig.total();
    let e_norm = state_error_norm(total);
    StepResult {
        step,
        t,
        final_loss: fit.map_or(0.0, |f| f.final_loss),
        holdout_loss: fit.map_or(0.0, |f| f.holdout_loss),
        inner_iters: fit.map_or(0, |f| f.inner_iters),
        converged: fit.is_none_or(|f| f.converged),
        theta,
        norm,
        sqrt_loss: rig.sqrt_loss.last().copied().unwrap_or(0.0),
        bound_rigorous: total,
        bound_random_walk: rw.current() + rw.initial_error,
        e_norm,
        theta_bound: observable_bound(1.0, e_norm),
    }
}

/// Runs `cfg.n_steps` steps from `flow0`. The bound for each step uses the
/// larger of the fitted and the fresh-batch loss.
pub fn evolve(flow0: &FlowModel, ham: &HamiltonianSpec, cfg: &EvolveConfig) -> Result<EvolutionTrace> {
    evolve_with(flow0, ham, cfg, |_| {})
}

/// As [`evolve`], calling `progress` after every accepted step.
pub fn evolve_with(
    flow0: &FlowModel,
    ham: &HamiltonianSpec,
    cfg: &EvolveConfig,
    mut progress: impl FnMut(&StepResult),
) -> Result<EvolutionTrace> {
    cfg.validate()?;
    ham.validate()?;
    check_1d(flow0, flow0, ham)?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut rig = ErrorLedger::new(BoundMode::Rigorous).with_initial_error(cfg.initial_error);
    let mut rw = ErrorLedger::new(BoundMode::RandomWalk).with_initial_error(cfg.initial_error);
    let (norm, theta) = theta_quadrature(flow0, &cfg.grid, cfg.theta_x0)?;
    let first = record(0, 0.0, None, theta, norm, &rig, &rw);
    progress(&first);
    let mut records = vec![first];
    let mut states = vec![flow0.clone()];
    let mut current = flow0.clone();
    for step in 1..=cfg.n_steps {
        let fit = fit_step(&current, ham, cfg, &mut rng)?;
        let loss = fit.final_loss.max(fit.holdout_loss);
        rig.accumulate(cfg.dt, loss)?;
        rw.accumulate(cfg.dt, loss)?;
        let (norm, theta) = theta_quadrature(&fit.flow, &cfg.grid, cfg.theta_x0)?;
        if step % cfg.norm_check_every == 0 && (norm - 1.0).abs() > 1e-3 {
            return Err(Error::NonFinite {
                context: format!("quadrature norm {norm} at step {step}"),
            });
        }
        let r = record(step, step as f64 * cfg.dt, Some(&fit), theta, norm, &rig, &rw);
        progress(&r);
        records.push(r);
        current = fit.flow;
        states.push(current.clone());
    }
    Ok(EvolutionTrace {
        records,
        states,
        rigorous: rig,
        random_walk: rw,
    })
}

/// What [`prepare_initial_tunneling`] measured on the prepared state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InitialReport {
    pub energy: EnergyEstimate,
    pub fidelity: f64,
    /// `1 − |⟨ψ_flow|ψ_unstable⟩|`, the error of the phase-matched start.
    pub overlap_error: f64,
    /// Global phase of the flow relative to the real Gaussian.
    pub global_phase: f64,
    pub theta: f64,
}

/// `⟨φ|ψ⟩` by trapezoid quadrature on `grid`.
pub fn inner_product(grid: &Grid1D, phi: &[Complex64], psi: &[Complex64]) -> Complex64 {
    let dx = grid.dx();
    let n = phi.len();
    let mut s = Complex64::new(0.0, 0.0);
    for i in 0..n {
        let w = if i == 0 || i + 1 == n { 0.5 } else { 1.0 };
        s += phi[i].conj() * psi[i] * w;
    }
    s * dx
}

/// Trains a one-coordinate flow on `V = ½x²` and checks it against
/// `π^{−1/4} e^{−x²/2}`.
pub fn prepare_initial_tunneling(flow: &FlowModel, train: &TrainConfig, grid: &Grid1D) -> Result<(FlowModel, InitialReport)> {
    if flow.n_dof() != 1 {
        return Err(Error::Unsupported("the tunneling start needs a single coordinate".into()));
    }
    let ham = HamiltonianSpec::harmonic(1, 1.0, 1.0);
    let (trained, _) = train_ground(flow, &ham, train)?;
    let report = initial_report(&trained, train, grid)?;
    if !(report.fidelity > INITIAL_FIDELITY) {
        return Err(Error::InitialStateNotReached {
            fidelity: report.fidelity,
            required: INITIAL_FIDELITY,
        });
    }
    Ok((trained, report))
}

pub fn initial_report(flow: &FlowModel, train: &TrainConfig, grid: &Grid1D) -> Result<InitialReport> {
    let ham = HamiltonianSpec::harmonic(1, 1.0, 1.0);
    let xs = grid.points();
    let psi = flow.psi_1d(&xs)?;
    let c = std::f64::consts::PI.powf(-0.25);
    let gauss: Vec<Complex64> = xs.iter().map(|x| Complex64::new(c * (-0.5 * x * x).exp(), 0.0)).collect();
    let ov = inner_product(grid, &gauss, &psi);
    let mut rng = rng_from_seed(train.seed.wrapping_add(1));
    let energy = evaluate_energy(flow, &ham, train.eval_samples, &mut rng)?;
    let (_, theta) = theta_quadrature(flow, grid, THETA_X0)?;
    Ok(InitialReport {
        energy,
        fidelity: ov.norm_sqr(),
        overlap_error: (1.0 - ov.norm()).max(0.0),
        global_phase: ov.arg(),
        theta,
    })
}
