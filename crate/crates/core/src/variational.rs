//! Variational ground-state search.
//!
//! Samples come from the flow itself, so `⟨H⟩ = E_y[e(f(y; α); α)]` with
//! `e = ½|∇ψ|²/(M|ψ|²) + V`. Differentiating that expression through both the
//! sample positions and the wavefunction gives the exact gradient of the
//! batch estimate.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, SampleBatch};
use crate::hamiltonian::{local_energy, HamiltonianSpec};
use crate::nn::{gather_grads, rng_from_seed, ParamVector, Rng};
use crate::optim::Adam;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub eval_samples: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Keep every `record_every`-th loss in the training curve.
    pub record_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 1 << 10,
            steps: 30_000,
            learning_rate: 3e-4,
            eval_samples: 1 << 15,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            record_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 {
            return Err(Error::InvalidConfig("batch must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be non-negative".into()));
        }
        if self.eval_samples < 2 {
            return Err(Error::InvalidConfig("eval_samples must be at least 2".into()));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidConfig("record_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl EnergyEstimate {
    pub fn from_samples(e: &[f64]) -> Self {
        let n = e.len() as f64;
        let mean = e.iter().sum::<f64>() / n;
        let var = if e.len() > 1 {
            e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        EnergyEstimate {
            mean,
            std_error: (var / n).sqrt(),
            n_samples: e.len(),
        }
    }
}

/// Batch estimate of `⟨H⟩` on the tape, from base points `y`.
pub fn loss_ground_var(flow: &FlowModel, w: &[Var], ham: &HamiltonianSpec, y: &Mat) -> Result<Var> {
    if flow.n_dof() != ham.n_dof() {
        return Err(Error::DimensionMismatch {
            expected: ham.n_dof(),
            got: flow.n_dof(),
        });
    }
    let tape = w[0].tape().clone();
    let g = flow.x_gradients(w, &tape.constant(y.clone()))?;
    let kin = g
        .grad_log
        .square()
        .add(&g.grad_phase.square())
        .sum_cols()
        .scale(0.5 / ham.mass());
    let v = ham.potential_var(&g.x)?;
    Ok(kin.add(&v).mean_all())
}

pub fn loss_ground(flow: &FlowModel, ham: &HamiltonianSpec, batch: &SampleBatch) -> Result<f64> {
    let tape = Tape::no_grad();
    let w = flow.bind(&tape, false);
    Ok(loss_ground_var(flow, &w, ham, &batch.y)?.item())
}

/// Loss and its parameter gradient on base points `y`.
pub fn loss_and_grad(flow: &FlowModel, ham: &HamiltonianSpec, y: &Mat) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let w = flow.bind(&tape, true);
    let loss = loss_ground_var(flow, &w, ham, y)?;
    let grads = tape.backward(&loss);
    let mut g = vec![0.0; flow.params.len()];
    gather_grads(&w, &grads, &mut g);
    Ok((loss.item(), g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
}

/// Adam on fresh batches; returns the trained flow and the decimated curve.
pub fn train_ground(flow: &FlowModel, ham: &HamiltonianSpec, cfg: &TrainConfig) -> Result<(FlowModel, Vec<TrainRecord>)> {
    train_ground_with(flow, ham, cfg, |_, _| {})
}

/// As [`train_ground`], calling `progress(step, loss)` after every step.
pub fn train_ground_with(
    flow: &FlowModel,
    ham: &HamiltonianSpec,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(FlowModel, Vec<TrainRecord>)> {
    cfg.validate()?;
    ham.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let mut model = flow.clone();
    let mut adam = Adam::new(model.params.len(), cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        let y = model.base_sample(cfg.batch, &mut rng);
        let (loss, grad) = loss_and_grad(&model, ham, &y)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("ground-state loss at step {step}"),
            });
        }
        if step % cfg.record_every == 0 {
            curve.push(TrainRecord { step, loss });
        }
        progress(step, loss);
        let mut p = model.params.0.clone();
        adam.step(&mut p, &grad);
        model.params = ParamVector(p);
    }
    Ok((model, curve))
}

/// Mean of the real local energy over `n` fresh samples.
pub fn evaluate_energy(flow: &FlowModel, ham: &HamiltonianSpec, n: usize, rng: &mut Rng) -> Result<EnergyEstimate> {
    if n < 2 {
        return Err(Error::InvalidConfig("need at least 2 samples".into()));
    }
    let chunk = 1024;
    let mut e = Vec::with_capacity(n);
    while e.len() < n {
        let b = chunk.min(n - e.len());
        let y = flow.base_sample(b, rng);
        e.extend(local_energy(flow, ham, &y)?.iter().map(|c| c.re));
    }
    Ok(EnergyEstimate::from_samples(&e))
}
