//! A-posteriori error accounting for real-time evolution.
//!
//! With `E(t) = 1 − Re⟨ψ̃|ψ⟩`, the residual of each accepted step bounds the
//! growth of `E`, so `E(T) ≲ E(0) + Σ Δt √L`. The error vector norm is
//! `‖e‖ = √(2E)` and a bounded observable is off by at most
//! `‖O‖(2‖e‖ + ‖e‖²)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::nn::Rng;
use crate::oracle::grid::{integrate_above, Grid1D};
use crate::variational::EnergyEstimate;

/// Finest mesh accepted for quadrature against the oracle.
pub const MAX_OVERLAP_DX: f64 = 0.02;

/// The incoherent-sum scaling quoted for the random-walk estimate,
/// kept verbatim in output metadata; it is not evaluated.
pub const RANDOM_WALK_SCALING_NOTE: &str = "(Δt) L_th T^{-1/2}";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundMode {
    Rigorous,
    RandomWalk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorLedger {
    pub mode: BoundMode,
    pub times: Vec<f64>,
    pub sqrt_loss: Vec<f64>,
    pub cumulative_bound: Vec<f64>,
    /// Added to every bound: the overlap deficit of the starting state.
    pub initial_error: f64,
    sum_sq: f64,
}

impl ErrorLedger {
    pub fn new(mode: BoundMode) -> Self {
        ErrorLedger {
            mode,
            times: Vec::new(),
            sqrt_loss: Vec::new(),
            cumulative_bound: Vec::new(),
            initial_error: 0.0,
            sum_sq: 0.0,
        }
    }

    pub fn with_initial_error(mut self, e0: f64) -> Self {
        self.initial_error = e0.max(0.0);
        self
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Accumulated bound after the last step, without the initial error.
    pub fn current(&self) -> f64 {
        self.cumulative_bound.last().copied().unwrap_or(0.0)
    }

    /// Accumulated bound plus the initial error.
    pub fn total(&self) -> f64 {
        self.current() + self.initial_error
    }

    pub fn accumulate(&mut self, dt: f64, final_loss: f64) -> Result<()> {
        if !(final_loss >= 0.0) {
            return Err(Error::NegativeLoss(final_loss));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidConfig("dt must be positive".into()));
        }
        let s = final_loss.sqrt();
        let t = self.times.last().copied().unwrap_or(0.0) + dt;
        let bound = match self.mode {
            BoundMode::Rigorous => self.current() + dt * s,
            BoundMode::RandomWalk => {
                self.sum_sq += (dt * s).powi(2);
                self.sum_sq.sqrt()
            }
        };
        self.times.push(t);
        self.sqrt_loss.push(s);
        self.cumulative_bound.push(bound);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservableBound {
    pub op_norm: f64,
    pub value: f64,
    pub error_bar: f64,
}

impl ObservableBound {
    pub fn new(op_norm: f64, value: f64, error_bound: f64) -> Self {
        ObservableBound {
            op_norm,
            value,
            error_bar: observable_bound(op_norm, state_error_norm(error_bound)),
        }
    }
}

/// `√(2E)`, capped at 2, the largest distance between unit vectors.
pub fn state_error_norm(e_bound: f64) -> f64 {
    (2.0 * e_bound.max(0.0)).sqrt().min(2.0)
}

pub fn observable_bound(op_norm: f64, e_norm: f64) -> f64 {
    op_norm * (2.0 * e_norm + e_norm * e_norm)
}

/// Fraction of `n` flow samples with `x > x0`, with its binomial error.
pub fn theta_expectation(flow: &FlowModel, x0: f64, n: usize, rng: &mut Rng) -> Result<EnergyEstimate> {
    if flow.n_dof() != 1 {
        return Err(Error::Unsupported("theta_expectation needs a single coordinate".into()));
    }
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one sample".into()));
    }
    let mut hits = 0usize;
    let mut left = n;
    while left > 0 {
        let b = left.min(4096);
        let s = flow.sample(b, rng)?;
        hits += s.x.iter().filter(|&&x| x > x0).count();
        left -= b;
    }
    let p = hits as f64 / n as f64;
    Ok(EnergyEstimate {
        mean: p,
        std_error: (p * (1.0 - p) / n as f64).sqrt(),
        n_samples: n,
    })
}

fn check_mesh(grid: &Grid1D) -> Result<()> {
    grid.validate()?;
    if grid.dx() > MAX_OVERLAP_DX {
        return Err(Error::GridTooCoarse {
            dx: grid.dx(),
            max: MAX_OVERLAP_DX,
        });
    }
    Ok(())
}

/// `1 − Re Σ conj(ψ̃)ψ Δx` between two states sampled on the same grid.
pub fn overlap_error(grid: &Grid1D, approx: &[Complex64], oracle: &[Complex64]) -> Result<f64> {
    check_mesh(grid)?;
    if approx.len() != grid.n_points || oracle.len() != grid.n_points {
        return Err(Error::DimensionMismatch {
            expected: grid.n_points,
            got: approx.len().min(oracle.len()),
        });
    }
    let re: Vec<f64> = approx.iter().zip(oracle).map(|(a, b)| (a.conj() * b).re).collect();
    Ok(1.0 - integrate_above(&re, grid, f64::NEG_INFINITY))
}

/// `1 − Re⟨ψ̃|ψ_oracle⟩` by quadrature; no global phase is removed.
pub fn overlap_error_vs_oracle(flow: &FlowModel, grid: &Grid1D, oracle: &[Complex64]) -> Result<f64> {
    check_mesh(grid)?;
    let psi = flow.psi_1d(&grid.points())?;
    overlap_error(grid, &psi, oracle)
}

/// `∫|ψ̃|²` and `∫_{x>x₀}|ψ̃|²` by quadrature.
pub fn theta_quadrature(flow: &FlowModel, grid: &Grid1D, x0: f64) -> Result<(f64, f64)> {
    let psi = flow.psi_1d(&grid.points())?;
    let rho: Vec<f64> = psi.iter().map(|c| c.norm_sqr()).collect();
    Ok((
        integrate_above(&rho, grid, f64::NEG_INFINITY),
        integrate_above(&rho, grid, x0),
    ))
}
