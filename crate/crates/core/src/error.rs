use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("coupling scale pinched: |s|^2 = {value:e} at layer {layer}, coordinate {coord}")]
    ScalePinch { layer: usize, coord: usize, value: f64 },

    #[error("non-finite value during {context}")]
    NonFinite { context: String },

    #[error("particles {a} and {b} coincide (r = {r:e})")]
    CoincidentParticles { a: usize, b: usize, r: f64 },

    #[error("flow inversion did not converge (max residual {residual:e})")]
    InversionFailed { residual: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("initial state not reached: fidelity {fidelity} < {required}")]
    InitialStateNotReached { fidelity: f64, required: f64 },

    #[error("no convergence after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("wavefunction density {density:e} at grid boundary exceeds guard")]
    BoundaryGuard { density: f64 },

    #[error("grid spacing {dx} exceeds maximum {max}")]
    GridTooCoarse { dx: f64, max: f64 },

    #[error("negative loss {0}")]
    NegativeLoss(f64),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
