//! Wavefunctions defined by normalizing flows.
//!
//! A flow maps base points `y ~ N(0, 1)^N` to configurations `x = f(y)`;
//! `|ψ(x)|² = p(x)` and the phase comes from the architecture's extra
//! channel. Both architectures share [`FlowModel`], which owns the
//! parameters and knows how to sample, invert and differentiate.

pub mod qcnf;
pub mod qnvp;

use std::f64::consts::PI;
use std::path::Path;

use ndarray::Axis;
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::dual::{Dual, Jet, Jet2};
use crate::error::{Error, Result};
use crate::nn::{ParamVector, Rng};

pub use qcnf::QcnfModel;
pub use qnvp::{Mask, QnvpLayer, QnvpModel};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Qnvp(QnvpModel),
    Qcnf(QcnfModel),
}

impl Architecture {
    pub fn n_dof(&self) -> usize {
        match self {
            Architecture::Qnvp(m) => m.n_dof,
            Architecture::Qcnf(m) => m.n_dof,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Architecture::Qnvp(m) => m.param_count(),
            Architecture::Qcnf(m) => m.param_count(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Architecture::Qnvp(m) => m.depth(),
            Architecture::Qcnf(m) => m.depth(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Qnvp(m) => m.validate(),
            Architecture::Qcnf(m) => m.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Qnvp(_) => "qnvp",
            Architecture::Qcnf(_) => "qcnf",
        }
    }
}

/// Flow outputs for a batch, generic over the derivative carrier.
#[derive(Clone)]
pub struct FlowEval<T> {
    pub x: T,
    pub log_det: T,
    pub log_abs_psi: T,
    pub phase: T,
}

/// One configuration with its wavefunction.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiEval {
    pub x: Vec<f64>,
    pub log_abs_psi: f64,
    pub phase: f64,
    pub y: Vec<f64>,
}

/// `B` configurations drawn from `|ψ|²`.
#[derive(Clone, Debug)]
pub struct SampleBatch {
    pub y: Mat,
    pub x: Mat,
    pub log_abs_psi: Vec<f64>,
    pub phase: Vec<f64>,
    /// Importance weights relative to the sampling density; all one for
    /// direct samples.
    pub weights: Vec<f64>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn log_prob(&self, i: usize) -> f64 {
        2.0 * self.log_abs_psi[i]
    }
}

/// x-space first derivatives of `log|ψ|` and the phase, `B x N` each.
pub struct XGrad {
    pub x: Var,
    pub log_abs_psi: Var,
    pub phase: Var,
    pub grad_log: Var,
    pub grad_phase: Var,
}

/// x-space derivatives up to second order for one coordinate, `B x 1` each.
pub struct XDerivs1d {
    pub x: Var,
    pub log_abs_psi: Var,
    pub phase: Var,
    pub d_log: Var,
    pub d_phase: Var,
    pub d2_log: Var,
    pub d2_phase: Var,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    architecture: Architecture,
    params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub arch: Architecture,
    pub params: ParamVector,
}

impl FlowModel {
    pub fn from_parts(arch: Architecture, params: ParamVector) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                got: params.len(),
            });
        }
        Ok(FlowModel { arch, params })
    }

    /// All parameters zero. For QNVP this is the identity coupling, for a
    /// QCNF the identity flow.
    pub fn zeroed(arch: Architecture) -> Result<Self> {
        let n = arch.param_count();
        let mut params = ParamVector::zeros(n);
        if let Architecture::Qnvp(m) = &arch {
            // Layer-norm gains must stay one for the networks to be defined.
            let mut off = 0;
            for layer in &m.layers {
                for spec in [&layer.s_net, &layer.t_net] {
                    for slot in spec.layout() {
                        if slot.kind == crate::nn::ParamKind::Gain {
                            params.0[off + slot.offset..off + slot.offset + slot.len()].fill(1.0);
                        }
                    }
                    off += spec.param_count();
                }
            }
        }
        if let Architecture::Qcnf(m) = &arch {
            for slot in m.field.layout() {
                if slot.kind == crate::nn::ParamKind::Gain {
                    params.0[slot.offset..slot.offset + slot.len()].fill(1.0);
                }
            }
        }
        Self::from_parts(arch, params)
    }

    /// Uniform `[-1/(dN), 1/(dN)]` initialization with `d` the depth.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        let scale = 1.0 / (arch.depth() * arch.n_dof()) as f64;
        Self::init_with_scale(arch, scale, rng)
    }

    pub fn init_with_scale(arch: Architecture, scale: f64, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamVector::zeros(arch.param_count());
        match &arch {
            Architecture::Qnvp(m) => m.init(scale, rng, &mut params.0)?,
            Architecture::Qcnf(m) => m.init(scale, rng, &mut params.0)?,
        }
        Ok(FlowModel { arch, params })
    }

    pub fn n_dof(&self) -> usize {
        self.arch.n_dof()
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self> {
        Self::from_parts(self.arch.clone(), params)
    }

    /// Per-tensor vars in the flat layout order.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Vec<Var> {
        match &self.arch {
            Architecture::Qnvp(m) => m.bind(&self.params.0, tape, trainable),
            Architecture::Qcnf(m) => m.bind(&self.params.0, tape, trainable),
        }
    }

    /// Full evaluation (map, log det, `log|ψ|`, phase) of a batch `y`.
    pub fn eval<T: Dual>(&self, w: &[Var], y: &T) -> Result<FlowEval<T>> {
        let n = self.n_dof();
        if y.primal().shape().1 != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: y.primal().shape().1,
            });
        }
        let (x, log_det, phase) = match &self.arch {
            Architecture::Qnvp(m) => m.transport(w, y)?,
            Architecture::Qcnf(m) => {
                let (x, ld, ph) = m.transport(w, y, true)?;
                (x, ld.expect("density requested"), ph)
            }
        };
        let c = -(n as f64) / 4.0 * (2.0 * PI).ln();
        let log_abs_psi = y
            .square()
            .sum_cols()
            .scale(-0.25)
            .add_scalar(c)
            .sub(&log_det.scale(0.5));
        Ok(FlowEval {
            x,
            log_det,
            log_abs_psi,
            phase,
        })
    }

    /// The map `x = f(y)` alone.
    pub fn map<T: Dual>(&self, w: &[Var], y: &T) -> Result<T> {
        match &self.arch {
            Architecture::Qnvp(m) => Ok(m.transport(w, y)?.0),
            Architecture::Qcnf(m) => Ok(m.transport(w, y, false)?.0),
        }
    }

    pub fn forward(&self, y: &[f64]) -> Result<PsiEval> {
        let n = self.n_dof();
        if y.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: y.len() });
        }
        let b = self.forward_batch(&Mat::from_shape_vec((1, n), y.to_vec()).expect("row"))?;
        Ok(PsiEval {
            x: b.x.row(0).to_vec(),
            log_abs_psi: b.log_abs_psi[0],
            phase: b.phase[0],
            y: y.to_vec(),
        })
    }

    pub fn forward_batch(&self, y: &Mat) -> Result<SampleBatch> {
        let tape = Tape::no_grad();
        let w = self.bind(&tape, false);
        let ev = self.eval(&w, &tape.constant(y.clone()))?;
        let rows = y.nrows();
        Ok(SampleBatch {
            y: y.clone(),
            x: ev.x.value().clone(),
            log_abs_psi: column(ev.log_abs_psi.value(), rows),
            phase: column(ev.phase.value(), rows),
            weights: vec![1.0; rows],
        })
    }

    /// Standard-normal base draws, row by row.
    pub fn base_sample(&self, batch: usize, rng: &mut Rng) -> Mat {
        let n = self.n_dof();
        Mat::from_shape_simple_fn((batch, n), || StandardNormal.sample(rng))
    }

    /// `batch` i.i.d. draws from `|ψ|²`.
    pub fn sample(&self, batch: usize, rng: &mut Rng) -> Result<SampleBatch> {
        if batch == 0 {
            return Err(Error::InvalidConfig("batch must be at least 1".into()));
        }
        let y = self.base_sample(batch, rng);
        self.forward_batch(&y)
    }

    /// `x` and the columns `∂x/∂y_k` at `y`, untaped.
    fn map_with_jacobian(&self, w: &[Var], y: &Mat) -> Result<(Mat, Vec<Mat>)> {
        let tape = w.first().map(|v| v.tape().clone()).unwrap_or_else(Tape::no_grad);
        let jet = Jet::seed_coords(tape.constant(y.clone()));
        let out = self.map(w, &jet)?;
        let rows = y.nrows();
        let n = self.n_dof();
        let cols = (0..n)
            .map(|k| {
                let t = out.tangent(k);
                t.value().broadcast((rows, n)).expect("tangent shape").to_owned()
            })
            .collect();
        Ok((out.v.value().clone(), cols))
    }

    /// Solves `f(y) = x` row by row, starting from `guess` or from the
    /// architecture's direct inverse, and polishing with Newton. Returns `y`
    /// and the Jacobian columns at the solution.
    pub fn invert_with_jacobian(&self, x: &Mat, guess: Option<&Mat>) -> Result<(Mat, Vec<Mat>)> {
        let n = self.n_dof();
        if x.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, got: x.ncols() });
        }
        let tape = Tape::no_grad();
        let w = self.bind(&tape, false);
        let rows = x.nrows();
        let mut y = match guess {
            Some(g) => g.clone(),
            None => {
                let xv = tape.constant(x.clone());
                match &self.arch {
                    Architecture::Qnvp(m) => m.inverse(&w, &xv)?.value().clone(),
                    Architecture::Qcnf(m) => m.reverse(&w, &xv)?.value().clone(),
                }
            }
        };
        let tol = |xv: f64| 1e-11 * (1.0 + xv.abs());
        // One-dimensional flows are monotone increasing, so each row keeps a
        // bracket and falls back to bisection when Newton leaves it.
        let mut lo = vec![f64::NEG_INFINITY; rows];
        let mut hi = vec![f64::INFINITY; rows];
        let mut prev_res = vec![f64::INFINITY; rows];
        let mut prev_y = y.clone();
        let mut damping = vec![1.0; rows];
        let mut worst = f64::INFINITY;
        for _ in 0..200 {
            let (fx, jac) = match self.map_with_jacobian(&w, &y) {
                Ok(v) => v,
                Err(Error::ScalePinch { .. }) | Err(Error::NonFinite { .. }) if n > 1 => {
                    y.assign(&prev_y);
                    damping.iter_mut().for_each(|d| *d *= 0.5);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let r = &fx - x;
            worst = 0.0;
            let mut done = true;
            for b in 0..rows {
                let res: f64 = r.row(b).iter().map(|v| v * v).sum::<f64>().sqrt();
                let scale = x.row(b).iter().fold(0.0_f64, |a, v| a.max(v.abs()));
                worst = worst.max(res / (1.0 + scale));
                if res > tol(scale) {
                    done = false;
                }
            }
            if done {
                return Ok((y, jac));
            }
            let mut next = y.clone();
            for b in 0..rows {
                if n == 1 {
                    let (yb, rb, jb) = (y[[b, 0]], r[[b, 0]], jac[0][[b, 0]]);
                    if rb > 0.0 {
                        hi[b] = hi[b].min(yb);
                    } else if rb < 0.0 {
                        lo[b] = lo[b].max(yb);
                    }
                    let mut cand = yb - rb / jb;
                    if !(cand > lo[b] && cand < hi[b]) || !cand.is_finite() {
                        cand = if lo[b].is_finite() && hi[b].is_finite() {
                            0.5 * (lo[b] + hi[b])
                        } else if lo[b].is_finite() {
                            lo[b] + (yb - lo[b]).abs().max(1.0) * 2.0
                        } else {
                            hi[b] - (hi[b] - yb).abs().max(1.0) * 2.0
                        };
                    }
                    next[[b, 0]] = cand;
                } else {
                    let res: f64 = r.row(b).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if res > prev_res[b] {
                        next.row_mut(b).assign(&prev_y.row(b));
                        damping[b] *= 0.5;
                        continue;
                    }
                    prev_res[b] = res;
                    let a = nalgebra::DMatrix::from_fn(n, n, |i, k| jac[k][[b, i]]);
                    let rhs = nalgebra::DVector::from_fn(n, |i, _| r[[b, i]]);
                    let Some(step) = a.lu().solve(&rhs) else {
                        return Err(Error::InversionFailed { residual: res });
                    };
                    for i in 0..n {
                        next[[b, i]] = y[[b, i]] - damping[b] * step[i];
                    }
                    damping[b] = (damping[b] * 2.0).min(1.0);
                }
            }
            prev_y = y;
            y = next;
        }
        Err(Error::InversionFailed { residual: worst })
    }

    pub fn invert(&self, x: &Mat, guess: Option<&Mat>) -> Result<Mat> {
        Ok(self.invert_with_jacobian(x, guess)?.0)
    }

    /// `ψ` at arbitrary configurations (rows of `x`).
    pub fn psi_at(&self, x: &Mat) -> Result<Vec<Complex64>> {
        let y = self.invert(x, None)?;
        let b = self.forward_batch(&y)?;
        Ok(b.log_abs_psi
            .iter()
            .zip(&b.phase)
            .map(|(&l, &p)| Complex64::from_polar(l.exp(), p))
            .collect())
    }

    /// `ψ` on a one-dimensional grid.
    pub fn psi_1d(&self, xs: &[f64]) -> Result<Vec<Complex64>> {
        if self.n_dof() != 1 {
            return Err(Error::Unsupported("psi_1d needs a single coordinate".into()));
        }
        self.psi_at(&Mat::from_shape_vec((xs.len(), 1), xs.to_vec()).expect("column"))
    }

    /// `y(α)` equal to `y_star` in value whose parameter derivative is that of
    /// the exact preimage of `x`: one Newton correction with the Jacobian
    /// held fixed. `jac` holds the columns `∂x/∂y_k` at `y_star`.
    pub fn taped_preimage(&self, w: &[Var], x: &Mat, y_star: &Mat, jac: &[Mat]) -> Result<Var> {
        let tape = w[0].tape().clone();
        let n = self.n_dof();
        let ys = tape.constant(y_star.clone());
        let fx = self.map(w, &ys)?;
        let r = fx.sub(&tape.constant(x.clone()));
        let delta = if n == 1 {
            r.mul(&tape.constant(jac[0].mapv(|v| 1.0 / v)))
        } else {
            let rows = x.nrows();
            let a_cols: Vec<Var> = (0..n)
                .map(|i| tape.constant(Mat::from_shape_fn((rows, n), |(b, k)| jac[k][[b, i]])))
                .collect();
            Var::solve_rows(&a_cols, &r)
        };
        Ok(ys.sub(&delta))
    }

    /// Gradients of `log|ψ|` and the phase with respect to `x = f(y)`, from
    /// the `y`-Jacobian by solving `(∂x/∂y)ᵀ g_x = g_y` per sample.
    pub fn x_gradients(&self, w: &[Var], y: &Var) -> Result<XGrad> {
        let n = self.n_dof();
        let ev = self.eval(w, &Jet::seed_coords(y.clone()))?;
        let a_cols: Vec<Var> = (0..n).map(|k| ev.x.tangent(k)).collect();
        let gl: Vec<Var> = (0..n).map(|k| ev.log_abs_psi.tangent(k)).collect();
        let gp: Vec<Var> = (0..n).map(|k| ev.phase.tangent(k)).collect();
        let grad_log = Var::solve_rows(&a_cols, &Var::concat_cols(&gl));
        let grad_phase = Var::solve_rows(&a_cols, &Var::concat_cols(&gp));
        Ok(XGrad {
            x: ev.x.v,
            log_abs_psi: ev.log_abs_psi.v,
            phase: ev.phase.v,
            grad_log,
            grad_phase,
        })
    }

    /// First and second x-derivatives of `log|ψ|` and the phase for a
    /// single coordinate.
    pub fn x_derivs_1d(&self, w: &[Var], y: &Var) -> Result<XDerivs1d> {
        if self.n_dof() != 1 {
            return Err(Error::Unsupported("x_derivs_1d needs a single coordinate".into()));
        }
        let ev = self.eval(w, &Jet2::seed(y.clone()))?;
        let inv = ev.x.first().recip();
        let xpp = ev.x.second();
        let conv = |f: &Jet2<Var>| {
            let f1 = f.first();
            let d1 = f1.mul(&inv);
            let d2 = f.second().sub(&d1.mul(&xpp)).mul(&inv.square());
            (d1, d2)
        };
        let (d_log, d2_log) = conv(&ev.log_abs_psi);
        let (d_phase, d2_phase) = conv(&ev.phase);
        Ok(XDerivs1d {
            x: ev.x.v,
            log_abs_psi: ev.log_abs_psi.v,
            phase: ev.phase.v,
            d_log,
            d_phase,
            d2_log,
            d2_phase,
        })
    }

    /// `|analytic log det − log det of a finite-difference Jacobian|`.
    pub fn logdet_check(&self, y: &[f64], step: f64) -> Result<f64> {
        let (ld, fd) = self.logdet_pair(y, step)?;
        Ok((ld - fd).abs())
    }

    /// `(analytic, finite-difference)` log det of `∂x/∂y` at `y`.
    pub fn logdet_pair(&self, y: &[f64], step: f64) -> Result<(f64, f64)> {
        let n = self.n_dof();
        let analytic = self.forward_batch(&Mat::from_shape_vec((1, n), y.to_vec()).expect("row"))?;
        let ld = {
            let c = -(n as f64) / 4.0 * (2.0 * PI).ln();
            let yy: f64 = y.iter().map(|v| v * v).sum();
            -2.0 * (analytic.log_abs_psi[0] - c + 0.25 * yy)
        };
        // Fourth-order central stencil at offsets -2h, -h, h, 2h.
        let offsets = [-2.0, -1.0, 1.0, 2.0];
        let coef = [1.0, -8.0, 8.0, -1.0];
        let mut pts = Mat::zeros((4 * n, n));
        for k in 0..n {
            for (j, o) in offsets.iter().enumerate() {
                for i in 0..n {
                    pts[[4 * k + j, i]] = y[i];
                }
                pts[[4 * k + j, k]] += o * step;
            }
        }
        let fx = self.forward_batch(&pts)?.x;
        let jac = nalgebra::DMatrix::from_fn(n, n, |i, k| {
            (0..4).map(|j| coef[j] * fx[[4 * k + j, i]]).sum::<f64>() / (12.0 * step)
        });
        let fd = jac.determinant().abs().ln();
        Ok((ld, fd))
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            architecture: self.arch.clone(),
            params: self.params.0.clone(),
        };
        serde_json::to_string_pretty(&ck).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                ck.format_version
            )));
        }
        Self::from_parts(ck.architecture, ParamVector(ck.params))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Self::from_json(&s)
    }
}

fn column(m: &Mat, rows: usize) -> Vec<f64> {
    m.broadcast((rows, 1)).expect("column").index_axis(Axis(1), 0).to_vec()
}
