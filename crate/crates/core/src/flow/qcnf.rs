//! Quantum continuous normalizing flow.
//!
//! A single network `F: R^N -> R^{N+1}` drives `dz/dt = F_flow(z)` and
//! `dθ/dt = F_phase(z)` for `t ∈ [0, 1]`, while the log-determinant obeys
//! `d(log det)/dt = Tr ∂F_flow/∂z`. All three are integrated with fixed-step
//! RK4 and the discrete map is differentiated directly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::dual::{Dual, Jet};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, MlpSpec, ParamVector, Rng};

/// States whose magnitude exceeds this are reported as non-finite.
pub const NONFINITE_LIMIT: f64 = 1e100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QcnfModel {
    pub n_dof: usize,
    pub field: MlpSpec,
    pub n_steps: usize,
}

impl QcnfModel {
    pub fn new(n_dof: usize, hidden: Vec<usize>, layer_norm: bool, n_steps: usize) -> Result<Self> {
        if n_dof == 0 {
            return Err(Error::InvalidConfig("n_dof must be positive".into()));
        }
        let m = QcnfModel {
            n_dof,
            field: MlpSpec::new(n_dof, n_dof + 1, hidden, Activation::Tanh, layer_norm)?,
            n_steps,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::InvalidConfig("n_steps must be at least 1".into()));
        }
        if self.field.in_dim != self.n_dof || self.field.out_dim != self.n_dof + 1 {
            return Err(Error::InvalidConfig("vector field must map N -> N+1".into()));
        }
        self.field.validate()
    }

    /// Number of affine maps in the vector field.
    pub fn depth(&self) -> usize {
        self.field.hidden_widths.len() + 1
    }

    pub fn param_count(&self) -> usize {
        self.field.param_count()
    }

    pub fn init(&self, scale: f64, rng: &mut Rng, params: &mut [f64]) -> Result<()> {
        nn::init_into(&self.field, scale, rng, params)
    }

    pub fn bind(&self, params: &[f64], tape: &Tape, trainable: bool) -> Vec<Var> {
        nn::bind(&self.field, params, tape, trainable)
    }

    /// `(dz/dt, dθ/dt, Tr ∂F/∂z)`; the trace only when asked for.
    fn rhs<T: Dual>(&self, w: &[Var], z: &T, density: bool) -> (T, T, Option<T>) {
        let n = self.n_dof;
        if density {
            let zj = Jet::seed_coords(z.clone());
            let out = nn::apply(&self.field, w, &zj);
            let mut tr: Option<T> = None;
            for k in 0..n {
                // Missing tangents are identically zero.
                if let Some(t) = out.d.get(k).and_then(|t| t.as_ref()) {
                    let c = t.col(k);
                    tr = Some(match tr {
                        Some(a) => a.add(&c),
                        None => c,
                    });
                }
            }
            let tr = tr.unwrap_or_else(|| z.constant(Mat::zeros((1, 1))));
            (out.v.cols(0, n), out.v.col(n), Some(tr))
        } else {
            let out = nn::apply(&self.field, w, z);
            (out.cols(0, n), out.col(n), None)
        }
    }

    /// Integrates from `y`; returns `(x, log det, phase)`, the log det only
    /// when `density` is set.
    pub(crate) fn transport<T: Dual>(&self, w: &[Var], y: &T, density: bool) -> Result<(T, Option<T>, T)> {
        let h = 1.0 / self.n_steps as f64;
        let mut z = y.clone();
        let mut ld: Option<T> = None;
        let mut th: Option<T> = None;
        let acc = |a: Option<T>, d: T| match a {
            Some(a) => Some(a.add(&d)),
            None => Some(d),
        };
        for _ in 0..self.n_steps {
            let (k1, p1, t1) = self.rhs(w, &z, density);
            let (k2, p2, t2) = self.rhs(w, &z.add(&k1.scale(0.5 * h)), density);
            let (k3, p3, t3) = self.rhs(w, &z.add(&k2.scale(0.5 * h)), density);
            let (k4, p4, t4) = self.rhs(w, &z.add(&k3.scale(h)), density);
            let comb = |a: T, b: T, c: T, d: T| a.add(&b.scale(2.0)).add(&c.scale(2.0)).add(&d).scale(h / 6.0);
            z = z.add(&comb(k1, k2, k3, k4));
            th = acc(th, comb(p1, p2, p3, p4));
            if let (Some(a), Some(b), Some(c), Some(d)) = (t1, t2, t3, t4) {
                ld = acc(ld, comb(a, b, c, d));
            }
            guard(z.primal(), "qcnf state")?;
            if let Some(t) = &th {
                guard(t.primal(), "qcnf phase")?;
            }
            if let Some(l) = &ld {
                guard(l.primal(), "qcnf log-det")?;
            }
        }
        Ok((z, ld, th.expect("n_steps >= 1")))
    }

    /// Integrates the flow part backwards from `x`; an approximate inverse
    /// (exact up to the RK4 error of the reversed steps).
    pub(crate) fn reverse(&self, w: &[Var], x: &Var) -> Result<Var> {
        let h = -1.0 / self.n_steps as f64;
        let mut z = x.clone();
        for _ in 0..self.n_steps {
            let (k1, _, _) = self.rhs(w, &z, false);
            let (k2, _, _) = self.rhs(w, &z.add(&k1.scale(0.5 * h)), false);
            let (k3, _, _) = self.rhs(w, &z.add(&k2.scale(0.5 * h)), false);
            let (k4, _, _) = self.rhs(w, &z.add(&k3.scale(h)), false);
            z = z.add(&k1.add(&k2.scale(2.0)).add(&k3.scale(2.0)).add(&k4).scale(h / 6.0));
            guard(&z, "qcnf reverse")?;
        }
        Ok(z)
    }

    /// Exact divergence of the flow part of `F` at one point.
    pub fn trace_hessian(&self, params: &ParamVector, z: &[f64]) -> Result<f64> {
        if z.len() != self.n_dof {
            return Err(Error::DimensionMismatch {
                expected: self.n_dof,
                got: z.len(),
            });
        }
        let tape = Tape::no_grad();
        let w = self.bind(&params.0, &tape, false);
        let zv = tape.constant(Mat::from_shape_vec((1, self.n_dof), z.to_vec()).expect("row"));
        let (_, _, tr) = self.rhs(&w, &zv, true);
        Ok(tr.expect("density requested").item())
    }

    /// Integrates the full Jacobian `dJ/dt = (∂F/∂z)·J` alongside `z` with the
    /// same RK4 stages and returns `log |det J(1)|`. A brute-force check on the
    /// trace-evolved log det.
    pub fn jacobian_logdet(&self, params: &ParamVector, y: &[f64]) -> Result<f64> {
        let n = self.n_dof;
        if y.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: y.len() });
        }
        let tape = Tape::no_grad();
        let w = self.bind(&params.0, &tape, false);
        let field = |z: &DMatrix<f64>| -> (DMatrix<f64>, DMatrix<f64>) {
            let zv = tape.constant(Mat::from_shape_fn((1, n), |(_, i)| z[(i, 0)]));
            let out = nn::apply(&self.field, &w, &Jet::seed_coords(zv));
            let f = DMatrix::from_fn(n, 1, |i, _| out.v.value()[[0, i]]);
            let jac = DMatrix::from_fn(n, n, |i, k| match out.d.get(k).and_then(|t| t.as_ref()) {
                Some(t) => t.value()[[0, i]],
                None => 0.0,
            });
            (f, jac)
        };
        let h = 1.0 / self.n_steps as f64;
        let mut z = DMatrix::from_column_slice(n, 1, y);
        let mut jm = DMatrix::<f64>::identity(n, n);
        for _ in 0..self.n_steps {
            let (f1, a1) = field(&z);
            let j1 = &a1 * &jm;
            let (f2, a2) = field(&(&z + &f1 * (0.5 * h)));
            let j2 = &a2 * (&jm + &j1 * (0.5 * h));
            let (f3, a3) = field(&(&z + &f2 * (0.5 * h)));
            let j3 = &a3 * (&jm + &j2 * (0.5 * h));
            let (f4, a4) = field(&(&z + &f3 * h));
            let j4 = &a4 * (&jm + &j3 * h);
            z += (f1 + f2 * 2.0 + f3 * 2.0 + f4) * (h / 6.0);
            jm += (j1 + j2 * 2.0 + j3 * 2.0 + j4) * (h / 6.0);
        }
        Ok(jm.determinant().abs().ln())
    }
}

pub(crate) fn guard(v: &Var, context: &str) -> Result<()> {
    if v.value().iter().all(|x| x.is_finite() && x.abs() < NONFINITE_LIMIT) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}
