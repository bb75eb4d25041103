//! Potentials and wavefunction-level energy quantities.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{Mat, Tape, Var};
use crate::dual::{Jet, Jet2};
use crate::error::{Error, Result};
use crate::flow::FlowModel;

/// Pairs closer than this make the Yukawa term undefined.
pub const COINCIDENCE_RADIUS: f64 = 1e-10;

/// Particles in a harmonic trap with pairwise Yukawa repulsion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrapSpec {
    pub n_particles: usize,
    pub space_dim: usize,
    pub mass: f64,
    pub omega: f64,
    pub yukawa_mass: f64,
    pub g2: f64,
}

impl Default for TrapSpec {
    fn default() -> Self {
        TrapSpec {
            n_particles: 3,
            space_dim: 3,
            mass: 1.0,
            omega: 1.0,
            yukawa_mass: 2.0,
            g2: 0.0,
        }
    }
}

/// Metastable well at the origin with a deeper well beyond a barrier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunnelSpec {
    pub a: f64,
    pub b: f64,
}

impl Default for TunnelSpec {
    fn default() -> Self {
        TunnelSpec { a: 0.25, b: 4.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmonicSpec {
    pub n_dof: usize,
    pub mass: f64,
    pub omega: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Potential {
    Trap(TrapSpec),
    Tunnel(TunnelSpec),
    Harmonic(HarmonicSpec),
    /// `V ≡ 0` for unit mass.
    Free { n_dof: usize },
}

/// A potential plus a constant energy offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianSpec {
    pub potential: Potential,
    #[serde(default)]
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PotentialValue {
    pub v: f64,
    pub grad: Vec<f64>,
}

impl HamiltonianSpec {
    pub fn trap(spec: TrapSpec) -> Self {
        HamiltonianSpec {
            potential: Potential::Trap(spec),
            offset: 0.0,
        }
    }

    pub fn tunnel(spec: TunnelSpec) -> Self {
        HamiltonianSpec {
            potential: Potential::Tunnel(spec),
            offset: 0.0,
        }
    }

    pub fn harmonic(n_dof: usize, mass: f64, omega: f64) -> Self {
        HamiltonianSpec {
            potential: Potential::Harmonic(HarmonicSpec { n_dof, mass, omega }),
            offset: 0.0,
        }
    }

    pub fn with_offset(mut self, c: f64) -> Self {
        self.offset = c;
        self
    }

    pub fn n_dof(&self) -> usize {
        match &self.potential {
            Potential::Trap(t) => t.n_particles * t.space_dim,
            Potential::Tunnel(_) => 1,
            Potential::Harmonic(h) => h.n_dof,
            Potential::Free { n_dof } => *n_dof,
        }
    }

    pub fn mass(&self) -> f64 {
        match &self.potential {
            Potential::Trap(t) => t.mass,
            Potential::Tunnel(_) => 1.0,
            Potential::Harmonic(h) => h.mass,
            Potential::Free { .. } => 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        match &self.potential {
            Potential::Trap(t) => {
                if t.n_particles == 0 || t.space_dim == 0 {
                    return bad("trap needs particles and dimensions");
                }
                if !(t.mass > 0.0 && t.omega > 0.0 && t.yukawa_mass > 0.0) {
                    return bad("trap mass, omega and yukawa mass must be positive");
                }
            }
            Potential::Tunnel(t) => {
                if !(t.b > 0.0) {
                    return bad("tunnel parameter b must be positive");
                }
            }
            Potential::Harmonic(h) => {
                if h.n_dof == 0 || !(h.mass > 0.0 && h.omega > 0.0) {
                    return bad("harmonic needs positive n_dof, mass and omega");
                }
            }
            Potential::Free { n_dof } => {
                if *n_dof == 0 {
                    return bad("free particle needs positive n_dof");
                }
            }
        }
        if !self.offset.is_finite() {
            return bad("offset must be finite");
        }
        Ok(())
    }

    pub fn potential(&self, x: &[f64]) -> Result<PotentialValue> {
        if x.len() != self.n_dof() {
            return Err(Error::DimensionMismatch {
                expected: self.n_dof(),
                got: x.len(),
            });
        }
        let mut pv = match &self.potential {
            Potential::Trap(t) => trap_potential(t, x)?,
            Potential::Tunnel(t) => tunnel_potential(t, x[0]),
            Potential::Harmonic(h) => {
                let k = h.mass * h.omega * h.omega;
                PotentialValue {
                    v: 0.5 * k * x.iter().map(|v| v * v).sum::<f64>(),
                    grad: x.iter().map(|v| k * v).collect(),
                }
            }
            Potential::Free { .. } => PotentialValue {
                v: 0.0,
                grad: vec![0.0; x.len()],
            },
        };
        pv.v += self.offset;
        Ok(pv)
    }

    /// Values and gradients for each row of `x`.
    pub fn potential_batch(&self, x: &Mat) -> Result<(Vec<f64>, Mat)> {
        let mut v = Vec::with_capacity(x.nrows());
        let mut g = Mat::zeros(x.dim());
        for (b, row) in x.rows().into_iter().enumerate() {
            let pv = self.potential(row.as_slice().expect("contiguous row"))?;
            v.push(pv.v);
            g.row_mut(b).assign(&ndarray::ArrayView1::from(&pv.grad));
        }
        Ok((v, g))
    }

    /// `V(x)` on the tape, `B x 1`, with the exact first derivative in `x`
    /// (value `V(x₀)` plus `(x − x₀)·∇V(x₀)` with `x₀` the detached value).
    pub fn potential_var(&self, x: &Var) -> Result<Var> {
        let (v, g) = self.potential_batch(x.value())?;
        let tape = x.tape();
        let v0 = tape.constant(Mat::from_shape_vec((v.len(), 1), v).expect("column"));
        if !x.is_tracked() {
            return Ok(v0);
        }
        let dx = x.sub(&x.detach());
        Ok(v0.add(&dx.mul(&tape.constant(g)).sum_cols()))
    }
}

pub fn trap_potential(spec: &TrapSpec, x: &[f64]) -> Result<PotentialValue> {
    let d = spec.space_dim;
    let np = spec.n_particles;
    if x.len() != np * d {
        return Err(Error::DimensionMismatch {
            expected: np * d,
            got: x.len(),
        });
    }
    let k = spec.mass * spec.omega * spec.omega;
    let mut v = 0.5 * k * x.iter().map(|c| c * c).sum::<f64>();
    let mut grad: Vec<f64> = x.iter().map(|c| k * c).collect();
    if spec.g2 != 0.0 {
        for a in 0..np {
            for b in a + 1..np {
                let diff: Vec<f64> = (0..d).map(|i| x[a * d + i] - x[b * d + i]).collect();
                let r = diff.iter().map(|c| c * c).sum::<f64>().sqrt();
                if r < COINCIDENCE_RADIUS {
                    return Err(Error::CoincidentParticles { a, b, r });
                }
                let e = (-spec.yukawa_mass * r).exp();
                v += spec.g2 * e / r;
                let dvdr = -spec.g2 * e * (spec.yukawa_mass / r + 1.0 / (r * r));
                for (i, c) in diff.iter().enumerate() {
                    grad[a * d + i] += dvdr * c / r;
                    grad[b * d + i] -= dvdr * c / r;
                }
            }
        }
    }
    Ok(PotentialValue { v, grad })
}

pub fn tunnel_potential(spec: &TunnelSpec, x: f64) -> PotentialValue {
    let (a, b) = (spec.a, spec.b);
    let v = x * x * (x - b) * (x - b) / (2.0 * b * b) - a / (b * b * b) * x * x * x;
    let g = x * (x - b) * (2.0 * x - b) / (b * b) - 3.0 * a * x * x / (b * b * b);
    PotentialValue { v, grad: vec![g] }
}

fn check_dims(flow: &FlowModel, ham: &HamiltonianSpec) -> Result<()> {
    if flow.n_dof() != ham.n_dof() {
        return Err(Error::DimensionMismatch {
            expected: ham.n_dof(),
            got: flow.n_dof(),
        });
    }
    Ok(())
}

/// Per-sample `½|∇ψ|²/(M|ψ|²)` and `V(x)` at `x = f(y)` for each row of `y`.
pub fn local_energy_terms(flow: &FlowModel, ham: &HamiltonianSpec, y: &Mat) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(flow, ham)?;
    let tape = Tape::no_grad();
    let w = flow.bind(&tape, false);
    let g = flow.x_gradients(&w, &tape.constant(y.clone()))?;
    let inv2m = 0.5 / ham.mass();
    let kin = g
        .grad_log
        .value()
        .rows()
        .into_iter()
        .zip(g.grad_phase.value().rows())
        .map(|(l, p)| inv2m * (l.dot(&l) + p.dot(&p)))
        .collect();
    let (v, _) = ham.potential_batch(g.x.value())?;
    Ok((kin, v))
}

/// Local energy `(Ĥψ)/ψ` for one coordinate from `x`-derivatives of
/// `log|ψ|` and the phase; returns `(re, im)` columns.
pub fn local_energy_1d(
    d_log: &Var,
    d_phase: &Var,
    d2_log: &Var,
    d2_phase: &Var,
    v: &Var,
    mass: f64,
) -> (Var, Var) {
    let c = -0.5 / mass;
    let re = d2_log
        .add(&d_log.square())
        .sub(&d_phase.square())
        .scale(c)
        .add(v);
    let im = d2_phase.add(&d_log.mul(d_phase).scale(2.0)).scale(c);
    (re, im)
}

/// Exact local energy `(Ĥψ)/ψ` at `x = f(y)` for each row of `y`.
///
/// The x-Laplacian is assembled coordinate by coordinate: along the base
/// curve `y(s) = y + s·u + ½s²·w` with `u = J⁻¹e_k` and `w = −J⁻¹ D²f[u,u]`
/// the image moves as `x + s·e_k + O(s³)`, so the second derivative of
/// `log|ψ|` along it is `∂²log|ψ|/∂x_k²`.
pub fn local_energy(flow: &FlowModel, ham: &HamiltonianSpec, y: &Mat) -> Result<Vec<Complex64>> {
    check_dims(flow, ham)?;
    let n = flow.n_dof();
    let rows = y.nrows();
    let tape = Tape::no_grad();
    let w = flow.bind(&tape, false);
    let yv = tape.constant(y.clone());
    let first = flow.eval(&w, &Jet::seed_coords(yv.clone()))?;
    let full = |v: Var| v.value().broadcast((rows, n)).expect("broadcast").to_owned();
    let jcols: Vec<Mat> = (0..n).map(|k| full(first.x.tangent(k))).collect();
    let grad_y = |f: &Jet<Var>| -> Mat {
        let mut g = Mat::zeros((rows, n));
        for k in 0..n {
            g.column_mut(k).assign(&f.tangent(k).value().broadcast((rows, 1)).expect("column").column(0));
        }
        g
    };
    let gl_y = grad_y(&first.log_abs_psi);
    let gp_y = grad_y(&first.phase);
    let mut inv = Vec::with_capacity(rows);
    for b in 0..rows {
        let jb = DMatrix::from_fn(n, n, |i, k| jcols[k][[b, i]]);
        inv.push(jb.try_inverse().ok_or(Error::NonFinite {
            context: "singular flow Jacobian".into(),
        })?);
    }
    let solve = |b: usize, rhs: DVector<f64>| -> Result<DVector<f64>> { Ok(&inv[b] * rhs) };
    let solve_t = |b: usize, rhs: DVector<f64>| -> Result<DVector<f64>> { Ok(inv[b].tr_mul(&rhs)) };
    let mut gl_x = Mat::zeros((rows, n));
    let mut gp_x = Mat::zeros((rows, n));
    for b in 0..rows {
        let l = solve_t(b, DVector::from_fn(n, |k, _| gl_y[[b, k]]))?;
        let p = solve_t(b, DVector::from_fn(n, |k, _| gp_y[[b, k]]))?;
        for i in 0..n {
            gl_x[[b, i]] = l[i];
            gp_x[[b, i]] = p[i];
        }
    }
    let mut lap_l = vec![0.0; rows];
    let mut lap_p = vec![0.0; rows];
    for k in 0..n {
        let mut u = Mat::zeros((rows, n));
        for b in 0..rows {
            for i in 0..n {
                u[[b, i]] = inv[b][(i, k)];
            }
        }
        let jet = Jet2 {
            v: yv.clone(),
            d1: Some(tape.constant(u)),
            d2: None,
        };
        let ev = flow.eval(&w, &jet)?;
        let d2x = ev.x.second().value().broadcast((rows, n)).expect("broadcast").to_owned();
        let d2l = ev.log_abs_psi.second().value().broadcast((rows, 1)).expect("column").to_owned();
        let d2p = ev.phase.second().value().broadcast((rows, 1)).expect("column").to_owned();
        for b in 0..rows {
            let wv = -solve(b, DVector::from_fn(n, |i, _| d2x[[b, i]]))?;
            let (mut cl, mut cp) = (0.0, 0.0);
            for i in 0..n {
                cl += gl_y[[b, i]] * wv[i];
                cp += gp_y[[b, i]] * wv[i];
            }
            lap_l[b] += d2l[[b, 0]] + cl;
            lap_p[b] += d2p[[b, 0]] + cp;
        }
    }
    let (v, _) = ham.potential_batch(first.x.v.value())?;
    let c = -0.5 / ham.mass();
    Ok((0..rows)
        .map(|b| {
            let gl = gl_x.row(b);
            let gp = gp_x.row(b);
            let re = lap_l[b] + gl.dot(&gl) - gp.dot(&gp);
            let im = lap_p[b] + 2.0 * gl.dot(&gp);
            Complex64::new(c * re + v[b], c * im)
        })
        .collect())
}

/// Step of the finite-difference Laplacian used as a cross-check.
pub const FD_LAPLACIAN_STEP: f64 = 1e-4;

/// `(Ĥψ)(x)` from the exact local energy at the preimage of `x`.
pub fn apply_h(flow: &FlowModel, ham: &HamiltonianSpec, x: &[f64]) -> Result<Complex64> {
    check_dims(flow, ham)?;
    let n = flow.n_dof();
    let xm = Mat::from_shape_vec((1, n), x.to_vec()).expect("row");
    let y = flow.invert(&xm, None)?;
    let eps = local_energy(flow, ham, &y)?[0];
    let b = flow.forward_batch(&y)?;
    Ok(eps * Complex64::from_polar(b.log_abs_psi[0].exp(), b.phase[0]))
}

/// `(Ĥψ)(x)` with a five-point stencil per coordinate.
pub fn apply_h_fd(flow: &FlowModel, ham: &HamiltonianSpec, x: &[f64], h: f64) -> Result<Complex64> {
    check_dims(flow, ham)?;
    let n = flow.n_dof();
    let offsets = [-2.0, -1.0, 1.0, 2.0];
    let mut pts = Mat::zeros((4 * n + 1, n));
    for (r, mut row) in pts.rows_mut().into_iter().enumerate() {
        row.assign(&ndarray::ArrayView1::from(x));
        if r < 4 * n {
            row[r / 4] += offsets[r % 4] * h;
        }
    }
    let psi = flow.psi_at(&pts)?;
    let centre = psi[4 * n];
    let mut lap = Complex64::new(0.0, 0.0);
    for k in 0..n {
        let p = &psi[4 * k..4 * k + 4];
        lap += (-p[0] + 16.0 * p[1] - 30.0 * centre + 16.0 * p[2] - p[3]) / (12.0 * h * h);
    }
    let v = ham.potential(x)?.v;
    Ok(-lap / (2.0 * ham.mass()) + centre * v)
}
