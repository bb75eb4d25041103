//! One-dimensional lattice solver.
//!
//! `H = −D₂/(2M) + diag(V)` with the 3-point Laplacian and zero Dirichlet
//! walls. Ground states come from shifted inverse iteration; real time uses
//! Crank–Nicolson, `(1 + i dt H/2) ψ' = (1 − i dt H/2) ψ`, which is unitary
//! up to roundoff.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::HamiltonianSpec;

/// Densities at either wall above this abort a run.
pub const BOUNDARY_DENSITY_MAX: f64 = 1e-8;
/// Largest real-time step accepted by [`grid_evolve`].
pub const MAX_GRID_DT: f64 = 1e-3;
pub const DEFAULT_GRID_DT: f64 = 5e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub x_min: f64,
    pub x_max: f64,
    pub n_points: usize,
}

impl Default for Grid1D {
    fn default() -> Self {
        Grid1D {
            x_min: -6.0,
            x_max: 12.0,
            n_points: 2048,
        }
    }
}

impl Grid1D {
    pub fn new(x_min: f64, x_max: f64, n_points: usize) -> Result<Self> {
        let g = Grid1D { x_min, x_max, n_points };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_points < 3 || !(self.x_max > self.x_min) {
            return Err(Error::InvalidConfig("grid needs x_max > x_min and at least 3 points".into()));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_points - 1) as f64
    }

    pub fn points(&self) -> Vec<f64> {
        let dx = self.dx();
        (0..self.n_points).map(|i| self.x_min + i as f64 * dx).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridState {
    pub psi: Vec<Complex64>,
    pub t: f64,
}

impl GridState {
    /// Samples `f` on the grid and normalizes.
    pub fn from_fn(grid: &Grid1D, f: impl Fn(f64) -> Complex64) -> Self {
        let mut s = GridState {
            psi: grid.points().into_iter().map(f).collect(),
            t: 0.0,
        };
        s.normalize(grid);
        s
    }

    pub fn norm2(&self, grid: &Grid1D) -> f64 {
        self.psi.iter().map(|c| c.norm_sqr()).sum::<f64>() * grid.dx()
    }

    pub fn normalize(&mut self, grid: &Grid1D) {
        let s = self.norm2(grid).sqrt();
        self.psi.iter_mut().for_each(|c| *c /= s);
    }

    pub fn density(&self) -> Vec<f64> {
        self.psi.iter().map(|c| c.norm_sqr()).collect()
    }

    /// `⟨x⟩` by a plain Riemann sum.
    pub fn mean_x(&self, grid: &Grid1D) -> f64 {
        grid.points()
            .iter()
            .zip(&self.psi)
            .map(|(x, c)| x * c.norm_sqr())
            .sum::<f64>()
            * grid.dx()
    }

    /// `⟨ψ|H|ψ⟩` with the lattice Hamiltonian.
    pub fn energy(&self, grid: &Grid1D, ham: &HamiltonianSpec) -> Result<f64> {
        let h = LatticeH::new(grid, ham)?;
        let hpsi = h.apply(&self.psi);
        let num: Complex64 = self.psi.iter().zip(&hpsi).map(|(a, b)| a.conj() * b).sum();
        let den: f64 = self.psi.iter().map(|c| c.norm_sqr()).sum();
        Ok(num.re / den)
    }
}

/// Tridiagonal lattice Hamiltonian: constant off-diagonal, diagonal `d`.
struct LatticeH {
    diag: Vec<f64>,
    off: f64,
}

impl LatticeH {
    fn new(grid: &Grid1D, ham: &HamiltonianSpec) -> Result<Self> {
        grid.validate()?;
        if ham.n_dof() != 1 {
            return Err(Error::Unsupported("the lattice solver is one-dimensional".into()));
        }
        let k = 1.0 / (2.0 * ham.mass() * grid.dx() * grid.dx());
        let diag = grid
            .points()
            .iter()
            .map(|&x| Ok(ham.potential(&[x])?.v + 2.0 * k))
            .collect::<Result<Vec<_>>>()?;
        Ok(LatticeH { diag, off: -k })
    }

    fn apply(&self, psi: &[Complex64]) -> Vec<Complex64> {
        let n = psi.len();
        (0..n)
            .map(|i| {
                let mut v = psi[i] * self.diag[i];
                if i > 0 {
                    v += psi[i - 1] * self.off;
                }
                if i + 1 < n {
                    v += psi[i + 1] * self.off;
                }
                v
            })
            .collect()
    }
}

/// Thomas solve for a tridiagonal system with constant off-diagonal `off`.
fn thomas<T>(diag: &[T], off: T, rhs: &[T]) -> Vec<T>
where
    T: Copy + std::ops::Sub<Output = T> + std::ops::Mul<Output = T> + std::ops::Div<Output = T>,
{
    let n = diag.len();
    let mut c = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    c.push(off / diag[0]);
    d.push(rhs[0] / diag[0]);
    for i in 1..n {
        let m = diag[i] - off * c[i - 1];
        c.push(off / m);
        d.push((rhs[i] - off * d[i - 1]) / m);
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        x[i] = x[i] - c[i] * x[i + 1];
    }
    x
}

/// Lowest eigenpair by shifted inverse iteration; converged when the
/// Rayleigh quotient settles to 1e-14 relative.
pub fn grid_ground_state(ham: &HamiltonianSpec, grid: &Grid1D) -> Result<(f64, GridState)> {
    let h = LatticeH::new(grid, ham)?;
    let n = grid.n_points;
    // The kinetic part is positive, so H − (min V − 1) ≥ 1.
    let vmin = h.diag.iter().map(|d| d + 2.0 * h.off).fold(f64::INFINITY, f64::min);
    let shift = vmin - 1.0;
    let shifted: Vec<f64> = h.diag.iter().map(|d| d - shift).collect();
    let mut v: Vec<f64> = vec![1.0; n];
    let mut e_prev = f64::INFINITY;
    for _ in 0..10_000 {
        let mut w = thomas(&shifted, h.off, &v);
        let s = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        w.iter_mut().for_each(|x| *x /= s);
        let hw = h.apply(&w.iter().map(|&x| Complex64::new(x, 0.0)).collect::<Vec<_>>());
        let e: f64 = w.iter().zip(&hw).map(|(a, b)| a * b.re).sum();
        v = w;
        if (e - e_prev).abs() <= 1e-14 * e.abs().max(1.0) {
            let sign = if v.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
            let mut st = GridState {
                psi: v.iter().map(|&x| Complex64::new(sign * x, 0.0)).collect(),
                t: 0.0,
            };
            st.normalize(grid);
            return Ok((e, st));
        }
        e_prev = e;
    }
    Err(Error::NoConvergence { iterations: 10_000 })
}

fn check_boundary(psi: &[Complex64]) -> Result<()> {
    let edge = psi[0].norm_sqr().max(psi[psi.len() - 1].norm_sqr());
    if !(edge < BOUNDARY_DENSITY_MAX) {
        return Err(Error::BoundaryGuard { density: edge });
    }
    Ok(())
}

/// `n` Crank–Nicolson steps of size `dt`.
pub fn grid_evolve(state: &GridState, ham: &HamiltonianSpec, grid: &Grid1D, dt: f64, n: usize) -> Result<GridState> {
    if !(dt > 0.0 && dt <= MAX_GRID_DT) {
        return Err(Error::InvalidConfig(format!("grid dt must lie in (0, {MAX_GRID_DT}]")));
    }
    if state.psi.len() != grid.n_points {
        return Err(Error::DimensionMismatch {
            expected: grid.n_points,
            got: state.psi.len(),
        });
    }
    let h = LatticeH::new(grid, ham)?;
    let a = Complex64::new(0.0, 0.5 * dt);
    let lhs: Vec<Complex64> = h.diag.iter().map(|&d| 1.0 + a * d).collect();
    let off = a * h.off;
    let npts = grid.n_points;
    // Factor once; only the right-hand side changes between steps.
    let mut c = vec![Complex64::new(0.0, 0.0); npts];
    let mut m = vec![Complex64::new(0.0, 0.0); npts];
    m[0] = lhs[0];
    c[0] = off / m[0];
    for i in 1..npts {
        m[i] = lhs[i] - off * c[i - 1];
        c[i] = off / m[i];
    }
    let mut psi = state.psi.clone();
    check_boundary(&psi)?;
    let mut rhs = vec![Complex64::new(0.0, 0.0); npts];
    for _ in 0..n {
        for i in 0..npts {
            let mut r = psi[i] * (1.0 - a * h.diag[i]);
            if i > 0 {
                r -= off * psi[i - 1];
            }
            if i + 1 < npts {
                r -= off * psi[i + 1];
            }
            rhs[i] = r;
        }
        psi[0] = rhs[0] / m[0];
        for i in 1..npts {
            psi[i] = (rhs[i] - off * psi[i - 1]) / m[i];
        }
        for i in (0..npts - 1).rev() {
            let next = psi[i + 1];
            psi[i] -= c[i] * next;
        }
        check_boundary(&psi)?;
    }
    Ok(GridState {
        psi,
        t: state.t + dt * n as f64,
    })
}

/// Evolves to time `t` (relative to the current state) in steps no larger than `dt`.
pub fn grid_evolve_to(state: &GridState, ham: &HamiltonianSpec, grid: &Grid1D, dt: f64, t: f64) -> Result<GridState> {
    let n = (t / dt).ceil().max(0.0) as usize;
    if n == 0 {
        return Ok(state.clone());
    }
    let mut out = grid_evolve(state, ham, grid, t / n as f64, n)?;
    out.t = state.t + t;
    Ok(out)
}

/// `∫ θ(x − x₀)|ψ|²` by the trapezoid rule, with the cell containing `x₀`
/// split at `x₀` on the linear interpolant; and the density itself.
pub fn grid_observables(state: &GridState, grid: &Grid1D, x0: f64) -> (f64, Vec<f64>) {
    let rho = state.density();
    (integrate_above(&rho, grid, x0), rho)
}

pub(crate) fn integrate_above(f: &[f64], grid: &Grid1D, x0: f64) -> f64 {
    let xs = grid.points();
    let dx = grid.dx();
    let mut total = 0.0;
    for i in 0..xs.len() - 1 {
        let (a, b) = (xs[i], xs[i + 1]);
        if a >= x0 {
            total += 0.5 * dx * (f[i] + f[i + 1]);
        } else if b > x0 {
            let s = (x0 - a) / dx;
            let f0 = f[i] + s * (f[i + 1] - f[i]);
            total += 0.5 * (b - x0) * (f0 + f[i + 1]);
        }
    }
    total
}

/// `π^{−1/4} e^{−x²/2}`, the false-vacuum starting state.
pub fn unstable_state(grid: &Grid1D) -> GridState {
    let c = std::f64::consts::PI.powf(-0.25);
    GridState::from_fn(grid, |x| Complex64::new(c * (-0.5 * x * x).exp(), 0.0))
}
