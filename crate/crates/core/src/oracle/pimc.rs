//! Path-integral Monte Carlo for the trap.
//!
//! Primitive action on a periodic imaginary-time lattice,
//! `S = Σ_j [M|R_{j+1} − R_j|²/(2Δτ) + Δτ V(R_j)]`, sampled with single-bead
//! Gaussian moves, staging moves (a segment redrawn from the free-particle
//! bridge, accepted on the potential alone) and rigid shifts of one
//! particle's whole worldline. The
//! energy comes from the centroid virial estimator; the thermodynamic
//! estimator is kept as a cross-check.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{trap_potential, TrapSpec};
use crate::nn::{rng_from_seed, Rng};
use crate::variational::EnergyEstimate;

/// Bead acceptance outside this range draws a tuning warning.
pub const ACCEPTANCE_RANGE: (f64, f64) = (0.2, 0.8);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PimcConfig {
    pub beta: f64,
    pub dtau: f64,
    pub n_sweeps: usize,
    pub n_therm: usize,
    pub seed: u64,
    /// Standard deviation of single-bead displacements.
    pub move_width: f64,
    /// Standard deviation of whole-worldline shifts.
    pub com_width: f64,
    /// Slices spanned by a staging segment; 0 disables staging.
    pub staging_length: usize,
}

impl Default for PimcConfig {
    fn default() -> Self {
        PimcConfig {
            beta: 10.0,
            dtau: 0.1,
            n_sweeps: 40_000,
            n_therm: 4_000,
            seed: 0,
            move_width: 0.3,
            com_width: 0.3,
            staging_length: 16,
        }
    }
}

impl PimcConfig {
    pub fn n_slices(&self) -> usize {
        (self.beta / self.dtau).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.dtau > 0.0) {
            return Err(Error::InvalidConfig("beta and dtau must be positive".into()));
        }
        let m = self.n_slices();
        if m < 2 {
            return Err(Error::InvalidConfig("need at least two time slices".into()));
        }
        if ((m as f64) * self.dtau - self.beta).abs() > 1e-9 * self.beta {
            return Err(Error::InvalidConfig("beta must be a multiple of dtau".into()));
        }
        if self.n_sweeps < 64 {
            return Err(Error::InvalidConfig("need at least 64 measured sweeps".into()));
        }
        if self.staging_length == 1 || self.staging_length > m {
            return Err(Error::InvalidConfig("staging_length must be 0 or in 2..=n_slices".into()));
        }
        if !(self.move_width > 0.0 && self.com_width > 0.0) {
            return Err(Error::InvalidConfig("move widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PimcResult {
    pub energy: EnergyEstimate,
    pub thermodynamic: EnergyEstimate,
    pub bead_acceptance: f64,
    pub com_acceptance: f64,
    pub staging_acceptance: f64,
    pub n_sweeps: usize,
    pub warnings: Vec<String>,
}

/// The flat record written by the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PimcRecord {
    pub g2: f64,
    pub beta: f64,
    pub dtau: f64,
    pub energy: f64,
    pub std_error: f64,
    pub n_sweeps: usize,
    pub acceptance: f64,
}

impl PimcResult {
    pub fn record(&self, spec: &TrapSpec, cfg: &PimcConfig) -> PimcRecord {
        PimcRecord {
            g2: spec.g2,
            beta: cfg.beta,
            dtau: cfg.dtau,
            energy: self.energy.mean,
            std_error: self.energy.std_error,
            n_sweeps: self.n_sweeps,
            acceptance: self.bead_acceptance,
        }
    }
}

/// Worldlines: `n_slices` rows of `N` coordinates, periodic in time.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    pub n_slices: usize,
    pub n_dof: usize,
    pub pos: Vec<f64>,
}

impl Path {
    pub fn zeros(n_slices: usize, n_dof: usize) -> Self {
        Path {
            n_slices,
            n_dof,
            pos: vec![0.0; n_slices * n_dof],
        }
    }

    pub fn slice(&self, j: usize) -> &[f64] {
        let j = j % self.n_slices;
        &self.pos[j * self.n_dof..(j + 1) * self.n_dof]
    }
}

fn potential(spec: &TrapSpec, r: &[f64]) -> Result<f64> {
    Ok(trap_potential(spec, r)?.v)
}

/// Change in the primitive action when the coordinates `particle` of
/// slice `j` move by `delta`.
pub fn bead_action_change(
    spec: &TrapSpec,
    dtau: f64,
    path: &Path,
    j: usize,
    particle: usize,
    delta: &[f64],
) -> Result<f64> {
    let d = spec.space_dim;
    let m = path.n_slices;
    let old = path.slice(j);
    let mut new = old.to_vec();
    for (i, dl) in delta.iter().enumerate() {
        new[particle * d + i] += dl;
    }
    let prev = path.slice(j + m - 1);
    let next = path.slice(j + 1);
    let mut dk = 0.0;
    for i in particle * d..(particle + 1) * d {
        let kin = |x: f64| (x - prev[i]).powi(2) + (next[i] - x).powi(2);
        dk += kin(new[i]) - kin(old[i]);
    }
    let dv = potential(spec, &new)? - potential(spec, old)?;
    Ok(spec.mass * dk / (2.0 * dtau) + dtau * dv)
}

/// Change in the action when the whole worldline of `particle` shifts.
pub fn shift_action_change(spec: &TrapSpec, dtau: f64, path: &Path, particle: usize, delta: &[f64]) -> Result<f64> {
    let d = spec.space_dim;
    let mut dv = 0.0;
    let mut buf = vec![0.0; path.n_dof];
    for j in 0..path.n_slices {
        let old = path.slice(j);
        buf.copy_from_slice(old);
        for (i, dl) in delta.iter().enumerate() {
            buf[particle * d + i] += dl;
        }
        dv += potential(spec, &buf)? - potential(spec, old)?;
    }
    Ok(dtau * dv)
}

/// Redraws slices `j+1 .. j+len-1` of `particle` from the free-particle
/// bridge between the fixed ends; returns the proposed coordinates.
pub fn staging_proposal(
    spec: &TrapSpec,
    dtau: f64,
    path: &Path,
    j: usize,
    len: usize,
    particle: usize,
    rng: &mut Rng,
) -> Vec<Vec<f64>> {
    let d = spec.space_dim;
    let end = &path.slice(j + len)[particle * d..(particle + 1) * d];
    let mut prev = path.slice(j)[particle * d..(particle + 1) * d].to_vec();
    let mut out = Vec::with_capacity(len - 1);
    for k in 1..len {
        let rest = (len - k) as f64;
        let sd = (dtau / spec.mass * rest / (rest + 1.0)).sqrt();
        let next: Vec<f64> = (0..d)
            .map(|i| {
                let z: f64 = StandardNormal.sample(rng);
                (rest * prev[i] + end[i]) / (rest + 1.0) + sd * z
            })
            .collect();
        out.push(next.clone());
        prev = next;
    }
    out
}

/// Potential part of the action change for replacing the interior of a
/// segment with `beads`.
pub fn staging_action_change(
    spec: &TrapSpec,
    dtau: f64,
    path: &Path,
    j: usize,
    particle: usize,
    beads: &[Vec<f64>],
) -> Result<f64> {
    let d = spec.space_dim;
    let mut dv = 0.0;
    let mut buf = vec![0.0; path.n_dof];
    for (k, b) in beads.iter().enumerate() {
        let old = path.slice(j + k + 1);
        buf.copy_from_slice(old);
        buf[particle * d..(particle + 1) * d].copy_from_slice(b);
        dv += potential(spec, &buf)? - potential(spec, old)?;
    }
    Ok(dtau * dv)
}

/// Centroid virial and thermodynamic energies of one configuration.
pub fn estimators(spec: &TrapSpec, cfg: &PimcConfig, path: &Path) -> Result<(f64, f64)> {
    let (m, n) = (path.n_slices, path.n_dof);
    let mut centroid = vec![0.0; n];
    for j in 0..m {
        for (c, x) in centroid.iter_mut().zip(path.slice(j)) {
            *c += x / m as f64;
        }
    }
    let mut pot = 0.0;
    let mut vir = 0.0;
    let mut spring = 0.0;
    for j in 0..m {
        let r = path.slice(j);
        let pv = trap_potential(spec, r)?;
        pot += pv.v;
        vir += r.iter().zip(&centroid).zip(&pv.grad).map(|((x, c), g)| (x - c) * g).sum::<f64>();
        spring += r.iter().zip(path.slice(j + 1)).map(|(a, b)| (b - a).powi(2)).sum::<f64>();
    }
    let beta = cfg.beta;
    let virial = n as f64 / (2.0 * beta) + (pot + 0.5 * vir) / m as f64;
    let thermo = (n * m) as f64 / (2.0 * beta) - spec.mass * spring / (2.0 * cfg.dtau * beta) + pot / m as f64;
    Ok((virial, thermo))
}

/// Standard error from repeated pairwise blocking; the largest estimate
/// over levels that still hold at least 32 blocks.
pub fn blocking_error(series: &[f64]) -> f64 {
    let mut x = series.to_vec();
    let mut best = 0.0f64;
    while x.len() >= 32 {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        best = best.max((var / n).sqrt());
        x = x.chunks_exact(2).map(|p| 0.5 * (p[0] + p[1])).collect();
    }
    best
}

pub fn pimc_energy(spec: &TrapSpec, cfg: &PimcConfig) -> Result<PimcResult> {
    cfg.validate()?;
    if !(spec.g2 >= 0.0) {
        return Err(Error::InvalidConfig("g2 must be non-negative".into()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let (m, d, np) = (cfg.n_slices(), spec.space_dim, spec.n_particles);
    let n = d * np;
    let mut path = Path::zeros(m, n);
    // Start from a spread configuration so the Yukawa term stays finite.
    let start: Vec<f64> = (0..n).map(|_| 0.7 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
    for j in 0..m {
        path.pos[j * n..(j + 1) * n].copy_from_slice(&start);
    }
    let (mut bead_acc, mut bead_try, mut com_acc, mut com_try) = (0usize, 0usize, 0usize, 0usize);
    let (mut stage_acc, mut stage_try) = (0usize, 0usize);
    let len = cfg.staging_length;
    let mut virial = Vec::with_capacity(cfg.n_sweeps);
    let mut thermo = Vec::with_capacity(cfg.n_sweeps);
    let mut delta = vec![0.0; d];
    for sweep in 0..cfg.n_therm + cfg.n_sweeps {
        for _ in 0..m * np {
            let j = rng.random_range(0..m);
            let p = rng.random_range(0..np);
            draw(&mut delta, cfg.move_width, &mut rng);
            let ds = bead_action_change(spec, cfg.dtau, &path, j, p, &delta)?;
            bead_try += 1;
            if accept(ds, &mut rng) {
                bead_acc += 1;
                for (i, dl) in delta.iter().enumerate() {
                    path.pos[j * n + p * d + i] += dl;
                }
            }
        }
        if len > 0 {
            for _ in 0..(m / len).max(1) * np {
                let j = rng.random_range(0..m);
                let p = rng.random_range(0..np);
                let beads = staging_proposal(spec, cfg.dtau, &path, j, len, p, &mut rng);
                let ds = staging_action_change(spec, cfg.dtau, &path, j, p, &beads)?;
                stage_try += 1;
                if accept(ds, &mut rng) {
                    stage_acc += 1;
                    for (k, b) in beads.iter().enumerate() {
                        let s = (j + k + 1) % m;
                        path.pos[s * n + p * d..s * n + (p + 1) * d].copy_from_slice(b);
                    }
                }
            }
        }
        for p in 0..np {
            draw(&mut delta, cfg.com_width, &mut rng);
            let ds = shift_action_change(spec, cfg.dtau, &path, p, &delta)?;
            com_try += 1;
            if accept(ds, &mut rng) {
                com_acc += 1;
                for j in 0..m {
                    for (i, dl) in delta.iter().enumerate() {
                        path.pos[j * n + p * d + i] += dl;
                    }
                }
            }
        }
        if sweep >= cfg.n_therm {
            let (v, t) = estimators(spec, cfg, &path)?;
            virial.push(v);
            thermo.push(t);
        }
    }
    let summarize = |s: &[f64]| EnergyEstimate {
        mean: s.iter().sum::<f64>() / s.len() as f64,
        std_error: blocking_error(s),
        n_samples: s.len(),
    };
    let bead_acceptance = bead_acc as f64 / bead_try as f64;
    let com_acceptance = com_acc as f64 / com_try as f64;
    let staging_acceptance = if stage_try > 0 {
        stage_acc as f64 / stage_try as f64
    } else {
        0.0
    };
    let mut warnings = Vec::new();
    if bead_acceptance < ACCEPTANCE_RANGE.0 || bead_acceptance > ACCEPTANCE_RANGE.1 {
        warnings.push(format!("bead acceptance {bead_acceptance:.3} outside [0.2, 0.8]; retune move_width"));
    }
    if com_acceptance < ACCEPTANCE_RANGE.0 || com_acceptance > ACCEPTANCE_RANGE.1 {
        warnings.push(format!("shift acceptance {com_acceptance:.3} outside [0.2, 0.8]; retune com_width"));
    }
    Ok(PimcResult {
        energy: summarize(&virial),
        thermodynamic: summarize(&thermo),
        bead_acceptance,
        com_acceptance,
        staging_acceptance,
        n_sweeps: cfg.n_sweeps,
        warnings,
    })
}

fn draw(delta: &mut [f64], width: f64, rng: &mut Rng) {
    for v in delta.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = width * z;
    }
}

fn accept(ds: f64, rng: &mut Rng) -> bool {
    ds <= 0.0 || rng.random::<f64>() < (-ds).exp()
}

/// Exact primitive-action energy of `n_dof` independent oscillators: the
/// Gaussian path integral diagonalizes on the cyclic lattice, giving
/// `E = n_dof (Δτω²/M) Σ_k 1/(2 − 2cos(2πk/M) + Δτ²ω²)`.
pub fn harmonic_trotter_energy(n_dof: usize, omega: f64, beta: f64, n_slices: usize) -> f64 {
    let m = n_slices as f64;
    let dtau = beta / m;
    let s: f64 = (0..n_slices)
        .map(|k| 1.0 / (2.0 - 2.0 * (2.0 * std::f64::consts::PI * k as f64 / m).cos() + (dtau * omega).powi(2)))
        .sum();
    n_dof as f64 * dtau * omega * omega / m * s
}
