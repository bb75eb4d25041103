//! Experiment configuration: presets, TOML overrides and validation.
//!
//! A run starts from the preset for its experiment, deep-merges the TOML
//! file on top and then applies command-line flags. The top-level `seed`
//! is copied into every sub-config so one number controls the whole run.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use nfqs::evolution::EvolveConfig;
use nfqs::flow::{Architecture, FlowModel, QcnfModel, QnvpModel};
use nfqs::hamiltonian::{HamiltonianSpec, Potential, TrapSpec, TunnelSpec};
use nfqs::nn::rng_from_seed;
use nfqs::oracle::pimc::PimcConfig;
use nfqs::variational::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Quick,
    Paper,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Ground,
    Evolve,
    Pimc,
    Exact,
    Check,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Ground => "ground",
            Experiment::Evolve => "evolve",
            Experiment::Pimc => "pimc",
            Experiment::Exact => "exact",
            Experiment::Check => "check",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Qnvp,
    Qcnf,
}

/// Flow architecture. `depth` counts coupling layers for QNVP and affine
/// maps of the vector field for QCNF.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub architecture: ArchKind,
    pub depth: usize,
    pub hidden_width: usize,
    pub layer_norm: bool,
    /// RK4 steps of a QCNF; ignored for QNVP.
    pub ode_steps: usize,
    /// Uniform init half-width; `1/(depth·N)` when absent.
    pub init_scale: Option<f64>,
}

impl FlowConfig {
    pub fn architecture(&self, n_dof: usize) -> Result<Architecture, CliError> {
        if self.depth == 0 {
            return Err(CliError::Config("flow.depth must be at least 1".into()));
        }
        if self.hidden_width == 0 {
            return Err(CliError::Config("flow.hidden_width must be positive".into()));
        }
        Ok(match self.architecture {
            ArchKind::Qnvp => {
                Architecture::Qnvp(QnvpModel::new(n_dof, self.depth, vec![self.hidden_width], self.layer_norm)?)
            }
            ArchKind::Qcnf => Architecture::Qcnf(QcnfModel::new(
                n_dof,
                vec![self.hidden_width; self.depth - 1],
                self.layer_norm,
                self.ode_steps,
            )?),
        })
    }

    pub fn build(&self, n_dof: usize, seed: u64) -> Result<FlowModel, CliError> {
        let arch = self.architecture(n_dof)?;
        let mut rng = rng_from_seed(seed);
        Ok(match self.init_scale {
            Some(s) => FlowModel::init_with_scale(arch, s, &mut rng)?,
            None => FlowModel::init(arch, &mut rng)?,
        })
    }
}

/// Grid of `(g², depth)` pairs for the ground-state sweep.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub g2: Vec<f64>,
    pub depth: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub preset: Preset,
    pub seed: u64,
    pub out: PathBuf,
    pub hamiltonian: HamiltonianSpec,
    pub flow: FlowConfig,
    /// Ground-state training.
    pub train: TrainConfig,
    /// Training of the starting state before real-time evolution.
    pub init_train: TrainConfig,
    pub evolve: EvolveConfig,
    pub pimc: PimcConfig,
    /// Independent ground-state trainings; the lowest energy is kept.
    pub restarts: usize,
    pub sweep: Option<SweepConfig>,
    /// Times at which density snapshots are written.
    pub snapshot_times: Vec<f64>,
    /// Also run the grid oracle alongside `evolve`.
    pub compare_grid: bool,
    /// Crank–Nicolson step of the grid oracle.
    pub grid_dt: f64,
    /// Write a checkpoint for every evolution step.
    pub save_states: bool,
}

impl ExperimentConfig {
    pub fn preset(experiment: Experiment, preset: Preset) -> Self {
        let quick = preset == Preset::Quick;
        let trap = HamiltonianSpec::trap(TrapSpec::default());
        let tunnel = HamiltonianSpec::tunnel(TunnelSpec::default());
        let hamiltonian = match experiment {
            Experiment::Evolve | Experiment::Exact => tunnel,
            _ => trap,
        };
        let flow = match experiment {
            Experiment::Evolve => FlowConfig {
                architecture: ArchKind::Qcnf,
                depth: 2,
                hidden_width: 32,
                layer_norm: !quick,
                ode_steps: if quick { 8 } else { 16 },
                init_scale: None,
            },
            _ => FlowConfig {
                architecture: ArchKind::Qnvp,
                depth: 2,
                hidden_width: 32,
                layer_norm: true,
                ode_steps: 16,
                init_scale: None,
            },
        };
        let train = if quick {
            TrainConfig {
                steps: 5_000,
                batch: 1 << 8,
                ..TrainConfig::default()
            }
        } else {
            TrainConfig::default()
        };
        let init_train = if quick {
            TrainConfig {
                steps: 1_000,
                batch: 1 << 8,
                learning_rate: 3e-3,
                ..TrainConfig::default()
            }
        } else {
            TrainConfig {
                steps: 10_000,
                ..TrainConfig::default()
            }
        };
        let evolve = if quick {
            EvolveConfig {
                batch: 1 << 8,
                learning_rate: 3e-3,
                max_inner_iters: 300,
                ..EvolveConfig::default()
            }
        } else {
            EvolveConfig::default()
        };
        let pimc = if quick {
            PimcConfig {
                n_sweeps: 20_000,
                n_therm: 2_000,
                ..PimcConfig::default()
            }
        } else {
            PimcConfig::default()
        };
        ExperimentConfig {
            experiment,
            preset,
            seed: 0,
            out: PathBuf::from("runs").join(experiment.name()),
            hamiltonian,
            flow,
            train,
            init_train,
            evolve,
            pimc,
            restarts: 1,
            sweep: None,
            snapshot_times: vec![1.0, 3.0, 5.0],
            compare_grid: true,
            grid_dt: nfqs::oracle::grid::DEFAULT_GRID_DT,
            save_states: false,
        }
    }

    /// Preset, then the TOML file, then `seed`/`out` overrides.
    pub fn resolve(
        experiment: Experiment,
        preset: Preset,
        file: Option<&Path>,
        seed: Option<u64>,
        out: Option<&Path>,
    ) -> Result<Self, CliError> {
        let base = Self::preset(experiment, preset);
        let mut cfg = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
                Self::overlay(&base, &text)?
            }
            None => base,
        };
        cfg.experiment = experiment;
        cfg.preset = preset;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(o) = out {
            cfg.out = o.to_path_buf();
        }
        cfg.train.seed = cfg.seed;
        cfg.init_train.seed = cfg.seed;
        cfg.evolve.seed = cfg.seed;
        cfg.pimc.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `base` with the keys of the TOML document `text` merged over it.
    pub fn overlay(base: &Self, text: &str) -> Result<Self, CliError> {
        let doc: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        let mut merged = toml::Value::try_from(base).map_err(|e| CliError::Config(format!("{e}")))?;
        merge(&mut merged, toml::Value::Table(doc));
        merged.try_into().map_err(|e| CliError::Config(format!("{e}")))
    }

    /// Checks every sub-config the experiment will touch.
    pub fn validate(&self) -> Result<(), CliError> {
        match self.experiment {
            Experiment::Ground => {
                self.hamiltonian.validate()?;
                self.train.validate()?;
                self.flow.architecture(self.hamiltonian.n_dof())?;
                if self.restarts == 0 {
                    return Err(CliError::Config("restarts must be at least 1".into()));
                }
                if let Some(s) = &self.sweep {
                    if s.g2.is_empty() || s.depth.is_empty() {
                        return Err(CliError::Config("sweep needs at least one g2 and one depth".into()));
                    }
                    if !matches!(self.hamiltonian.potential, Potential::Trap(_)) {
                        return Err(CliError::Config("sweeps run over the trap potential".into()));
                    }
                    for &d in &s.depth {
                        let f = FlowConfig { depth: d, ..self.flow.clone() };
                        f.architecture(self.hamiltonian.n_dof())?;
                    }
                }
            }
            Experiment::Evolve => {
                self.hamiltonian.validate()?;
                self.init_train.validate()?;
                self.evolve.validate()?;
                self.flow.architecture(1)?;
                if self.hamiltonian.n_dof() != 1 {
                    return Err(CliError::Config("evolution runs need a one-coordinate potential".into()));
                }
                self.check_grid_dt()?;
            }
            Experiment::Exact => {
                self.hamiltonian.validate()?;
                self.evolve.validate()?;
                if self.hamiltonian.n_dof() != 1 {
                    return Err(CliError::Config("the grid oracle needs a one-coordinate potential".into()));
                }
                self.check_grid_dt()?;
            }
            Experiment::Pimc => {
                self.hamiltonian.validate()?;
                self.pimc.validate()?;
                self.trap()?;
            }
            Experiment::Check => {}
        }
        if self.snapshot_times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            return Err(CliError::Config("snapshot times must be non-negative".into()));
        }
        Ok(())
    }

    fn check_grid_dt(&self) -> Result<(), CliError> {
        if !(self.grid_dt > 0.0 && self.grid_dt <= nfqs::oracle::grid::MAX_GRID_DT) {
            return Err(CliError::Config(format!(
                "grid_dt must lie in (0, {}]",
                nfqs::oracle::grid::MAX_GRID_DT
            )));
        }
        Ok(())
    }

    pub fn trap(&self) -> Result<&TrapSpec, CliError> {
        match &self.hamiltonian.potential {
            Potential::Trap(t) => Ok(t),
            _ => Err(CliError::Config("this experiment needs the trap potential".into())),
        }
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        // A different tagged variant replaces the table wholesale.
        (toml::Value::Table(b), toml::Value::Table(o)) if o.contains_key("kind") && b.get("kind") != o.get("kind") => {
            *b = o;
        }
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
