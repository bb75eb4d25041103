//! Output directory bookkeeping and the per-run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";

/// Writes files under one directory and remembers their names.
pub struct OutDir {
    pub root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root)?;
        Ok(OutDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.root.join(name)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let p = self.path(name);
        fs::write(p, serde_json::to_string_pretty(value)? + "\n")?;
        Ok(())
    }

    pub fn csv<I, R>(&mut self, name: &str, header: &[&str], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = R>,
        R: IntoIterator<Item = String>,
    {
        let mut w = csv::Writer::from_path(self.path(name))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn outputs(&self) -> &[String] {
        &self.written
    }
}

#[derive(Serialize)]
pub struct Manifest<'a> {
    pub experiment: &'a str,
    pub preset: crate::config::Preset,
    pub seed: u64,
    pub version: &'static str,
    pub wall_time_s: f64,
    pub outputs: Vec<String>,
    pub config: &'a ExperimentConfig,
}

pub fn write_manifest(out: &OutDir, cfg: &ExperimentConfig, started: Instant) -> Result<(), CliError> {
    let mut outputs = out.outputs().to_vec();
    outputs.sort();
    outputs.dedup();
    let m = Manifest {
        experiment: cfg.experiment.name(),
        preset: cfg.preset,
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        wall_time_s: started.elapsed().as_secs_f64(),
        outputs,
        config: cfg,
    };
    fs::write(out.root.join(MANIFEST), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

/// Shortest round-trip decimal form.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}
