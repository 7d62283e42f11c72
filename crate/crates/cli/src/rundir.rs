//! Run-directory plumbing: the exclusive lock, config snapshots, seed
//! records and append-only JSON-lines logs.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const LOCK_FILE: &str = ".lock";

/// Holds `<dir>/.lock` for its lifetime.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Locked(dir.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Every seed a run derives from the configured master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub net_init: u64,
    pub pretrain_scenes: u64,
    pub adapters: u64,
    pub conditions: u64,
    pub sampler: u64,
    pub eval_scenes: u64,
    pub eval_noise: u64,
}

impl Seeds {
    pub fn derive(cfg: &RunConfig) -> Self {
        let s = cfg.seed;
        Self {
            master: s,
            net_init: s,
            pretrain_scenes: s.wrapping_add(1),
            adapters: s.wrapping_add(2),
            conditions: s.wrapping_add(3),
            sampler: s.wrapping_add(4),
            eval_scenes: cfg.eval_seed,
            eval_noise: cfg.eval_seed.wrapping_add(1),
        }
    }
}

/// Writes `<stem>.config.toml` and `<stem>.seeds.json` into the run directory.
pub fn snapshot(dir: &Path, stem: &str, cfg: &RunConfig) -> Result<Seeds, CliError> {
    let seeds = Seeds::derive(cfg);
    std::fs::write(dir.join(format!("{stem}.config.toml")), cfg.to_toml())?;
    let json = serde_json::to_string_pretty(&seeds).expect("seeds serialise");
    std::fs::write(dir.join(format!("{stem}.seeds.json")), json + "\n")?;
    Ok(seeds)
}

/// An append-only JSON-lines file, truncated when opened.
pub struct JsonLines {
    file: File,
}

impl JsonLines {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        Ok(Self {
            file: File::create(path)?,
        })
    }

    pub fn append(path: &Path) -> Result<Self, CliError> {
        Ok(Self {
            file: OpenOptions::new().create(true).append(true).open(path)?,
        })
    }

    pub fn write<T: Serialize>(&mut self, value: &T) -> Result<(), CliError> {
        let line = serde_json::to_string(value).map_err(|e| CliError::Input(e.to_string()))?;
        writeln!(self.file, "{line}")?;
        self.file.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_fails_until_first_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let first = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(
            RunLock::acquire(dir.path()),
            Err(CliError::Locked(_))
        ));
        drop(first);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn snapshot_writes_config_and_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            seed: 7,
            ..RunConfig::default()
        };
        let seeds = snapshot(dir.path(), "train", &cfg).unwrap();
        let back = RunConfig::load(&dir.path().join("train.config.toml")).unwrap();
        assert_eq!(back, cfg);
        let s: Seeds = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("train.seeds.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(s, seeds);
        assert_eq!(s.master, 7);
    }
}
