//! Workspace layout and the single-invocation lock.

use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use crate::{CliError, Result};

pub const LOCK_FILE: &str = ".lock";
pub const STAMP_FILE: &str = ".stamp";
pub const RESOLVED_CONFIG: &str = "config.conf";

/// Paths of every artifact, all under one root.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn cohort_dir(&self) -> PathBuf {
        self.root.join("cohort")
    }

    pub fn dataset_dir(&self, label: &str) -> PathBuf {
        self.root.join("datasets").join(label)
    }

    /// Runs of one ablation are kept apart per training seed.
    pub fn run_dir(&self, label: &str, seed: u64) -> PathBuf {
        self.root.join("runs").join(label).join(format!("seed-{seed}"))
    }

    pub fn label_runs(&self, label: &str) -> PathBuf {
        self.root.join("runs").join(label)
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn lock(&self) -> Result<WorkspaceLock> {
        fs::create_dir_all(&self.root)?;
        let path = self.root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(WorkspaceLock { path }),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

/// Removes the lock file when dropped.
#[derive(Debug)]
pub struct WorkspaceLock {
    path: PathBuf,
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// True when `dir` holds a stamp equal to `stamp`.
pub fn stamp_matches(dir: &Path, stamp: &str) -> bool {
    fs::read_to_string(dir.join(STAMP_FILE)).is_ok_and(|s| s == stamp)
}

pub fn write_stamp(dir: &Path, stamp: &str) -> Result<()> {
    fs::write(dir.join(STAMP_FILE), stamp)?;
    Ok(())
}

/// Empties `dir` (which must lie under the workspace) and recreates it.
pub fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path().join("ws"));
        let held = ws.lock().unwrap();
        assert!(matches!(ws.lock(), Err(CliError::Locked(_))));
        drop(held);
        assert!(ws.lock().is_ok());
    }

    #[test]
    fn layout_stays_under_root() {
        let ws = Workspace::new("/w");
        assert_eq!(ws.run_dir("1-2h", 3), Path::new("/w/runs/1-2h/seed-3"));
        assert_eq!(ws.dataset_dir("pre-injection"), Path::new("/w/datasets/pre-injection"));
    }
}
