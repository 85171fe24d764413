use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// On-disk layout of one model's artifacts under a workspace root:
///
/// ```text
/// <root>/<model>/pool.json
/// <root>/<model>/trace.csv
/// <root>/<model>/coeffs.json
/// <root>/<model>/reports/
/// ```
#[derive(Debug, Clone)]
pub struct WorkspaceLayout {
    root: PathBuf,
    model: String,
}

impl WorkspaceLayout {
    pub fn new(root: impl Into<PathBuf>, model: &str) -> Self {
        WorkspaceLayout { root: root.into(), model: model.to_ascii_lowercase() }
    }

    pub fn model_dir(&self) -> PathBuf {
        self.root.join(&self.model)
    }

    pub fn pool(&self) -> PathBuf {
        self.model_dir().join("pool.json")
    }

    pub fn trace(&self) -> PathBuf {
        self.model_dir().join("trace.csv")
    }

    pub fn coeffs(&self) -> PathBuf {
        self.model_dir().join("coeffs.json")
    }

    pub fn reports(&self) -> PathBuf {
        self.model_dir().join("reports")
    }

    pub fn report(&self, file: &str) -> PathBuf {
        self.reports().join(file)
    }

    fn lock_path(&self) -> PathBuf {
        self.model_dir().join(".lock")
    }

    /// Creates the model and report directories.
    pub fn ensure_dirs(&self) -> Result<()> {
        let reports = self.reports();
        fs::create_dir_all(&reports).map_err(|e| Error::io(reports, e))
    }

    /// Fails with `MissingArtifact` unless `path` exists.
    pub fn require(path: &Path) -> Result<&Path> {
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact(path.to_path_buf()))
        }
    }

    /// Takes the advisory lock for this model directory.
    pub fn lock(&self) -> Result<WorkspaceLock> {
        self.ensure_dirs()?;
        let path = self.lock_path();
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(WorkspaceLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::validation(
                "workspace",
                format!("{} is held by another invocation; delete it if that process is gone", path.display()),
            )),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

/// Held for the duration of a mutating command; released on drop.
#[derive(Debug)]
pub struct WorkspaceLock {
    path: PathBuf,
}

impl Drop for WorkspaceLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub(crate) fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_is_refused_until_first_drops() {
        let dir = tempfile::tempdir().unwrap();
        let ws = WorkspaceLayout::new(dir.path(), "olmoe");
        let held = ws.lock().unwrap();
        assert!(ws.lock().is_err());
        drop(held);
        assert!(ws.lock().is_ok());
    }

    #[test]
    fn missing_artifact_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let ws = WorkspaceLayout::new(dir.path(), "olmoe");
        let err = WorkspaceLayout::require(&ws.trace()).unwrap_err();
        assert!(err.to_string().contains("trace.csv"));
    }
}
