//! On-disk layout of one experiment run.
//!
//! ```text
//! <root>/
//!   config.toml          echo of the effective configuration
//!   checkpoints/         sen.safetensors, rdg.safetensors, eval_backbone.safetensors
//!   history/             sen.csv, rdg.csv
//!   samples/             samples_step{N}.png
//!   reports/             metrics.json, metrics-1.json, ...
//! ```
//!
//! New runs never reuse a directory: `runs/exp` is followed by `runs/exp-1`,
//! `runs/exp-2` and so on.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const SUBDIRS: [&str; 4] = ["checkpoints", "history", "samples", "reports"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExperimentDir {
    root: PathBuf,
}

/// First of `stem.ext`, `stem-1.ext`, `stem-2.ext`, ... that does not exist in `dir`.
pub fn unused_path(dir: &Path, stem: &str, ext: Option<&str>) -> PathBuf {
    let name = |i: usize| {
        let base = if i == 0 { stem.to_string() } else { format!("{stem}-{i}") };
        match ext {
            Some(e) => format!("{base}.{e}"),
            None => base,
        }
    };
    (0..)
        .map(|i| dir.join(name(i)))
        .find(|p| !p.exists())
        .expect("unbounded search")
}

impl ExperimentDir {
    /// Creates a fresh run directory under `parent`, suffixing `name` if taken.
    pub fn create(parent: &Path, name: &str) -> Result<Self> {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        loop {
            let root = unused_path(parent, name, None);
            match std::fs::create_dir(&root) {
                Ok(()) => {
                    let dir = Self { root };
                    dir.make_subdirs()?;
                    return Ok(dir);
                }
                // lost a race with another process; try the next suffix
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(Error::io(root, e)),
            }
        }
    }

    /// Opens an existing run (for resuming or adding stages).
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Validation(format!("{} is not an experiment directory", root.display())));
        }
        let dir = Self { root: root.to_path_buf() };
        dir.make_subdirs()?;
        Ok(dir)
    }

    fn make_subdirs(&self) -> Result<()> {
        for s in SUBDIRS {
            let p = self.root.join(s);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(p, e))?;
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    /// Writes the config echo unless one exists with the same content.
    /// A differing echo is a conflict: stages of one run share one config.
    pub fn write_config(&self, text: &str) -> Result<()> {
        let path = self.config_path();
        match std::fs::read_to_string(&path) {
            Ok(old) if old == text => Ok(()),
            Ok(_) => Err(Error::Compatibility(format!(
                "{} already holds a different configuration",
                path.display()
            ))),
            Err(_) => std::fs::write(&path, text).map_err(|e| Error::io(path, e)),
        }
    }

    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.safetensors"))
    }

    pub fn history(&self, stage: &str) -> PathBuf {
        self.root.join("history").join(format!("{stage}.csv"))
    }

    pub fn samples_dir(&self) -> PathBuf {
        self.root.join("samples")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// A report path that does not overwrite earlier reports.
    pub fn new_report_path(&self, stem: &str) -> PathBuf {
        unused_path(&self.reports_dir(), stem, Some("json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs_never_share_a_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let a = ExperimentDir::create(tmp.path(), "exp").unwrap();
        let b = ExperimentDir::create(tmp.path(), "exp").unwrap();
        let c = ExperimentDir::create(tmp.path(), "exp").unwrap();
        assert_eq!(a.root(), tmp.path().join("exp"));
        assert_eq!(b.root(), tmp.path().join("exp-1"));
        assert_eq!(c.root(), tmp.path().join("exp-2"));
        assert!(a.samples_dir().is_dir() && a.reports_dir().is_dir());
    }

    #[test]
    fn reports_are_suffixed() {
        let tmp = tempfile::tempdir().unwrap();
        let d = ExperimentDir::create(tmp.path(), "e").unwrap();
        let p = d.new_report_path("metrics");
        std::fs::write(&p, "{}").unwrap();
        assert_eq!(d.new_report_path("metrics"), d.reports_dir().join("metrics-1.json"));
    }

    #[test]
    fn config_echo_conflicts_are_caught() {
        let tmp = tempfile::tempdir().unwrap();
        let d = ExperimentDir::create(tmp.path(), "e").unwrap();
        d.write_config("seed = 1\n").unwrap();
        d.write_config("seed = 1\n").unwrap();
        assert!(matches!(d.write_config("seed = 2\n"), Err(Error::Compatibility(_))));
    }
}
