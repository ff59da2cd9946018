//! Run-directory layout and overwrite protection. Every run directory holds
//! the resolved config, the code version, the metrics log, and (for search
//! runs) the derived architecture and checkpoint — enough to reproduce the
//! run exactly. Completed runs are never silently overwritten.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const VERSION_FILE: &str = "version.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DERIVED_ARCH_FILE: &str = "derived_arch.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";
pub const TRACE_FILE: &str = "grad_trace.csv";
pub const COMPLETE_MARKER: &str = "COMPLETE";

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Create (or reopen an incomplete) run directory and write the resolved
    /// config and code version. Refuses completed directories.
    pub fn create(root: &Path, resolved_config: &str) -> Result<Self> {
        let dir = RunDir { root: root.to_path_buf() };
        if dir.is_complete() {
            return Err(Error::Usage(format!(
                "run directory {} is already complete; choose a new directory",
                root.display()
            )));
        }
        std::fs::create_dir_all(root)?;
        std::fs::write(root.join(CONFIG_FILE), resolved_config)?;
        std::fs::write(
            root.join(VERSION_FILE),
            format!("{} {}\n", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
        )?;
        Ok(dir)
    }

    /// Open an existing run directory for reading (analyze/resume).
    pub fn open(root: &Path) -> Result<Self> {
        if !root.join(CONFIG_FILE).exists() {
            return Err(Error::Usage(format!(
                "{} is not a run directory (missing {CONFIG_FILE})",
                root.display()
            )));
        }
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn is_complete(&self) -> bool {
        self.root.join(COMPLETE_MARKER).exists()
    }

    /// Write an artifact; refuses once the run is marked complete.
    pub fn write(&self, name: &str, content: &str) -> Result<()> {
        if self.is_complete() {
            return Err(Error::Usage(format!(
                "run {} is complete; refusing to overwrite {name}",
                self.root.display()
            )));
        }
        std::fs::write(self.root.join(name), content)?;
        Ok(())
    }

    pub fn read(&self, name: &str) -> Result<String> {
        std::fs::read_to_string(self.root.join(name)).map_err(Error::Io)
    }

    pub fn mark_complete(&self) -> Result<()> {
        std::fs::write(self.root.join(COMPLETE_MARKER), "complete\n")?;
        Ok(())
    }
}
