//! File names inside a run directory.
//!
//! ```text
//! dataset.bin         DECODS01 bundle
//! cbm.ckpt            DECOCK01, stage "cbm"
//! gate.ckpt           DECOCK01, stage "gate"
//! report.{csv,json}   evaluation report
//! heatmap.csv         strategy-weighted concept activations
//! curve_rho<ρ>[_defer_only].{csv,json}
//! intervention.json   last `intervene` output
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use decode_core::eval::{CoverageCurve, Emit};

use crate::error::{CliError, Result};

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.root)?;
        Ok(())
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.bin")
    }

    pub fn cbm(&self) -> PathBuf {
        self.root.join("cbm.ckpt")
    }

    pub fn gate(&self) -> PathBuf {
        self.root.join("gate.ckpt")
    }

    pub fn report(&self, ext: &str) -> PathBuf {
        self.root.join(format!("report.{ext}"))
    }

    pub fn heatmap(&self) -> PathBuf {
        self.root.join("heatmap.csv")
    }

    pub fn intervention(&self) -> PathBuf {
        self.root.join("intervention.json")
    }

    /// ρ is written with shortest round-trip formatting, so `0.3` gives
    /// `curve_rho0.3.csv`.
    pub fn curve(&self, rho: f64, defer_only: bool, ext: &str) -> PathBuf {
        let suffix = if defer_only { "_defer_only" } else { "" };
        self.root.join(format!("curve_rho{rho}{suffix}.{ext}"))
    }

    /// Every `curve_*.json` in the directory, sorted by file name.
    pub fn load_curves(&self) -> Result<Vec<CoverageCurve>> {
        let mut paths: Vec<PathBuf> = match fs::read_dir(&self.root) {
            Ok(entries) => entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                    name.starts_with("curve_rho") && name.ends_with(".json")
                })
                .collect(),
            Err(_) => Vec::new(),
        };
        paths.sort();
        paths
            .iter()
            .map(|p| Ok(CoverageCurve::from_json(&fs::read_to_string(p)?)?))
            .collect()
    }
}

/// Fails with a missing-prerequisite error unless `path` exists.
pub fn require(path: PathBuf, what: &'static str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::MissingPrerequisite { what, path })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curve_names() {
        let dir = RunDir::new("/tmp/run");
        assert_eq!(dir.curve(0.3, false, "csv"), PathBuf::from("/tmp/run/curve_rho0.3.csv"));
        assert_eq!(dir.curve(0.0, true, "json"), PathBuf::from("/tmp/run/curve_rho0_defer_only.json"));
    }

    #[test]
    fn missing_file_is_prerequisite_error() {
        let tmp = tempfile::tempdir().unwrap();
        let err = require(tmp.path().join("cbm.ckpt"), "stage-1 checkpoint").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(RunDir::new(tmp.path()).load_curves().unwrap().is_empty());
    }
}
