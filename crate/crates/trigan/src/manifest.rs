//! Run manifests: a JSON record tying together the config snapshot, the
//! seeds, and the artifact files of one experiment, written once after all
//! repetitions finish. Loading a manifest is the entry point for reporting.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest references missing file {0}")]
    MissingFile(PathBuf),
    #[error("manifest {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Artifacts of a single repetition. Paths are relative to the manifest's
/// directory so a finished experiment can be moved wholesale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub metrics_csv: PathBuf,
    pub training_log_csv: PathBuf,
    /// Final checkpoint; absent for methods that train no generator.
    pub checkpoint: Option<PathBuf>,
    pub duration_secs: f64,
}

/// Everything needed to interpret or reproduce one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Canonical serialized `ExperimentConfig`.
    pub config: String,
    pub method: String,
    pub balanced_ratio: f64,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunRecord>,
}

impl RunManifest {
    /// All files a record references, relative to the manifest directory.
    fn referenced_files(record: &RunRecord) -> impl Iterator<Item = &PathBuf> {
        [&record.metrics_csv, &record.training_log_csv]
            .into_iter()
            .chain(record.checkpoint.as_ref())
    }

    /// Writes the manifest after checking that every referenced artifact
    /// exists on disk.
    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for record in &self.runs {
            for rel in Self::referenced_files(record) {
                let file = base.join(rel);
                if !file.is_file() {
                    return Err(ManifestError::MissingFile(file));
                }
            }
        }
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest, ManifestError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| ManifestError::Corrupt {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}
