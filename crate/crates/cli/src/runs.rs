//! Layout of a retrieval run directory:
//!
//! ```text
//! <run_dir>/<run>/manifest.json      how the run was produced
//!                 regions.json       ranked candidate regions
//!                 ground_truth.json  boxes the run should recall, if known
//!                 crops/<rank>.png   region thumbnails
//!                 labels.jsonl       reviewer verdicts (append-only)
//! ```

use std::path::{Path, PathBuf};

use objctx::dataset::{read_json, write_json, BoxRecord};
use objctx::retrieval::{CandidateRegion, GroundTruth, Mode};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Split};
use crate::error::{CliError, CliResult};

pub const RUN_VERSION: u32 = 1;

/// Where the context scores of a run came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ContextSource {
    Model { checkpoint: String },
    Prior,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub run: String,
    pub mode: Mode,
    pub context: ContextSource,
    pub split: Split,
    pub regions: usize,
    pub config: RunConfig,
}

/// Ground-truth boxes of one image, as stored in a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub image: String,
    pub boxes: Vec<BoxRecord>,
}

impl TruthRecord {
    pub fn to_ground_truth(&self) -> GroundTruth {
        GroundTruth {
            image: self.image.clone(),
            boxes: self.boxes.iter().map(BoxRecord::rect).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunDir {
    pub id: String,
    pub path: PathBuf,
}

impl RunDir {
    pub fn new(run_dir: &Path, id: &str) -> CliResult<Self> {
        if !valid_run_id(id) {
            return Err(CliError::Config(format!("bad run name `{id}`")));
        }
        Ok(Self {
            id: id.to_string(),
            path: run_dir.join(id),
        })
    }

    pub fn exists(&self) -> bool {
        self.manifest_path().is_file()
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.path.join("manifest.json")
    }

    pub fn regions_path(&self) -> PathBuf {
        self.path.join("regions.json")
    }

    pub fn truth_path(&self) -> PathBuf {
        self.path.join("ground_truth.json")
    }

    pub fn labels_path(&self) -> PathBuf {
        self.path.join("labels.jsonl")
    }

    pub fn crop_path(&self, rank: usize) -> PathBuf {
        self.path.join("crops").join(format!("{rank}.png"))
    }

    pub fn manifest(&self) -> CliResult<RunManifest> {
        let m: RunManifest = read_json(&self.manifest_path(), "run manifest")?;
        if m.version != RUN_VERSION {
            return Err(objctx::Error::Version {
                found: m.version,
                expected: RUN_VERSION,
            }
            .into());
        }
        Ok(m)
    }

    pub fn regions(&self) -> CliResult<Vec<CandidateRegion>> {
        Ok(read_json(&self.regions_path(), "region list")?)
    }

    /// `None` when the run has no ground truth.
    pub fn truth(&self) -> CliResult<Option<Vec<GroundTruth>>> {
        let p = self.truth_path();
        if !p.is_file() {
            return Ok(None);
        }
        let records: Vec<TruthRecord> = read_json(&p, "ground truth")?;
        Ok(Some(
            records.iter().map(TruthRecord::to_ground_truth).collect(),
        ))
    }

    pub fn write(
        &self,
        manifest: &RunManifest,
        regions: &[CandidateRegion],
        truth: Option<&[TruthRecord]>,
    ) -> CliResult<()> {
        std::fs::create_dir_all(self.path.join("crops"))
            .map_err(|e| CliError::io(&self.path, e))?;
        write_json(&self.manifest_path(), manifest)?;
        write_json(&self.regions_path(), &regions)?;
        match truth {
            Some(t) => write_json(&self.truth_path(), &t)?,
            None => {
                let _ = std::fs::remove_file(self.truth_path());
            }
        }
        Ok(())
    }
}

/// Run names become directory names, so keep them to a safe alphabet.
pub fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Runs under `run_dir` with a manifest, sorted by name.
pub fn list_runs(run_dir: &Path) -> CliResult<Vec<RunDir>> {
    let entries = match std::fs::read_dir(run_dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(CliError::io(run_dir, e)),
    };
    let mut runs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(run_dir, e))?;
        let Some(name) = entry.file_name().to_str().map(str::to_owned) else {
            continue;
        };
        if let Ok(run) = RunDir::new(run_dir, &name) {
            if run.exists() {
                runs.push(run);
            }
        }
    }
    runs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(runs)
}
