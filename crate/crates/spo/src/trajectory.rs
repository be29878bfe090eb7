//! Per-iteration audit records and their on-disk layout.
//!
//! A run directory holds:
//!
//! - `run.json`: config, the task template (as YAML text), resolved model ids
//! - `bootstrap.json`: the seed prompt's first execution (questions, batch, usage)
//! - `trajectory.jsonl`: one [`IterationRecord`] per line, appended and
//!   flushed before the next iteration starts
//! - `best_prompt.txt`, `cost.json`: written when a run finishes
//!
//! Records are serialized with a fixed field order and no timestamps, so two
//! runs with the same seed and scripts produce byte-identical trajectories,
//! and a resumed run appends bytes identical to what the uninterrupted run
//! would have written.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::FileConfig;
use crate::evaluator::EvaluationVerdict;
use crate::executor::ExecutionBatch;
use crate::llm::RoleTotals;
use crate::optimizer::PromptCandidate;

pub const RUN_META_FILE: &str = "run.json";
pub const BOOTSTRAP_FILE: &str = "bootstrap.json";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";
pub const BEST_PROMPT_FILE: &str = "best_prompt.txt";
pub const COST_FILE: &str = "cost.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IterationStatus {
    Completed,
    FailedPropose,
    FailedExecute,
    FailedEvaluate,
}

/// Full audit trail of one loop iteration. Stages that never ran (because an
/// earlier one failed) stay `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub index: u64,
    pub candidate: Option<PromptCandidate>,
    pub batch: Option<ExecutionBatch>,
    pub verdict: Option<EvaluationVerdict>,
    pub accepted: bool,
    pub questions: Vec<String>,
    pub usage: RoleTotals,
    pub status: IterationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The seed prompt's execution before iteration 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRecord {
    pub questions: Vec<String>,
    pub batch: ExecutionBatch,
    pub usage: RoleTotals,
}

/// Resolved model ids, one per role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleModels {
    pub optimizer: String,
    pub executor: String,
    pub evaluator: String,
}

/// Everything needed to reproduce or resume a run, written once at start:
/// the full configuration (loop, models, pricing), the task template text,
/// and the resolved model ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub config: FileConfig,
    /// The task template as YAML text, revalidated on resume.
    pub template_yaml: String,
    pub models: RoleModels,
}

/// Aggregated accounting for a whole trajectory (bootstrap included).
/// Derived purely from persisted records, so it spans resumed runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub per_role: RoleTotals,
    pub total_calls: u64,
    pub total_cost: f64,
}

pub fn cost_report(bootstrap: Option<&BootstrapRecord>, records: &[IterationRecord]) -> CostReport {
    let mut per_role = RoleTotals::default();
    if let Some(b) = bootstrap {
        per_role.merge(&b.usage);
    }
    for record in records {
        per_role.merge(&record.usage);
    }
    CostReport {
        total_calls: per_role.total_calls(),
        total_cost: per_role.total_cost(),
        per_role,
    }
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("trajectory I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt trajectory at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error("{0} is not a run directory (missing {RUN_META_FILE})")]
    NotARunDir(PathBuf),
    #[error("malformed {file}: {message}")]
    MalformedSidecar { file: &'static str, message: String },
}

/// Where the loop persists its progress.
pub trait TrajectoryStore {
    fn save_bootstrap(&mut self, record: &BootstrapRecord) -> Result<(), TrajectoryError>;
    fn append(&mut self, record: &IterationRecord) -> Result<(), TrajectoryError>;
}

/// In-memory store for tests and library callers that do their own persistence.
#[derive(Debug, Default)]
pub struct MemoryStore {
    pub bootstrap: Option<BootstrapRecord>,
    pub records: Vec<IterationRecord>,
}

impl TrajectoryStore for MemoryStore {
    fn save_bootstrap(&mut self, record: &BootstrapRecord) -> Result<(), TrajectoryError> {
        self.bootstrap = Some(record.clone());
        Ok(())
    }

    fn append(&mut self, record: &IterationRecord) -> Result<(), TrajectoryError> {
        self.records.push(record.clone());
        Ok(())
    }
}

/// A run directory on disk.
pub struct RunDir {
    dir: PathBuf,
    writer: Option<BufWriter<File>>,
}

impl RunDir {
    /// Create (or take over) a directory for a new run: writes `run.json` and
    /// an empty `trajectory.jsonl`.
    pub fn create(dir: &Path, meta: &RunMeta) -> Result<Self, TrajectoryError> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_string_pretty(meta).expect("meta serializes");
        std::fs::write(dir.join(RUN_META_FILE), json)?;
        std::fs::write(dir.join(TRAJECTORY_FILE), "")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            writer: None,
        })
    }

    /// Open an existing run directory for resume or inspection.
    pub fn open_existing(dir: &Path) -> Result<Self, TrajectoryError> {
        if !dir.join(RUN_META_FILE).is_file() {
            return Err(TrajectoryError::NotARunDir(dir.to_path_buf()));
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            writer: None,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn load_meta(&self) -> Result<RunMeta, TrajectoryError> {
        let raw = std::fs::read_to_string(self.dir.join(RUN_META_FILE))?;
        serde_json::from_str(&raw).map_err(|e| TrajectoryError::MalformedSidecar {
            file: RUN_META_FILE,
            message: e.to_string(),
        })
    }

    pub fn load_bootstrap(&self) -> Result<Option<BootstrapRecord>, TrajectoryError> {
        let path = self.dir.join(BOOTSTRAP_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw)
            .map(Some)
            .map_err(|e| TrajectoryError::MalformedSidecar {
                file: BOOTSTRAP_FILE,
                message: e.to_string(),
            })
    }

    /// Read all records; a line that fails to parse names its 1-based index.
    pub fn load_records(&self) -> Result<Vec<IterationRecord>, TrajectoryError> {
        let path = self.dir.join(TRAJECTORY_FILE);
        if !path.is_file() {
            return Ok(Vec::new());
        }
        let raw = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(line).map_err(|e| TrajectoryError::Corrupt {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(record);
        }
        Ok(records)
    }

    pub fn write_best_prompt(&self, text: &str) -> Result<(), TrajectoryError> {
        std::fs::write(self.dir.join(BEST_PROMPT_FILE), text)?;
        Ok(())
    }

    pub fn write_cost_report(&self, report: &CostReport) -> Result<(), TrajectoryError> {
        let json = serde_json::to_string_pretty(report).expect("report serializes");
        std::fs::write(self.dir.join(COST_FILE), json)?;
        Ok(())
    }

    fn writer(&mut self) -> Result<&mut BufWriter<File>, TrajectoryError> {
        if self.writer.is_none() {
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.dir.join(TRAJECTORY_FILE))?;
            self.writer = Some(BufWriter::new(file));
        }
        Ok(self.writer.as_mut().unwrap())
    }
}

impl TrajectoryStore for RunDir {
    fn save_bootstrap(&mut self, record: &BootstrapRecord) -> Result<(), TrajectoryError> {
        let json = serde_json::to_string_pretty(record).expect("bootstrap serializes");
        std::fs::write(self.dir.join(BOOTSTRAP_FILE), json)?;
        Ok(())
    }

    fn append(&mut self, record: &IterationRecord) -> Result<(), TrajectoryError> {
        let line = serde_json::to_string(record).expect("record serializes");
        let writer = self.writer()?;
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(())
    }
}
