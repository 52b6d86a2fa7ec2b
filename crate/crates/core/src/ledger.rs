//! Versioned JSON result ledgers and JSON-lines training logs.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GcaError, Result};
use crate::eval::EpochRecord;
use crate::experiment::{TaskResult, TransferTable};
use crate::objective::Variant;
use crate::synthgen::RawSeries;
use crate::trainer::StepRecord;

pub const LEDGER_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub test_rmse: f64,
    pub test_mae: f64,
    pub val_rmse: f64,
    #[serde(default)]
    pub auprc_source: Option<f64>,
    #[serde(default)]
    pub auprc_target: Option<f64>,
    #[serde(default)]
    pub structure_l1: Option<f64>,
}

/// Structures as nested `[lag][u][v]` arrays.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerStructures {
    #[serde(default)]
    pub source: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub target: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub truth_source: Option<Vec<Vec<Vec<u8>>>>,
    #[serde(default)]
    pub truth_target: Option<Vec<Vec<Vec<u8>>>>,
}

/// Everything recorded about one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub schema_version: u32,
    pub source: String,
    pub target: String,
    pub variant: Variant,
    /// Set for every variant other than the full model.
    pub ablation: bool,
    pub seed: u64,
    pub config_hash: String,
    pub data_hash: String,
    pub metrics: Metrics,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub structures: LedgerStructures,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl RunLedger {
    pub fn from_task(task: &TaskResult, source: &RawSeries, target: &RawSeries) -> Result<Self> {
        let log = &task.outcome.log;
        Ok(RunLedger {
            schema_version: LEDGER_SCHEMA_VERSION,
            source: task.source_id.clone(),
            target: task.target_id.clone(),
            variant: task.variant,
            ablation: task.variant.is_ablation(),
            seed: task.seed,
            config_hash: task.outcome.best.config_hash.clone(),
            data_hash: data_hash(&[source, target]),
            metrics: Metrics {
                test_rmse: task.test_rmse,
                test_mae: task.test_mae,
                val_rmse: task.val_rmse,
                auprc_source: task.auprc_source,
                auprc_target: task.auprc_target,
                structure_l1: task.structure_l1,
            },
            best_epoch: log.best_epoch,
            stopped_early: log.stopped_early,
            epochs: log.epochs.clone(),
            steps: log.steps.clone(),
            structures: LedgerStructures {
                source: task.source_structure.as_ref().map(|s| s.to_nested()),
                target: task.target_structure.as_ref().map(|s| s.to_nested()),
                truth_source: source.ground_truth.as_ref().map(|g| g.adjacency.clone()),
                truth_target: target.ground_truth.as_ref().map(|g| g.adjacency.clone()),
            },
            checkpoint: None,
        })
    }
}

/// Result of a transfer-matrix command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixLedger {
    pub schema_version: u32,
    pub config_hash: String,
    pub data_hash: String,
    pub seeds: Vec<u64>,
    pub table: TransferTable,
    pub rendered: String,
}

/// SHA-256 over a `blob <id> <bytes>\0` header per series followed by the
/// little-endian bytes of its values.
pub fn data_hash(series: &[&RawSeries]) -> String {
    let mut h = Sha256::new();
    for s in series {
        let bytes = s.values.len() * 8;
        h.update(format!("blob {} {bytes}\0", s.domain_id).as_bytes());
        for x in s.values.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| GcaError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| GcaError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| GcaError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads a run ledger, rejecting unknown schema versions.
pub fn read_run_ledger(path: &Path) -> Result<RunLedger> {
    let value: serde_json::Value = read_json(path)?;
    let version = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| GcaError::MissingField("schema_version".into()))?;
    if version != LEDGER_SCHEMA_VERSION as u64 {
        return Err(GcaError::InvalidArgument(format!(
            "unsupported ledger schema version {version}"
        )));
    }
    Ok(serde_json::from_value(value)?)
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| GcaError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| GcaError::io(path, e))?;
    }
    w.flush().map_err(|e| GcaError::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| GcaError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// First `base`, `base-2`, `base-3`, … that does not exist yet.
pub fn versioned_dir(base: &Path) -> PathBuf {
    if !base.exists() {
        return base.to_path_buf();
    }
    let name = base
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    (2..)
        .map(|i| base.with_file_name(format!("{name}-{i}")))
        .find(|p| !p.exists())
        .expect("unbounded search")
}
