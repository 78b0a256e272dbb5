//! Run-log records, the newline-delimited persistence format, and the
//! in-memory artifacts every evaluation reads from.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::domain::{AgentId, CellId, ConfusionMatrix, ZoneId};
use crate::error::{Error, Result};
use crate::learner::ModelSnapshot;

pub const SCHEMA_VERSION: &str = "msc-tta/1";

/// First line of every run log and emitted report file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogHeader {
    pub schema: String,
    pub config_hash: String,
    pub seed: u64,
}

impl LogHeader {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            schema: SCHEMA_VERSION.to_string(),
            config_hash: config.content_hash(),
            seed: config.world.seed,
        }
    }

    /// The `#`-prefixed comment form used at the top of CSV/JSON reports.
    pub fn comment_line(&self) -> String {
        format!("# schema={} config={} seed={}", self.schema, self.config_hash, self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionScope {
    /// The agent's world zone changed.
    Zone,
    /// The agent's cell assignment (and therefore its model) changed.
    Cell,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub time: f64,
    pub agent: AgentId,
    pub zone: ZoneId,
    pub cell: CellId,
    pub version: u64,
    /// Row-major confusion counts of this frame vs. ground truth.
    pub cm: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub time: f64,
    pub cell: CellId,
    pub buffer_len: usize,
    pub steps: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BroadcastRecord {
    pub time: f64,
    pub cell: CellId,
    pub version: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub time: f64,
    pub agent: AgentId,
    pub scope: TransitionScope,
    pub from: usize,
    pub to: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub time: f64,
    pub cell: CellId,
    pub version: u64,
    pub model: ModelSnapshot,
}

/// One event in the run log, in simulation order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Transition(TransitionRecord),
    Prediction(PredictionRecord),
    Training(TrainingRecord),
    Broadcast(BroadcastRecord),
    Snapshot(SnapshotRecord),
}

/// Everything a finished run produced; all evaluation series are pure
/// functions of this value.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config: RunConfig,
    pub header: LogHeader,
    pub records: Vec<LogRecord>,
}

impl RunArtifacts {
    pub fn predictions(&self) -> impl Iterator<Item = &PredictionRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Prediction(p) => Some(p),
            _ => None,
        })
    }

    pub fn trainings(&self) -> impl Iterator<Item = &TrainingRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Training(t) => Some(t),
            _ => None,
        })
    }

    pub fn broadcasts(&self) -> impl Iterator<Item = &BroadcastRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Broadcast(b) => Some(b),
            _ => None,
        })
    }

    pub fn transitions(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Transition(t) => Some(t),
            _ => None,
        })
    }

    /// (cell, version) -> snapshot, including the version-0 pretrained models.
    pub fn snapshot_index(&self) -> BTreeMap<(CellId, u64), &ModelSnapshot> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Snapshot(s) => Some(((s.cell, s.version), &s.model)),
                _ => None,
            })
            .collect()
    }

    pub fn frame_matrix(&self, p: &PredictionRecord) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(self.config.world.classes, p.cm.clone())
            .expect("logged matrices are well-formed")
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, &self.header).map_err(io_err)?;
        w.write_all(b"\n")?;
        for record in &self.records {
            serde_json::to_writer(&mut w, record).map_err(io_err)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_log(config: RunConfig, path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::MalformedLog {
                line: 1,
                last_valid: 0,
                detail: "empty log".into(),
            })??;
        let header: LogHeader = serde_json::from_str(&header_line).map_err(|e| Error::MalformedLog {
            line: 1,
            last_valid: 0,
            detail: format!("bad header: {e}"),
        })?;
        if header.schema != SCHEMA_VERSION {
            return Err(Error::MalformedLog {
                line: 1,
                last_valid: 0,
                detail: format!("unsupported schema '{}'", header.schema),
            });
        }
        let mut records = Vec::new();
        let mut last_valid = 1usize;
        for (i, line) in lines.enumerate() {
            let line_no = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: LogRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedLog {
                line: line_no,
                last_valid,
                detail: e.to_string(),
            })?;
            records.push(record);
            last_valid = line_no;
        }
        Ok(Self {
            config,
            header,
            records,
        })
    }
}

fn io_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::new(std::io::ErrorKind::Other, e))
}
