//! Line-delimited training event log.
//!
//! Every optimizer update, validation pass, and checkpoint write appends one
//! JSON record `{"step":N,"kind":K,"value":V}`. The schedule invariants of a
//! run are auditable from this file alone.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    DStep,
    GStep,
    Val,
    CkptBest,
    CkptLatest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub step: u64,
    pub kind: EventKind,
    pub value: f64,
}

pub struct EventLog {
    path: PathBuf,
    writer: BufWriter<File>,
}

impl EventLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path)
            .map_err(|e| Error::io_msg(format!("create event log {}: {}", path.display(), e)))?;
        Ok(EventLog {
            path,
            writer: BufWriter::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends one record. Values must be finite; JSON has no NaN and a
    /// non-finite value here means the trainer failed to abort first.
    pub fn record(&mut self, step: u64, kind: EventKind, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::TrainingIntegrity(format!(
                "refusing to log non-finite value {} at step {}",
                value, step
            )));
        }
        let line = serde_json::to_string(&Event { step, kind, value })
            .map_err(|e| Error::Format(format!("encode event: {}", e)))?;
        writeln!(self.writer, "{}", line)
            .map_err(|e| Error::io_msg(format!("append event log {}: {}", self.path.display(), e)))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer
            .flush()
            .map_err(|e| Error::io_msg(format!("flush event log {}: {}", self.path.display(), e)))
    }
}

pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<Event>> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::io_msg(format!("open event log {}: {}", path.display(), e)))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io_msg(format!("read event log: {}", e)))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: Event = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("event log line {}: {}", i + 1, e)))?;
        out.push(ev);
    }
    Ok(out)
}
