//! Newline-delimited JSON event log.
//!
//! Emission records carry exactly seven fields. Auxiliary records (drops,
//! background cache fills) are tagged with an `event` field so a reader can
//! tell them apart.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::category::AudioCategory;
use crate::policy::EmissionDecision;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionRecord {
    pub batch_index: u64,
    pub category: AudioCategory,
    pub decision: EmissionDecision,
    pub clip_key: Option<String>,
    pub t_batch: u64,
    pub t_decision: u64,
    pub t_sent: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// Formed while the in-flight cap was reached.
    Overload,
    /// Still in progress when the session closed.
    SessionClosed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case", deny_unknown_fields)]
pub enum AuxRecord {
    Drop {
        batch_index: u64,
        reason: DropReason,
        t: u64,
    },
    CacheFill {
        batch_index: u64,
        clip_key: String,
        t: u64,
    },
    CacheFillFailed {
        batch_index: u64,
        error: String,
        t: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LogRecord {
    Emission(EmissionRecord),
    Aux(AuxRecord),
}

impl LogRecord {
    pub fn parse(line: &str) -> Result<Self, serde_json::Error> {
        let value: serde_json::Value = serde_json::from_str(line)?;
        if value.get("event").is_some() {
            serde_json::from_value(value).map(LogRecord::Aux)
        } else {
            serde_json::from_value(value).map(LogRecord::Emission)
        }
    }
}

enum Sink {
    Memory(Vec<String>),
    File(BufWriter<File>),
    Discard,
}

/// Append-only sink; each record is one line.
pub struct EventLog {
    sink: Mutex<Sink>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventLog").finish_non_exhaustive()
    }
}

impl EventLog {
    pub fn memory() -> Self {
        Self {
            sink: Mutex::new(Sink::Memory(Vec::new())),
        }
    }

    pub fn discard() -> Self {
        Self {
            sink: Mutex::new(Sink::Discard),
        }
    }

    /// Appends to `path`, creating it and its parent directory.
    pub fn file(path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            sink: Mutex::new(Sink::File(BufWriter::new(f))),
        })
    }

    pub fn append<T: Serialize>(&self, record: &T) {
        let line = serde_json::to_string(record).expect("log records serialize");
        let mut sink = self.sink.lock().unwrap();
        match &mut *sink {
            Sink::Memory(lines) => lines.push(line),
            Sink::File(w) => {
                if let Err(e) = writeln!(w, "{line}") {
                    tracing::warn!(error = %e, "event log write failed");
                }
            }
            Sink::Discard => {}
        }
    }

    pub fn flush(&self) {
        if let Sink::File(w) = &mut *self.sink.lock().unwrap() {
            if let Err(e) = w.flush() {
                tracing::warn!(error = %e, "event log flush failed");
            }
        }
    }

    /// Lines written so far; empty unless this is an in-memory log.
    pub fn lines(&self) -> Vec<String> {
        match &*self.sink.lock().unwrap() {
            Sink::Memory(lines) => lines.clone(),
            _ => Vec::new(),
        }
    }

    pub fn contents(&self) -> String {
        self.lines().iter().map(|l| format!("{l}\n")).collect()
    }
}

impl Drop for EventLog {
    fn drop(&mut self) {
        self.flush();
    }
}
