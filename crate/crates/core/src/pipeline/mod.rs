//! Per-session orchestration: pair frames into batches, classify, interpret,
//! consult cache and throttles, synthesize, and emit events in decision order.

mod clock;
mod log;
mod session;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{AudioCache, CacheKey};
use crate::category::AudioCategory;
use crate::classifier::MotionModel;
use crate::features::FlowParams;
use crate::interpreter::InterpreterBackend;
use crate::policy::{EmissionDecision, PolicyConfig};
use crate::synth::{AudioClip, SynthBackend};

pub use clock::{Clock, ManualClock, TokioClock};
pub use log::{AuxRecord, DropReason, EmissionRecord, EventLog, LogRecord};
pub use session::{run_scripted, run_session, Ingested, ScriptedFrame, Session, SessionError, SessionOutcome};

/// Only pairwise batches are supported; the features are defined on pairs.
pub const SUPPORTED_BATCH_SIZE: usize = 2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("batch_size must be {SUPPORTED_BATCH_SIZE}, got {0}")]
    BatchSize(usize),
    #[error("max_in_flight must be at least 1")]
    MaxInFlight,
    #[error("flow parameters: {0}")]
    Flow(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub batch_size: usize,
    pub max_in_flight: usize,
    pub flow: FlowParams,
    pub policy: PolicyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            batch_size: SUPPORTED_BATCH_SIZE,
            max_in_flight: 2,
            flow: FlowParams::default(),
            policy: PolicyConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size != SUPPORTED_BATCH_SIZE {
            return Err(ConfigError::BatchSize(self.batch_size));
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::MaxInFlight);
        }
        self.flow.validate().map_err(|e| ConfigError::Flow(e.to_string()))
    }
}

/// Shared services a session is wired to.
#[derive(Clone)]
pub struct Components {
    pub model: Arc<MotionModel>,
    pub interpreter: Arc<dyn InterpreterBackend>,
    pub synth: Arc<dyn SynthBackend>,
    pub cache: Arc<AudioCache>,
    pub clock: Arc<dyn Clock>,
}

/// Outcome of one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmissionEvent {
    pub batch_index: u64,
    pub category: AudioCategory,
    pub decision: EmissionDecision,
    /// Caption text; empty for `none` and failures.
    pub text: String,
    /// Present only for play decisions.
    pub clip: Option<AudioClip>,
    pub clip_key: Option<CacheKey>,
    pub t_batch: u64,
    pub t_decision: u64,
    pub t_sent: u64,
}

impl EmissionEvent {
    pub fn record(&self) -> EmissionRecord {
        EmissionRecord {
            batch_index: self.batch_index,
            category: self.category,
            decision: self.decision,
            clip_key: self.clip_key.as_ref().map(|k| k.to_string()),
            t_batch: self.t_batch,
            t_decision: self.t_decision,
            t_sent: self.t_sent,
        }
    }

    pub fn is_play(&self) -> bool {
        self.decision.is_play()
    }
}
