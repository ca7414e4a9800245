//! Scene interpretation: movement-conditioned prompts, a pluggable
//! vision-language backend, and parsing of its reply into a category.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::category::AudioCategory;
use crate::classifier::Branch;

pub const DEFAULT_INTERPRETER_TIMEOUT: Duration = Duration::from_millis(2500);

/// Low-branch replies are cut to this many words.
pub const MAX_DESCRIPTION_WORDS: usize = 40;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("interpreter timed out after {budget_ms} ms")]
    Timeout { budget_ms: u64 },
    #[error("interpreter failed: {0}")]
    Failure(String),
}

/// What a backend sees for one batch.
#[derive(Debug, Clone)]
pub struct InterpretRequest<'a> {
    /// Encoded (JPEG) frames in capture order.
    pub frames: &'a [Bytes],
    pub prompt: &'a str,
    pub branch: Branch,
    pub batch_index: u64,
}

#[async_trait]
pub trait InterpreterBackend: Send + Sync {
    /// Budget enforced around every [`InterpreterBackend::generate`] call.
    fn timeout(&self) -> Duration {
        DEFAULT_INTERPRETER_TIMEOUT
    }

    async fn generate(&self, request: InterpretRequest<'_>) -> Result<String, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneResponse {
    pub category: AudioCategory,
    /// Text to voice or to render as a sound effect; empty for `none`.
    pub content: String,
    pub raw: String,
}

impl SceneResponse {
    fn none(raw: &str) -> Self {
        Self {
            category: AudioCategory::None,
            content: String::new(),
            raw: raw.to_string(),
        }
    }
}

pub fn build_prompt(branch: Branch) -> &'static str {
    match branch {
        Branch::Low => {
            "You are assisting a blind pedestrian. The two images are consecutive camera \
             frames of a mostly still scene. Describe the scene in 15 to 20 words, \
             mentioning the layout and notable objects. Reply with the description only."
        }
        Branch::High => {
            "You are assisting a blind pedestrian who is moving. The two images are camera \
             frames taken half a second apart. Pick exactly one category: \
             hazard (an obstacle or danger the user must react to now, as a short alert), \
             sfx (a short sound effect prompt that conveys what is happening, e.g. passing car), \
             description (brief context worth hearing), or \
             none (nothing worth reporting). Reply with exactly one line formatted as \
             `category: content`, for example `hazard: bicycle approaching on the left`."
        }
    }
}

/// Parses the first non-empty line as `<category>: <content>`.
///
/// Anything that does not fit, or a non-`none` category with empty content,
/// degrades to `none`.
pub fn parse_response(raw: &str) -> SceneResponse {
    let Some(line) = raw.lines().map(str::trim).find(|l| !l.is_empty()) else {
        return SceneResponse::none(raw);
    };
    let Some((token, content)) = line.split_once(':') else {
        return SceneResponse::none(raw);
    };
    let Some(category) = AudioCategory::parse(token) else {
        return SceneResponse::none(raw);
    };
    let content = content.trim();
    if category == AudioCategory::None || content.is_empty() {
        return SceneResponse::none(raw);
    }
    SceneResponse {
        category,
        content: content.to_string(),
        raw: raw.to_string(),
    }
}

/// Inverse of [`parse_response`] for well-formed replies.
pub fn format_response(category: AudioCategory, content: &str) -> String {
    format!("{}: {}", category.as_str(), content)
}

fn truncate_words(text: &str, max: usize) -> String {
    text.split_whitespace().take(max).collect::<Vec<_>>().join(" ")
}

/// Runs the backend under its budget and maps the reply for `branch`.
///
/// Low-branch replies are always descriptions; an empty one degrades to
/// `none`. Timeouts and failures are returned as errors so the caller can
/// skip the batch.
pub async fn interpret(
    backend: &dyn InterpreterBackend,
    frames: &[Bytes],
    branch: Branch,
    batch_index: u64,
) -> Result<SceneResponse, BackendError> {
    let budget = backend.timeout();
    let prompt = build_prompt(branch);
    let request = InterpretRequest {
        frames,
        prompt,
        branch,
        batch_index,
    };
    let raw = match tokio::time::timeout(budget, backend.generate(request)).await {
        Ok(reply) => reply?,
        Err(_) => {
            return Err(BackendError::Timeout {
                budget_ms: budget.as_millis() as u64,
            })
        }
    };
    Ok(match branch {
        Branch::High => parse_response(&raw),
        Branch::Low => {
            let content = truncate_words(&raw, MAX_DESCRIPTION_WORDS);
            if content.is_empty() {
                SceneResponse::none(&raw)
            } else {
                SceneResponse {
                    category: AudioCategory::Description,
                    content,
                    raw,
                }
            }
        }
    })
}

/// Which branch a script entry answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchPattern {
    #[serde(rename = "low")]
    Low,
    #[serde(rename = "high")]
    High,
    #[serde(rename = "*")]
    Any,
}

impl BranchPattern {
    fn matches(self, branch: Branch) -> bool {
        match self {
            BranchPattern::Any => true,
            BranchPattern::Low => branch == Branch::Low,
            BranchPattern::High => branch == Branch::High,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(default = "any_branch")]
    pub branch: BranchPattern,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub latency_ms: u64,
    /// Reply with a backend failure instead of text.
    #[serde(default)]
    pub fail: bool,
}

fn any_branch() -> BranchPattern {
    BranchPattern::Any
}

impl ScriptEntry {
    pub fn new(branch: BranchPattern, text: impl Into<String>) -> Self {
        Self {
            branch,
            text: text.into(),
            latency_ms: 0,
            fail: false,
        }
    }

    pub fn any(text: impl Into<String>) -> Self {
        Self::new(BranchPattern::Any, text)
    }

    pub fn with_latency(mut self, ms: u64) -> Self {
        self.latency_ms = ms;
        self
    }
}

/// On-disk script: either a bare entry list or `{ "cycle": bool, "entries": [...] }`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
enum ScriptFile {
    Entries(Vec<ScriptEntry>),
    Full {
        #[serde(default)]
        cycle: bool,
        entries: Vec<ScriptEntry>,
    },
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("reading script: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing script: {0}")]
    Json(#[from] serde_json::Error),
    #[error("script has no entries")]
    Empty,
}

/// Deterministic backend replaying a script, one entry per batch.
///
/// Batch `n` gets entry `n` (modulo the length when cycling), however the
/// calls interleave. An entry whose branch pattern does not match the
/// request fails the call, as does running off the end of a non-cycling
/// script.
#[derive(Debug)]
pub struct MockInterpreter {
    entries: Vec<ScriptEntry>,
    cycle: bool,
    cursor: AtomicUsize,
    timeout: Duration,
}

impl MockInterpreter {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Self {
            entries,
            cycle: false,
            cursor: AtomicUsize::new(0),
            timeout: DEFAULT_INTERPRETER_TIMEOUT,
        }
    }

    /// The same reply for every call.
    pub fn constant(text: impl Into<String>, latency_ms: u64) -> Self {
        Self::new(vec![ScriptEntry::any(text).with_latency(latency_ms)]).cycling(true)
    }

    pub fn cycling(mut self, cycle: bool) -> Self {
        self.cycle = cycle;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn from_json(text: &str) -> Result<Self, ScriptError> {
        let (entries, cycle) = match serde_json::from_str(text)? {
            ScriptFile::Entries(e) => (e, false),
            ScriptFile::Full { cycle, entries } => (entries, cycle),
        };
        if entries.is_empty() {
            return Err(ScriptError::Empty);
        }
        Ok(Self::new(entries).cycling(cycle))
    }

    pub fn from_file(path: &Path) -> Result<Self, ScriptError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn calls(&self) -> usize {
        self.cursor.load(Ordering::SeqCst)
    }

    fn entry(&self, batch: u64) -> Option<&ScriptEntry> {
        if self.entries.is_empty() {
            return None;
        }
        let i = usize::try_from(batch).ok()?;
        if self.cycle {
            self.entries.get(i % self.entries.len())
        } else {
            self.entries.get(i)
        }
    }
}

#[async_trait]
impl InterpreterBackend for MockInterpreter {
    fn timeout(&self) -> Duration {
        self.timeout
    }

    async fn generate(&self, request: InterpretRequest<'_>) -> Result<String, BackendError> {
        self.cursor.fetch_add(1, Ordering::SeqCst);
        let batch = request.batch_index;
        let entry = self
            .entry(batch)
            .ok_or_else(|| BackendError::Failure(format!("script exhausted at batch {batch}")))?
            .clone();
        if entry.latency_ms > 0 {
            tokio::time::sleep(Duration::from_millis(entry.latency_ms)).await;
        }
        if !entry.branch.matches(request.branch) {
            return Err(BackendError::Failure(format!(
                "script entry {batch} expects {:?}, got {} branch",
                entry.branch,
                request.branch.as_str()
            )));
        }
        if entry.fail {
            return Err(BackendError::Failure(format!("scripted failure at batch {batch}")));
        }
        Ok(entry.text)
    }
}
