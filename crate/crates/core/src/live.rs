//! HTTP adapters for hosted services. Keys come from the environment:
//! `GEMINI_API_KEY` for the interpreter and `ELEVENLABS_API_KEY` for speech
//! and sound effects.

use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use bytes::Bytes;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::interpreter::{BackendError, InterpretRequest, InterpreterBackend, DEFAULT_INTERPRETER_TIMEOUT};
use crate::synth::{RenderedAudio, SynthBackend, SynthError, SynthKind, DEFAULT_SYNTH_TIMEOUT};

pub const GEMINI_KEY_VAR: &str = "GEMINI_API_KEY";
pub const ELEVENLABS_KEY_VAR: &str = "ELEVENLABS_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum LiveError {
    #[error("environment variable {0} is not set")]
    MissingKey(&'static str),
    #[error("http client: {0}")]
    Client(String),
}

fn env_key(var: &'static str) -> Result<String, LiveError> {
    std::env::var(var)
        .ok()
        .filter(|v| !v.trim().is_empty())
        .ok_or(LiveError::MissingKey(var))
}

fn client() -> Result<reqwest::Client, LiveError> {
    reqwest::Client::builder()
        .build()
        .map_err(|e| LiveError::Client(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeminiConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_ms: u64,
}

impl Default for GeminiConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://generativelanguage.googleapis.com/v1beta".into(),
            model: "gemini-2.0-flash".into(),
            timeout_ms: DEFAULT_INTERPRETER_TIMEOUT.as_millis() as u64,
        }
    }
}

pub struct GeminiInterpreter {
    cfg: GeminiConfig,
    key: String,
    http: reqwest::Client,
}

impl GeminiInterpreter {
    pub fn from_env(cfg: GeminiConfig) -> Result<Self, LiveError> {
        Ok(Self {
            key: env_key(GEMINI_KEY_VAR)?,
            http: client()?,
            cfg,
        })
    }
}

#[async_trait]
impl InterpreterBackend for GeminiInterpreter {
    fn timeout(&self) -> Duration {
        Duration::from_millis(self.cfg.timeout_ms)
    }

    async fn generate(&self, request: InterpretRequest<'_>) -> Result<String, BackendError> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let mut parts = vec![json!({ "text": request.prompt })];
        for frame in request.frames.iter().filter(|f| !f.is_empty()) {
            parts.push(json!({ "inline_data": { "mime_type": "image/jpeg", "data": b64.encode(frame) } }));
        }
        let url = format!("{}/models/{}:generateContent", self.cfg.endpoint, self.cfg.model);
        let resp = self
            .http
            .post(url)
            .header("x-goog-api-key", &self.key)
            .json(&json!({ "contents": [{ "role": "user", "parts": parts }] }))
            .send()
            .await
            .map_err(|e| BackendError::Failure(e.to_string()))?;
        let status = resp.status();
        let body: serde_json::Value = resp
            .json()
            .await
            .map_err(|e| BackendError::Failure(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Failure(format!("http {status}: {body}")));
        }
        let text: String = body["candidates"][0]["content"]["parts"]
            .as_array()
            .map(|ps| ps.iter().filter_map(|p| p["text"].as_str()).collect())
            .unwrap_or_default();
        if text.trim().is_empty() {
            return Err(BackendError::Failure("reply has no text".into()));
        }
        Ok(text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElevenLabsConfig {
    pub endpoint: String,
    pub voice_id: String,
    pub tts_model: String,
    pub sfx_duration_s: Option<f64>,
    pub timeout_ms: u64,
}

impl Default for ElevenLabsConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.elevenlabs.io/v1".into(),
            voice_id: "21m00Tcm4TlvDq8ikWAM".into(),
            tts_model: "eleven_turbo_v2".into(),
            sfx_duration_s: None,
            timeout_ms: DEFAULT_SYNTH_TIMEOUT.as_millis() as u64,
        }
    }
}

pub struct ElevenLabsSynth {
    cfg: ElevenLabsConfig,
    key: String,
    http: reqwest::Client,
}

impl ElevenLabsSynth {
    pub fn from_env(cfg: ElevenLabsConfig) -> Result<Self, LiveError> {
        Ok(Self {
            key: env_key(ELEVENLABS_KEY_VAR)?,
            http: client()?,
            cfg,
        })
    }
}

#[async_trait]
impl SynthBackend for ElevenLabsSynth {
    fn timeout(&self) -> Duration {
        Duration::from_millis(self.cfg.timeout_ms)
    }

    async fn render(&self, kind: SynthKind, text: &str) -> Result<RenderedAudio, SynthError> {
        let (url, body) = match kind {
            SynthKind::Tts => (
                format!("{}/text-to-speech/{}", self.cfg.endpoint, self.cfg.voice_id),
                json!({ "text": text, "model_id": self.cfg.tts_model }),
            ),
            SynthKind::Sfx => {
                let mut body = json!({ "text": text });
                if let Some(d) = self.cfg.sfx_duration_s {
                    body["duration_seconds"] = json!(d);
                }
                (format!("{}/sound-generation", self.cfg.endpoint), body)
            }
        };
        let resp = self
            .http
            .post(url)
            .header("xi-api-key", &self.key)
            .header("accept", "audio/mpeg")
            .json(&body)
            .send()
            .await
            .map_err(|e| SynthError::Failure(e.to_string()))?;
        let status = resp.status();
        let bytes: Bytes = resp.bytes().await.map_err(|e| SynthError::Failure(e.to_string()))?;
        if !status.is_success() {
            return Err(SynthError::Failure(format!(
                "http {status}: {}",
                String::from_utf8_lossy(&bytes[..bytes.len().min(200)])
            )));
        }
        Ok(RenderedAudio {
            bytes,
            mime: "audio/mpeg".into(),
            duration_ms: 0,
        })
    }
}
