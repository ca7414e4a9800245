//! Server configuration, read from a TOML file.
//!
//! ```toml
//! listen = "127.0.0.1:8765"
//! capture_hz = 2
//! max_frame_side = 320
//! log_dir = "logs"
//!
//! [pipeline]
//! batch_size = 2
//! max_in_flight = 2
//!
//! [pipeline.policy]
//! hazard_throttle_ms = 5000
//!
//! [model]
//! path = "model.amava"      # or omit and set flow_threshold
//!
//! [interpreter]
//! backend = "mock"
//! script = "script.json"
//!
//! [synth]
//! backend = "mock"
//!
//! [cache]
//! dir = "cache"
//! ```

use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use amava_core::cache::AudioCache;
use amava_core::classifier::{load_model, MotionModel};
use amava_core::interpreter::{InterpreterBackend, MockInterpreter};
use amava_core::pipeline::PipelineConfig;
use amava_core::synth::{MockSynth, SynthBackend};
use serde::Deserialize;

/// A configuration problem, named by its key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    fn new(field: &str, message: impl fmt::Display) -> Self {
        Self {
            field: field.to_string(),
            message: message.to_string(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid config `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Mock,
    Live,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Trained model file. Without one, a fixed flow threshold routes batches.
    pub path: Option<PathBuf>,
    pub flow_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            path: None,
            flow_threshold: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpreterConfig {
    pub backend: Backend,
    /// Mock: JSON script replayed per session.
    pub script: Option<PathBuf>,
    /// Mock: reply to every call when there is no script.
    pub reply: String,
    pub timeout_ms: u64,
    /// Live: API base URL and model name.
    pub endpoint: Option<String>,
    pub model: Option<String>,
}

impl Default for InterpreterConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Mock,
            script: None,
            reply: "none".into(),
            timeout_ms: amava_core::interpreter::DEFAULT_INTERPRETER_TIMEOUT.as_millis() as u64,
            endpoint: None,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub backend: Backend,
    /// Mock: artificial render latency.
    pub latency_ms: u64,
    pub timeout_ms: u64,
    /// Live: API base URL and voice.
    pub endpoint: Option<String>,
    pub voice_id: Option<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Mock,
            latency_ms: 0,
            timeout_ms: amava_core::synth::DEFAULT_SYNTH_TIMEOUT.as_millis() as u64,
            endpoint: None,
            voice_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheConfig {
    pub dir: PathBuf,
    pub max_entries: Option<usize>,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("cache"),
            max_entries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub listen: SocketAddr,
    pub capture_hz: u32,
    /// Decoded frames are shrunk so the longer side fits this.
    pub max_frame_side: usize,
    /// One `<session_id>.ndjson` event log per session.
    pub log_dir: PathBuf,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub interpreter: InterpreterConfig,
    pub synth: SynthConfig,
    pub cache: CacheConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8765)),
            capture_hz: 2,
            max_frame_side: 320,
            log_dir: PathBuf::from("logs"),
            pipeline: PipelineConfig::default(),
            model: ModelConfig::default(),
            interpreter: InterpreterConfig::default(),
            synth: SynthConfig::default(),
            cache: CacheConfig::default(),
        }
    }
}

/// Builds a fresh interpreter per session so mock scripts start at entry 0.
pub type InterpreterFactory = Arc<dyn Fn() -> Arc<dyn InterpreterBackend> + Send + Sync>;

/// Everything a running server needs, resolved from a validated config.
#[derive(Clone)]
pub struct Resolved {
    pub config: ServerConfig,
    pub model: Arc<MotionModel>,
    pub interpreter: InterpreterFactory,
    pub synth: Arc<dyn SynthBackend>,
    pub cache: Arc<AudioCache>,
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .and_then(|s| key_at(text, s.start))
                .unwrap_or_else(|| "<file>".into());
            ConfigError::new(&field, e.message())
        })
    }

    /// Relative paths in the file resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("<file>", format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.log_dir);
        fix(&mut self.cache.dir);
        if let Some(p) = self.model.path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.interpreter.script.as_mut() {
            fix(p);
        }
    }

    /// Value checks that need no filesystem or network access.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(1..=30).contains(&self.capture_hz) {
            return Err(ConfigError::new("capture_hz", format!("must be in 1..=30, got {}", self.capture_hz)));
        }
        if self.max_frame_side < amava_core::frame::MIN_FEATURE_SIDE {
            return Err(ConfigError::new(
                "max_frame_side",
                format!("must be at least {}", amava_core::frame::MIN_FEATURE_SIDE),
            ));
        }
        self.pipeline.validate().map_err(|e| {
            let field = match e {
                amava_core::pipeline::ConfigError::BatchSize(_) => "pipeline.batch_size",
                amava_core::pipeline::ConfigError::MaxInFlight => "pipeline.max_in_flight",
                amava_core::pipeline::ConfigError::Flow(_) => "pipeline.flow",
            };
            ConfigError::new(field, e)
        })?;
        if self.model.path.is_none() && !(self.model.flow_threshold.is_finite() && self.model.flow_threshold >= 0.0) {
            return Err(ConfigError::new("model.flow_threshold", "must be a non-negative number"));
        }
        if self.interpreter.timeout_ms == 0 {
            return Err(ConfigError::new("interpreter.timeout_ms", "must be positive"));
        }
        if self.synth.timeout_ms == 0 {
            return Err(ConfigError::new("synth.timeout_ms", "must be positive"));
        }
        if self.cache.max_entries == Some(0) {
            return Err(ConfigError::new("cache.max_entries", "must be positive when set"));
        }
        if self.interpreter.backend == Backend::Mock && self.interpreter.script.is_none() && self.interpreter.reply.trim().is_empty() {
            return Err(ConfigError::new("interpreter.reply", "must not be empty without a script"));
        }
        Ok(())
    }

    /// Validates, then loads the model, script, cache and log directory.
    pub fn resolve(self) -> Result<Resolved, ConfigError> {
        self.validate()?;
        let model = match &self.model.path {
            Some(p) => {
                let (params, scaler) = load_model(p).map_err(|e| ConfigError::new("model.path", format!("{}: {e}", p.display())))?;
                MotionModel { params, scaler }
            }
            None => MotionModel::flow_threshold(self.model.flow_threshold),
        };
        let interpreter = interpreter_factory(&self.interpreter)?;
        let synth = synth_backend(&self.synth)?;
        let cache = AudioCache::open(&self.cache.dir)
            .map_err(|e| ConfigError::new("cache.dir", e))?
            .with_max_entries(self.cache.max_entries);
        std::fs::create_dir_all(&self.log_dir).map_err(|e| ConfigError::new("log_dir", format!("{}: {e}", self.log_dir.display())))?;
        Ok(Resolved {
            config: self,
            model: Arc::new(model),
            interpreter,
            synth,
            cache: Arc::new(cache),
        })
    }
}

fn interpreter_factory(cfg: &InterpreterConfig) -> Result<InterpreterFactory, ConfigError> {
    let timeout = Duration::from_millis(cfg.timeout_ms);
    match cfg.backend {
        Backend::Mock => {
            let script = match &cfg.script {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| ConfigError::new("interpreter.script", format!("{}: {e}", p.display())))?;
                    MockInterpreter::from_json(&text).map_err(|e| ConfigError::new("interpreter.script", e))?;
                    Some(text)
                }
                None => None,
            };
            let reply = cfg.reply.clone();
            Ok(Arc::new(move || {
                let mock = match &script {
                    Some(text) => MockInterpreter::from_json(text).expect("script checked at startup"),
                    None => MockInterpreter::constant(reply.clone(), 0),
                };
                Arc::new(mock.with_timeout(timeout)) as Arc<dyn InterpreterBackend>
            }))
        }
        Backend::Live => live_interpreter(cfg, timeout),
    }
}

#[cfg(feature = "live")]
fn live_interpreter(cfg: &InterpreterConfig, timeout: Duration) -> Result<InterpreterFactory, ConfigError> {
    use amava_core::live::{GeminiConfig, GeminiInterpreter};
    let mut live = GeminiConfig {
        timeout_ms: timeout.as_millis() as u64,
        ..GeminiConfig::default()
    };
    if let Some(e) = &cfg.endpoint {
        live.endpoint = e.clone();
    }
    if let Some(m) = &cfg.model {
        live.model = m.clone();
    }
    let backend: Arc<dyn InterpreterBackend> =
        Arc::new(GeminiInterpreter::from_env(live).map_err(|e| ConfigError::new("interpreter.backend", e))?);
    Ok(Arc::new(move || backend.clone()))
}

#[cfg(not(feature = "live"))]
fn live_interpreter(_: &InterpreterConfig, _: Duration) -> Result<InterpreterFactory, ConfigError> {
    Err(ConfigError::new("interpreter.backend", "built without the `live` feature"))
}

fn synth_backend(cfg: &SynthConfig) -> Result<Arc<dyn SynthBackend>, ConfigError> {
    let timeout = Duration::from_millis(cfg.timeout_ms);
    match cfg.backend {
        Backend::Mock => Ok(Arc::new(
            MockSynth::new()
                .with_latency(Duration::from_millis(cfg.latency_ms))
                .with_timeout(timeout),
        )),
        Backend::Live => live_synth(cfg, timeout),
    }
}

#[cfg(feature = "live")]
fn live_synth(cfg: &SynthConfig, timeout: Duration) -> Result<Arc<dyn SynthBackend>, ConfigError> {
    use amava_core::live::{ElevenLabsConfig, ElevenLabsSynth};
    let mut live = ElevenLabsConfig {
        timeout_ms: timeout.as_millis() as u64,
        ..ElevenLabsConfig::default()
    };
    if let Some(e) = &cfg.endpoint {
        live.endpoint = e.clone();
    }
    if let Some(v) = &cfg.voice_id {
        live.voice_id = v.clone();
    }
    Ok(Arc::new(ElevenLabsSynth::from_env(live).map_err(|e| ConfigError::new("synth.backend", e))?))
}

#[cfg(not(feature = "live"))]
fn live_synth(_: &SynthConfig, _: Duration) -> Result<Arc<dyn SynthBackend>, ConfigError> {
    Err(ConfigError::new("synth.backend", "built without the `live` feature"))
}

/// Dotted key of the line containing `offset`, qualified by its table.
fn key_at(text: &str, offset: usize) -> Option<String> {
    let before = text.get(..offset)?;
    let start = before.rfind('\n').map_or(0, |i| i + 1);
    let line = text[start..].lines().next().unwrap_or("").trim();
    let header = |l: &str| l.trim_start_matches('[').trim_end_matches(']').trim().to_string();
    if line.starts_with('[') {
        return Some(header(line));
    }
    let key = line.split('=').next()?.trim();
    if key.is_empty() {
        return None;
    }
    let table = before[..start].lines().rev().map(str::trim).find(|l| l.starts_with('['));
    Some(match table {
        Some(t) => format!("{}.{key}", header(t)),
        None => key.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ServerConfig::from_toml("").unwrap();
        assert_eq!(cfg, ServerConfig::default());
        assert_eq!(cfg.capture_hz, 2);
        assert_eq!(cfg.pipeline.batch_size, 2);
        cfg.validate().unwrap();
    }

    #[test]
    fn full_file_parses() {
        let text = r#"
            listen = "0.0.0.0:9000"
            capture_hz = 2
            max_frame_side = 240
            log_dir = "/tmp/amava-logs"

            [pipeline]
            batch_size = 2
            max_in_flight = 3

            [pipeline.flow]
            pyramid_levels = 2

            [pipeline.policy]
            hazard_throttle_ms = 6000

            [model]
            flow_threshold = 0.8

            [interpreter]
            backend = "mock"
            reply = "sfx: rain"
            timeout_ms = 1500

            [synth]
            backend = "mock"
            latency_ms = 20

            [cache]
            dir = "/tmp/amava-cache"
            max_entries = 100
        "#;
        let cfg = ServerConfig::from_toml(text).unwrap();
        assert_eq!(cfg.listen.port(), 9000);
        assert_eq!(cfg.pipeline.max_in_flight, 3);
        assert_eq!(cfg.pipeline.flow.pyramid_levels, 2);
        assert_eq!(cfg.pipeline.policy.hazard_throttle_ms, 6000);
        assert_eq!(cfg.pipeline.policy.sfx_throttle_ms, 3000);
        assert_eq!(cfg.cache.max_entries, Some(100));
        assert_eq!(cfg.synth.latency_ms, 20);
        cfg.validate().unwrap();
    }

    #[test]
    fn bad_values_are_named() {
        let cases = [
            ("[pipeline]\nbatch_size = 4", "pipeline.batch_size"),
            ("[pipeline]\nmax_in_flight = 0", "pipeline.max_in_flight"),
            ("capture_hz = 0", "capture_hz"),
            ("max_frame_side = 4", "max_frame_side"),
            ("[cache]\nmax_entries = 0", "cache.max_entries"),
            ("[synth]\ntimeout_ms = 0", "synth.timeout_ms"),
        ];
        for (text, field) in cases {
            let err = ServerConfig::from_toml(text).unwrap().validate().unwrap_err();
            assert_eq!(err.field, field, "{text}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ServerConfig::from_toml("capture_rate = 2").unwrap_err();
        assert_eq!(err.field, "capture_rate", "{err}");
        let err = ServerConfig::from_toml("[interpreter]\nbackend = \"remote\"").unwrap_err();
        assert_eq!(err.field, "interpreter.backend", "{err}");
        let err = ServerConfig::from_toml("[pipeline.policy]\nhazard_throttle_ms = \"soon\"").unwrap_err();
        assert_eq!(err.field, "pipeline.policy.hazard_throttle_ms", "{err}");
    }

    #[test]
    fn missing_model_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ServerConfig::default();
        cfg.model.path = Some(dir.path().join("absent.model"));
        cfg.cache.dir = dir.path().join("cache");
        cfg.log_dir = dir.path().join("logs");
        let err = cfg.resolve().err().unwrap();
        assert_eq!(err.field, "model.path");
    }

    #[test]
    fn bad_script_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("script.json"), "[]").unwrap();
        let cfg = ServerConfig::from_toml("[interpreter]\nscript = \"script.json\"").unwrap();
        let mut cfg = cfg;
        cfg.rebase(dir.path());
        cfg.cache.dir = dir.path().join("cache");
        cfg.log_dir = dir.path().join("logs");
        let err = cfg.resolve().err().unwrap();
        assert_eq!(err.field, "interpreter.script");
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("server.toml");
        std::fs::write(&path, "log_dir = \"out/logs\"\n[cache]\ndir = \"c\"\n").unwrap();
        let cfg = ServerConfig::load(&path).unwrap();
        assert_eq!(cfg.log_dir, dir.path().join("out/logs"));
        assert_eq!(cfg.cache.dir, dir.path().join("c"));
        let r = cfg.resolve().unwrap();
        assert!(r.config.log_dir.is_dir());
    }

    #[cfg(not(feature = "live"))]
    #[test]
    fn live_backend_needs_the_feature() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ServerConfig::from_toml("[synth]\nbackend = \"live\"").unwrap();
        cfg.cache.dir = dir.path().join("cache");
        cfg.log_dir = dir.path().join("logs");
        assert_eq!(cfg.resolve().err().unwrap().field, "synth.backend");
    }
}
