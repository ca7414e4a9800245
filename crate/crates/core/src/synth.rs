//! Speech and sound-effect synthesis behind a common backend trait.
//!
//! [`MockSynth`] renders deterministic WAV audio keyed by the normalized
//! text: spoken clips last 60 ms per word, sound effects a fixed second, and
//! the two use different waveform families so they never coincide.

use std::f64::consts::TAU;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cache::normalize_prompt;
use crate::category::AudioCategory;

pub const DEFAULT_SYNTH_TIMEOUT: Duration = Duration::from_millis(5000);
pub const MOCK_SAMPLE_RATE: u32 = 16_000;
pub const MOCK_MS_PER_WORD: u64 = 60;
pub const MOCK_SFX_MS: u64 = 1000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SynthError {
    #[error("synthesis text is empty")]
    EmptyText,
    #[error("synthesis timed out after {budget_ms} ms")]
    Timeout { budget_ms: u64 },
    #[error("synthesis failed: {0}")]
    Failure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Tts,
    Sfx,
}

/// Encoded audio as returned by a backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedAudio {
    pub bytes: Bytes,
    pub mime: String,
    /// 0 when the backend does not know.
    pub duration_ms: u64,
}

/// Immutable audio payload travelling through the pipeline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioClip {
    pub bytes: Bytes,
    pub mime: String,
    pub category: AudioCategory,
    pub batch_index: u64,
    pub duration_ms: u64,
}

impl AudioClip {
    pub fn from_rendered(audio: RenderedAudio, category: AudioCategory, batch_index: u64) -> Self {
        Self {
            bytes: audio.bytes,
            mime: audio.mime,
            category,
            batch_index,
            duration_ms: audio.duration_ms,
        }
    }

    pub fn for_batch(mut self, batch_index: u64) -> Self {
        self.batch_index = batch_index;
        self
    }

    /// File extension for the clip's MIME type.
    pub fn extension(&self) -> &'static str {
        extension_for_mime(&self.mime)
    }
}

pub fn extension_for_mime(mime: &str) -> &'static str {
    match mime {
        "audio/mpeg" | "audio/mp3" => "mp3",
        "audio/wav" | "audio/wave" | "audio/x-wav" => "wav",
        "audio/ogg" => "ogg",
        _ => "bin",
    }
}

#[async_trait]
pub trait SynthBackend: Send + Sync {
    fn timeout(&self) -> Duration {
        DEFAULT_SYNTH_TIMEOUT
    }

    async fn render(&self, kind: SynthKind, text: &str) -> Result<RenderedAudio, SynthError>;
}

#[async_trait]
impl<T: SynthBackend + ?Sized> SynthBackend for Arc<T> {
    fn timeout(&self) -> Duration {
        (**self).timeout()
    }

    async fn render(&self, kind: SynthKind, text: &str) -> Result<RenderedAudio, SynthError> {
        (**self).render(kind, text).await
    }
}

/// Runs one synthesis call under the backend's budget.
pub async fn synthesize(
    backend: &dyn SynthBackend,
    kind: SynthKind,
    text: &str,
    category: AudioCategory,
    batch_index: u64,
) -> Result<AudioClip, SynthError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(SynthError::EmptyText);
    }
    let budget = backend.timeout();
    let audio = tokio::time::timeout(budget, backend.render(kind, text))
        .await
        .map_err(|_| SynthError::Timeout {
            budget_ms: budget.as_millis() as u64,
        })??;
    if audio.bytes.is_empty() || audio.mime.is_empty() {
        return Err(SynthError::Failure("backend returned an empty clip".into()));
    }
    Ok(AudioClip::from_rendered(audio, category, batch_index))
}

pub async fn synthesize_tts(
    backend: &dyn SynthBackend,
    text: &str,
    category: AudioCategory,
    batch_index: u64,
) -> Result<AudioClip, SynthError> {
    synthesize(backend, SynthKind::Tts, text, category, batch_index).await
}

pub async fn synthesize_sfx(
    backend: &dyn SynthBackend,
    text: &str,
    batch_index: u64,
) -> Result<AudioClip, SynthError> {
    synthesize(backend, SynthKind::Sfx, text, AudioCategory::Sfx, batch_index).await
}

/// Offline renderer producing content-keyed WAV clips.
#[derive(Debug, Clone)]
pub struct MockSynth {
    latency: Duration,
    timeout: Duration,
    fail: bool,
}

impl Default for MockSynth {
    fn default() -> Self {
        Self::new()
    }
}

impl MockSynth {
    pub fn new() -> Self {
        Self {
            latency: Duration::ZERO,
            timeout: DEFAULT_SYNTH_TIMEOUT,
            fail: false,
        }
    }

    /// Every call sleeps this long before answering.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = latency;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn failing() -> Self {
        Self {
            fail: true,
            ..Self::new()
        }
    }

    pub fn render_now(kind: SynthKind, text: &str) -> RenderedAudio {
        let normalized = normalize_prompt(text);
        let digest: [u8; 32] = Sha256::digest(normalized.as_bytes()).into();
        let (samples, duration_ms) = match kind {
            SynthKind::Tts => {
                let words = normalized.split_whitespace().count().max(1) as u64;
                (tone_sequence(&digest, words), words * MOCK_MS_PER_WORD)
            }
            SynthKind::Sfx => (noise_texture(&digest), MOCK_SFX_MS),
        };
        RenderedAudio {
            bytes: Bytes::from(encode_wav(&samples, MOCK_SAMPLE_RATE)),
            mime: "audio/wav".to_string(),
            duration_ms,
        }
    }
}

#[async_trait]
impl SynthBackend for MockSynth {
    fn timeout(&self) -> Duration {
        self.timeout
    }

    async fn render(&self, kind: SynthKind, text: &str) -> Result<RenderedAudio, SynthError> {
        if !self.latency.is_zero() {
            tokio::time::sleep(self.latency).await;
        }
        if self.fail {
            return Err(SynthError::Failure("mock synthesizer configured to fail".into()));
        }
        Ok(Self::render_now(kind, text))
    }
}

fn samples_for(ms: u64) -> usize {
    (MOCK_SAMPLE_RATE as u64 * ms / 1000) as usize
}

/// One sine tone per word, pitch picked from the digest.
fn tone_sequence(digest: &[u8; 32], words: u64) -> Vec<i16> {
    let per_word = samples_for(MOCK_MS_PER_WORD);
    let mut out = Vec::with_capacity(per_word * words as usize);
    for w in 0..words as usize {
        let freq = 220.0 + digest[w % 32] as f64 * 3.0;
        for i in 0..per_word {
            let t = i as f64 / MOCK_SAMPLE_RATE as f64;
            // Short fade in/out per word.
            let edge = (i.min(per_word - 1 - i) as f64 / 80.0).min(1.0);
            let s = (TAU * freq * t).sin() * edge * 0.5;
            out.push((s * i16::MAX as f64) as i16);
        }
    }
    out
}

/// Low-passed noise with a digest-seeded generator and amplitude swell.
fn noise_texture(digest: &[u8; 32]) -> Vec<i16> {
    let n = samples_for(MOCK_SFX_MS);
    let mut state = u64::from_le_bytes(digest[..8].try_into().unwrap()) | 1;
    let smoothing = 0.05 + digest[8] as f64 / 255.0 * 0.4;
    let mut filtered = 0.0f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        let white = (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0;
        filtered += smoothing * (white - filtered);
        let envelope = (std::f64::consts::PI * i as f64 / n as f64).sin();
        out.push((filtered * envelope * 0.8 * i16::MAX as f64) as i16);
    }
    out
}

/// 16-bit PCM mono RIFF/WAVE.
pub fn encode_wav(samples: &[i16], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Parsed header of a PCM WAV produced by [`encode_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WavInfo {
    pub sample_rate: u32,
    pub channels: u16,
    pub bits_per_sample: u16,
    pub data_len: u32,
}

impl WavInfo {
    pub fn duration_ms(&self) -> u64 {
        let bytes_per_sec = self.sample_rate as u64 * self.channels as u64 * self.bits_per_sample as u64 / 8;
        self.data_len as u64 * 1000 / bytes_per_sec.max(1)
    }
}

pub fn parse_wav_header(bytes: &[u8]) -> Option<WavInfo> {
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" || &bytes[12..16] != b"fmt " {
        return None;
    }
    let riff_len = u32::from_le_bytes(bytes[4..8].try_into().ok()?);
    if riff_len as usize + 8 != bytes.len() || &bytes[36..40] != b"data" {
        return None;
    }
    let info = WavInfo {
        channels: u16::from_le_bytes(bytes[22..24].try_into().ok()?),
        sample_rate: u32::from_le_bytes(bytes[24..28].try_into().ok()?),
        bits_per_sample: u16::from_le_bytes(bytes[34..36].try_into().ok()?),
        data_len: u32::from_le_bytes(bytes[40..44].try_into().ok()?),
    };
    (info.data_len as usize + 44 == bytes.len()).then_some(info)
}

/// Wraps a backend and counts calls per kind.
#[derive(Debug, Default)]
pub struct CountingSynth<S> {
    inner: S,
    tts_calls: AtomicUsize,
    sfx_calls: AtomicUsize,
}

impl<S> CountingSynth<S> {
    pub fn new(inner: S) -> Self {
        Self {
            inner,
            tts_calls: AtomicUsize::new(0),
            sfx_calls: AtomicUsize::new(0),
        }
    }

    pub fn tts_calls(&self) -> usize {
        self.tts_calls.load(Ordering::SeqCst)
    }

    pub fn sfx_calls(&self) -> usize {
        self.sfx_calls.load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> usize {
        self.tts_calls() + self.sfx_calls()
    }
}

#[async_trait]
impl<S: SynthBackend> SynthBackend for CountingSynth<S> {
    fn timeout(&self) -> Duration {
        self.inner.timeout()
    }

    async fn render(&self, kind: SynthKind, text: &str) -> Result<RenderedAudio, SynthError> {
        match kind {
            SynthKind::Tts => self.tts_calls.fetch_add(1, Ordering::SeqCst),
            SynthKind::Sfx => self.sfx_calls.fetch_add(1, Ordering::SeqCst),
        };
        self.inner.render(kind, text).await
    }
}
