//! Content-addressed audio store.
//!
//! Each clip lives at `<dir>/<key>.<ext>` with a `<key>.meta.json` sidecar.
//! Files are written to a temporary name and renamed into place, so readers
//! never see a partial clip.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::{SystemTime, UNIX_EPOCH};

use bytes::Bytes;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::category::AudioCategory;
use crate::synth::{extension_for_mime, AudioClip};

const ASCII_SYMBOLS: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

fn punctuation() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(&format!(r"[\p{{P}}{}]", regex::escape(ASCII_SYMBOLS))).unwrap())
}

/// Lowercase, drop punctuation, collapse whitespace.
pub fn normalize_prompt(text: &str) -> String {
    let lowered = text.to_lowercase();
    let stripped = punctuation().replace_all(&lowered, "");
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CacheKey(String);

impl CacheKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn parse(hex: &str) -> Option<Self> {
        let ok = hex.len() == 64 && hex.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        ok.then(|| CacheKey(hex.to_string()))
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for CacheKey {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        CacheKey::parse(&value).ok_or_else(|| format!("not a cache key: {value:?}"))
    }
}

impl From<CacheKey> for String {
    fn from(k: CacheKey) -> String {
        k.0
    }
}

pub fn key_of(text: &str) -> CacheKey {
    let digest = Sha256::digest(normalize_prompt(text).as_bytes());
    CacheKey(hex::encode(digest))
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache io at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("refusing to cache an empty clip")]
    EmptyClip,
    #[error("corrupt metadata {path}: {message}")]
    CorruptMeta { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CacheError + '_ {
    move |source| CacheError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sidecar record stored next to each clip.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub key: CacheKey,
    pub text: String,
    pub category: AudioCategory,
    pub mime: String,
    pub duration_ms: u64,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub meta: CacheMeta,
    pub hit_count: u64,
}

#[derive(Debug)]
struct Slot {
    meta: CacheMeta,
    hit_count: u64,
    last_hit: u64,
}

#[derive(Debug)]
pub struct AudioCache {
    dir: PathBuf,
    max_entries: Option<usize>,
    index: Mutex<HashMap<CacheKey, Slot>>,
    tick: AtomicU64,
}

impl AudioCache {
    /// Opens (creating if needed) a store and indexes existing entries.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, CacheError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut index = HashMap::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let path = entry.map_err(io_err(&dir))?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if !name.ends_with(".meta.json") {
                continue;
            }
            let raw = fs::read(&path).map_err(io_err(&path))?;
            let meta: CacheMeta = serde_json::from_slice(&raw).map_err(|e| CacheError::CorruptMeta {
                path: path.clone(),
                message: e.to_string(),
            })?;
            // A sidecar without its clip is a leftover from a crashed write.
            if !dir.join(clip_file_name(&meta.key, &meta.mime)).exists() {
                continue;
            }
            index.insert(
                meta.key.clone(),
                Slot {
                    meta,
                    hit_count: 0,
                    last_hit: 0,
                },
            );
        }
        Ok(Self {
            dir,
            max_entries: None,
            index: Mutex::new(index),
            tick: AtomicU64::new(1),
        })
    }

    /// Caps the store; the least recently hit entry goes first.
    pub fn with_max_entries(mut self, max: Option<usize>) -> Self {
        self.max_entries = max.filter(|m| *m > 0);
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.index.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, text: &str) -> bool {
        self.index.lock().unwrap().contains_key(&key_of(text))
    }

    pub fn entry(&self, text: &str) -> Option<CacheEntry> {
        let index = self.index.lock().unwrap();
        index.get(&key_of(text)).map(|s| CacheEntry {
            meta: s.meta.clone(),
            hit_count: s.hit_count,
        })
    }

    /// Returns the stored clip and counts a hit. `batch_index` is left at 0.
    pub fn get(&self, text: &str) -> Result<Option<AudioClip>, CacheError> {
        let key = key_of(text);
        let meta = {
            let mut index = self.index.lock().unwrap();
            let Some(slot) = index.get_mut(&key) else {
                return Ok(None);
            };
            slot.hit_count += 1;
            slot.last_hit = self.tick.fetch_add(1, Ordering::Relaxed);
            slot.meta.clone()
        };
        let path = self.dir.join(clip_file_name(&key, &meta.mime));
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                self.index.lock().unwrap().remove(&key);
                return Ok(None);
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        Ok(Some(AudioClip {
            bytes: Bytes::from(bytes),
            mime: meta.mime,
            category: meta.category,
            batch_index: 0,
            duration_ms: meta.duration_ms,
        }))
    }

    pub fn put(&self, text: &str, clip: &AudioClip) -> Result<CacheKey, CacheError> {
        if clip.bytes.is_empty() || clip.mime.is_empty() {
            return Err(CacheError::EmptyClip);
        }
        let key = key_of(text);
        let meta = CacheMeta {
            key: key.clone(),
            text: normalize_prompt(text),
            category: clip.category,
            mime: clip.mime.clone(),
            duration_ms: clip.duration_ms,
            created_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        };
        // Clip first, sidecar second: open() ignores sidecars without clips.
        self.write_atomic(&clip_file_name(&key, &meta.mime), &clip.bytes)?;
        let meta_json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
        self.write_atomic(&format!("{key}.meta.json"), &meta_json)?;

        let evicted = {
            let mut index = self.index.lock().unwrap();
            let hits = index.get(&key).map(|s| (s.hit_count, s.last_hit)).unwrap_or((0, 0));
            index.insert(
                key.clone(),
                Slot {
                    meta,
                    hit_count: hits.0,
                    last_hit: hits.1.max(self.tick.fetch_add(1, Ordering::Relaxed)),
                },
            );
            let mut evicted = Vec::new();
            if let Some(max) = self.max_entries {
                while index.len() > max {
                    let victim = index
                        .iter()
                        .filter(|(k, _)| **k != key)
                        .min_by_key(|(k, s)| (s.last_hit, (*k).clone()))
                        .map(|(k, _)| k.clone());
                    match victim.and_then(|v| index.remove(&v).map(|s| (v, s.meta.mime))) {
                        Some(v) => evicted.push(v),
                        None => break,
                    }
                }
            }
            evicted
        };
        for (victim, mime) in evicted {
            let _ = fs::remove_file(self.dir.join(format!("{victim}.meta.json")));
            let _ = fs::remove_file(self.dir.join(clip_file_name(&victim, &mime)));
        }
        Ok(key)
    }

    fn write_atomic(&self, name: &str, data: &[u8]) -> Result<(), CacheError> {
        static SEQ: AtomicU64 = AtomicU64::new(0);
        let tmp = self.dir.join(format!(
            ".{name}.{}.{}.tmp",
            std::process::id(),
            SEQ.fetch_add(1, Ordering::Relaxed)
        ));
        fs::write(&tmp, data).map_err(io_err(&tmp))?;
        let dest = self.dir.join(name);
        fs::rename(&tmp, &dest).map_err(io_err(&dest))
    }
}

fn clip_file_name(key: &CacheKey, mime: &str) -> String {
    format!("{key}.{}", extension_for_mime(mime))
}
