//! Throttle and playback rules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::category::AudioCategory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hazard_throttle_ms: u64,
    pub sfx_throttle_ms: u64,
    pub description_throttle_ms: u64,
    pub shared_tts_ms: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hazard_throttle_ms: 5000,
            sfx_throttle_ms: 3000,
            description_throttle_ms: 15000,
            shared_tts_ms: 4000,
        }
    }
}

impl PolicyConfig {
    /// Per-category interval; `none` has no timer.
    pub fn throttle_ms(&self, category: AudioCategory) -> Option<u64> {
        match category {
            AudioCategory::Hazard => Some(self.hazard_throttle_ms),
            AudioCategory::Sfx => Some(self.sfx_throttle_ms),
            AudioCategory::Description => Some(self.description_throttle_ms),
            AudioCategory::None => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmissionDecision {
    PlayCached,
    SynthesizeAndPlay,
    SynthesizeAndCacheOnly,
    SkipThrottled,
    SkipNone,
    /// Interpreter or synthesizer failure; produced by the orchestrator only.
    SkipFailed,
}

impl EmissionDecision {
    pub const ALL: [EmissionDecision; 6] = [
        EmissionDecision::PlayCached,
        EmissionDecision::SynthesizeAndPlay,
        EmissionDecision::SynthesizeAndCacheOnly,
        EmissionDecision::SkipThrottled,
        EmissionDecision::SkipNone,
        EmissionDecision::SkipFailed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EmissionDecision::PlayCached => "play_cached",
            EmissionDecision::SynthesizeAndPlay => "synthesize_and_play",
            EmissionDecision::SynthesizeAndCacheOnly => "synthesize_and_cache_only",
            EmissionDecision::SkipThrottled => "skip_throttled",
            EmissionDecision::SkipNone => "skip_none",
            EmissionDecision::SkipFailed => "skip_failed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.as_str() == s)
    }

    pub fn is_play(self) -> bool {
        matches!(self, EmissionDecision::PlayCached | EmissionDecision::SynthesizeAndPlay)
    }
}

impl std::fmt::Display for EmissionDecision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("category none has no playback timer")]
    NoneCategory,
    #[error("playback time {now_ms} ms precedes recorded {previous_ms} ms for {category}")]
    NonMonotonic {
        category: AudioCategory,
        now_ms: u64,
        previous_ms: u64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThrottleState {
    last_play: BTreeMap<AudioCategory, u64>,
    last_tts_play: Option<u64>,
}

impl ThrottleState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_play(&self, category: AudioCategory) -> Option<u64> {
        self.last_play.get(&category).copied()
    }

    pub fn last_tts_play(&self) -> Option<u64> {
        self.last_tts_play
    }

    pub fn should_throttle(&self, category: AudioCategory, now_ms: u64, cfg: &PolicyConfig) -> bool {
        let Some(window) = cfg.throttle_ms(category) else {
            return false;
        };
        let within = |last: Option<u64>, w: u64| last.is_some_and(|t| now_ms.saturating_sub(t) < w);
        within(self.last_play(category), window)
            || (category.is_tts() && within(self.last_tts_play, cfg.shared_tts_ms))
    }

    /// Call only when audio is actually sent.
    pub fn record_playback(&mut self, category: AudioCategory, now_ms: u64) -> Result<(), PolicyError> {
        if category == AudioCategory::None {
            return Err(PolicyError::NoneCategory);
        }
        let check = |prev: Option<u64>| match prev {
            Some(p) if now_ms < p => Err(PolicyError::NonMonotonic {
                category,
                now_ms,
                previous_ms: p,
            }),
            _ => Ok(()),
        };
        check(self.last_play(category))?;
        if category.is_tts() {
            check(self.last_tts_play)?;
            self.last_tts_play = Some(now_ms);
        }
        self.last_play.insert(category, now_ms);
        Ok(())
    }
}

/// Free-function form of [`ThrottleState::should_throttle`].
pub fn should_throttle(state: &ThrottleState, category: AudioCategory, now_ms: u64, cfg: &PolicyConfig) -> bool {
    state.should_throttle(category, now_ms, cfg)
}

pub fn decide(category: AudioCategory, is_cached: bool, throttled: bool) -> EmissionDecision {
    use EmissionDecision::*;
    match (category, is_cached, throttled) {
        (AudioCategory::None, _, _) => SkipNone,
        (_, _, true) => SkipThrottled,
        (AudioCategory::Sfx, true, false) => PlayCached,
        (AudioCategory::Sfx, false, false) => SynthesizeAndCacheOnly,
        (_, true, false) => PlayCached,
        (_, false, false) => SynthesizeAndPlay,
    }
}

/// Applies one event to the state the way a session does: throttle check,
/// decision, and a timer update when the decision plays audio.
pub fn step(
    state: &mut ThrottleState,
    category: AudioCategory,
    is_cached: bool,
    now_ms: u64,
    cfg: &PolicyConfig,
) -> Result<EmissionDecision, PolicyError> {
    let throttled = category != AudioCategory::None && state.should_throttle(category, now_ms, cfg);
    let d = decide(category, is_cached, throttled);
    if d.is_play() {
        state.record_playback(category, now_ms)?;
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use AudioCategory::*;
    use EmissionDecision::*;

    #[test]
    fn throttle_examples() {
        let cfg = PolicyConfig::default();
        let mut s = ThrottleState::new();
        s.record_playback(Hazard, 0).unwrap();
        assert!(s.should_throttle(Hazard, 4000, &cfg));
        assert!(!s.should_throttle(Hazard, 5000, &cfg));

        let mut s = ThrottleState::new();
        s.record_playback(Description, 0).unwrap();
        assert!(s.should_throttle(Hazard, 3000, &cfg));
        assert!(!s.should_throttle(Hazard, 4500, &cfg));

        let mut s = ThrottleState::new();
        s.record_playback(Sfx, 0).unwrap();
        assert!(!s.should_throttle(Sfx, 3500, &cfg));
        assert!(!s.should_throttle(Hazard, 1, &cfg));
        assert!(!ThrottleState::new().should_throttle(Description, 0, &cfg));
    }

    #[test]
    fn record_examples() {
        let mut s = ThrottleState::new();
        s.record_playback(Hazard, 1000).unwrap();
        assert_eq!(s.last_play(Hazard), Some(1000));
        assert_eq!(s.last_tts_play(), Some(1000));
        s.record_playback(Sfx, 2000).unwrap();
        assert_eq!(s.last_tts_play(), Some(1000));
        assert_eq!(
            s.record_playback(Hazard, 500),
            Err(PolicyError::NonMonotonic {
                category: Hazard,
                now_ms: 500,
                previous_ms: 1000
            })
        );
        // Shared timer is also checked.
        assert!(s.record_playback(Description, 900).is_err());
        assert_eq!(s.record_playback(None, 3000), Err(PolicyError::NoneCategory));
    }

    #[test]
    fn truth_table() {
        let table = [
            (Description, false, false, SynthesizeAndPlay),
            (Description, false, true, SkipThrottled),
            (Description, true, false, PlayCached),
            (Description, true, true, SkipThrottled),
            (Hazard, false, false, SynthesizeAndPlay),
            (Hazard, false, true, SkipThrottled),
            (Hazard, true, false, PlayCached),
            (Hazard, true, true, SkipThrottled),
            (Sfx, false, false, SynthesizeAndCacheOnly),
            (Sfx, false, true, SkipThrottled),
            (Sfx, true, false, PlayCached),
            (Sfx, true, true, SkipThrottled),
            (None, false, false, SkipNone),
            (None, false, true, SkipNone),
            (None, true, false, SkipNone),
            (None, true, true, SkipNone),
        ];
        for (c, cached, throttled, want) in table {
            assert_eq!(decide(c, cached, throttled), want, "{c} cached={cached} throttled={throttled}");
        }
    }

    #[test]
    fn decision_names_round_trip() {
        for d in EmissionDecision::ALL {
            assert_eq!(EmissionDecision::parse(d.as_str()), Some(d));
            assert_eq!(serde_json::to_string(&d).unwrap(), format!("\"{}\"", d.as_str()));
        }
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<PolicyConfig>(r#"{"hazard_throttle_ms": 1, "bogus": 2}"#);
        assert!(err.is_err());
        let partial: PolicyConfig = serde_json::from_str(r#"{"sfx_throttle_ms": 10}"#).unwrap();
        assert_eq!(partial.sfx_throttle_ms, 10);
        assert_eq!(partial.hazard_throttle_ms, 5000);
    }
}
