//! Randomized event sequences for the throttle state machine and an
//! independent restatement of the table they are checked against.

use std::collections::{HashMap, HashSet};

use amava_core::category::AudioCategory;
use amava_core::policy::{step, EmissionDecision, PolicyConfig, ThrottleState};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Event {
    pub t: u64,
    pub category: AudioCategory,
    pub content: &'static str,
}

const TEXTS: [&str; 4] = ["passing car", "door slam", "wet floor", "a quiet room"];

pub fn random_sequence(rng: &mut ChaCha8Rng) -> Vec<Event> {
    let len = rng.random_range(1..60);
    let mut t = rng.random_range(0..2000);
    (0..len)
        .map(|_| {
            t += rng.random_range(0..4000);
            Event {
                t,
                category: AudioCategory::ALL[rng.random_range(0..4)],
                content: TEXTS[rng.random_range(0..TEXTS.len())],
            }
        })
        .collect()
}

/// Runs a sequence through the real state machine; synthesized clips land
/// in the cache before the next event.
pub fn replay(events: &[Event], cfg: &PolicyConfig) -> Vec<(EmissionDecision, bool)> {
    let mut state = ThrottleState::new();
    let mut cache: HashSet<(AudioCategory, &str)> = HashSet::new();
    events
        .iter()
        .map(|e| {
            let cached = cache.contains(&(e.category, e.content));
            let d = step(&mut state, e.category, cached, e.t, cfg).unwrap();
            if matches!(d, EmissionDecision::SynthesizeAndPlay | EmissionDecision::SynthesizeAndCacheOnly) {
                cache.insert((e.category, e.content));
            }
            (d, cached)
        })
        .collect()
}

/// Independent restatement of the throttle table.
pub fn reference(events: &[Event], cfg: &PolicyConfig) -> Vec<EmissionDecision> {
    let window = |c: AudioCategory| match c {
        AudioCategory::Hazard => cfg.hazard_throttle_ms,
        AudioCategory::Sfx => cfg.sfx_throttle_ms,
        AudioCategory::Description => cfg.description_throttle_ms,
        AudioCategory::None => 0,
    };
    let mut last: HashMap<AudioCategory, u64> = HashMap::new();
    let mut last_speech: Option<u64> = None;
    let mut cache: HashSet<(AudioCategory, &str)> = HashSet::new();
    let mut out = Vec::new();
    for e in events {
        let speech = matches!(e.category, AudioCategory::Hazard | AudioCategory::Description);
        let d = if e.category == AudioCategory::None {
            EmissionDecision::SkipNone
        } else if last.get(&e.category).is_some_and(|&p| e.t - p < window(e.category))
            || (speech && last_speech.is_some_and(|p| e.t - p < cfg.shared_tts_ms))
        {
            EmissionDecision::SkipThrottled
        } else if cache.contains(&(e.category, e.content)) {
            EmissionDecision::PlayCached
        } else if e.category == AudioCategory::Sfx {
            EmissionDecision::SynthesizeAndCacheOnly
        } else {
            EmissionDecision::SynthesizeAndPlay
        };
        if matches!(d, EmissionDecision::PlayCached | EmissionDecision::SynthesizeAndPlay) {
            last.insert(e.category, e.t);
            if speech {
                last_speech = Some(e.t);
            }
        }
        if matches!(d, EmissionDecision::SynthesizeAndPlay | EmissionDecision::SynthesizeAndCacheOnly) {
            cache.insert((e.category, e.content));
        }
        out.push(d);
    }
    out
}
