#![allow(dead_code)]

pub mod policy_oracle;

use std::sync::Arc;

use amava_core::cache::{key_of, AudioCache};
use amava_core::category::AudioCategory;
use amava_core::classifier::{
    train, Branch, LabeledDataset, LabeledRow, MotionModel, MovementClass, TrainConfig,
};
use amava_core::corpus::{synthetic_clip, synthetic_clips, texture, ClipSpec};
use amava_core::features::{extract_features, FlowParams};
use amava_core::frame::GrayFrame;
use amava_core::interpreter::{BranchPattern, MockInterpreter, ScriptEntry};
use amava_core::pipeline::{Clock, Components, EventLog, PipelineConfig, ScriptedFrame, SessionOutcome, TokioClock};
use amava_core::policy::EmissionDecision;
use amava_core::synth::{CountingSynth, MockSynth};
use rand::SeedableRng;

/// Straight double loop over pixels.
pub fn naive_frame_difference(a: &GrayFrame, b: &GrayFrame) -> f64 {
    let mut total = 0.0f64;
    for y in 0..a.height() {
        for x in 0..a.width() {
            total += (b.get(x, y) as f64 - a.get(x, y) as f64).abs();
        }
    }
    total / (a.width() * a.height()) as f64
}

pub const TRACE_W: usize = 96;
pub const TRACE_H: usize = 72;

fn trace_frame(ts: u64, dx: usize) -> GrayFrame {
    let wide = texture(TRACE_W + 8, TRACE_H, 21);
    let mut px = Vec::with_capacity(TRACE_W * TRACE_H);
    for y in 0..TRACE_H {
        let row = y * (TRACE_W + 8);
        px.extend_from_slice(&wide[row + dx..row + dx + TRACE_W]);
    }
    GrayFrame::new(TRACE_W, TRACE_H, px, ts).unwrap()
}

/// One scripted batch: whether the pair moves, what the interpreter says,
/// and the hand-derived outcome.
pub struct TraceStep {
    pub moving: bool,
    pub reply: &'static str,
    pub category: AudioCategory,
    pub decision: EmissionDecision,
    pub content: &'static str,
}

const fn step(
    moving: bool,
    reply: &'static str,
    category: AudioCategory,
    decision: EmissionDecision,
    content: &'static str,
) -> TraceStep {
    TraceStep {
        moving,
        reply,
        category,
        decision,
        content,
    }
}

use AudioCategory as C;
use EmissionDecision as D;

/// Batch k is formed at 1000k + 500 ms. Throttles: hazard 5 s, sfx 3 s,
/// description 15 s, shared speech 4 s.
pub const GOLDEN_TRACE: [TraceStep; 20] = [
    // 500: first description, nothing cached.
    step(false, "A quiet office with two desks.", C::Description, D::SynthesizeAndPlay, "A quiet office with two desks."),
    step(true, "none", C::None, D::SkipNone, ""),
    // 2500: sound effect miss, synthesized in the background only.
    step(true, "sfx: passing car", C::Sfx, D::SynthesizeAndCacheOnly, "passing car"),
    // 3500: 3000 ms after the description, inside the shared 4 s window.
    step(true, "hazard: Wet floor ahead", C::Hazard, D::SkipThrottled, "Wet floor ahead"),
    // 4500: now cached, first sfx play.
    step(true, "sfx: passing car", C::Sfx, D::PlayCached, "passing car"),
    step(true, "hazard: Wet floor ahead", C::Hazard, D::SynthesizeAndPlay, "Wet floor ahead"),
    step(false, "A long corridor with doors.", C::Description, D::SkipThrottled, "A long corridor with doors."),
    // 7500: exactly 3000 ms after the last sfx.
    step(true, "sfx: passing car", C::Sfx, D::PlayCached, "passing car"),
    step(true, "sfx: door slam", C::Sfx, D::SkipThrottled, "door slam"),
    step(true, "none", C::None, D::SkipNone, ""),
    // 10500: exactly 5000 ms after the last hazard.
    step(true, "hazard: Stairs going down", C::Hazard, D::SynthesizeAndPlay, "Stairs going down"),
    step(true, "sfx: door slam", C::Sfx, D::SynthesizeAndCacheOnly, "door slam"),
    step(false, "A quiet office with two desks.", C::Description, D::SkipThrottled, "A quiet office with two desks."),
    step(true, "sfx: door slam", C::Sfx, D::PlayCached, "door slam"),
    step(true, "none", C::None, D::SkipNone, ""),
    // 15500: the batch-5 hazard clip was cached when it was synthesized.
    step(true, "hazard: Wet floor ahead", C::Hazard, D::PlayCached, "Wet floor ahead"),
    // 16500: description window open again, shared timer still closed.
    step(false, "A quiet office with two desks.", C::Description, D::SkipThrottled, "A quiet office with two desks."),
    step(true, "Garbled reply without a category", C::None, D::SkipNone, ""),
    step(false, "Sunlight on a wooden floor.", C::Description, D::SkipThrottled, "Sunlight on a wooden floor."),
    // 19500: shared window has just reopened; the batch-0 clip is cached.
    step(false, "A quiet office with two desks.", C::Description, D::PlayCached, "A quiet office with two desks."),
];

/// Flattened expected emission record as a tuple.
pub type ExpectedRecord = (u64, AudioCategory, EmissionDecision, Option<String>, u64, u64, u64);

pub fn golden_expected() -> Vec<ExpectedRecord> {
    GOLDEN_TRACE
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let t = 1000 * k as u64 + 500;
            let key = (s.category != C::None).then(|| key_of(s.content).to_string());
            (k as u64, s.category, s.decision, key, t, t, t)
        })
        .collect()
}

pub fn golden_frames() -> Vec<ScriptedFrame> {
    let mut frames = Vec::new();
    for (k, s) in GOLDEN_TRACE.iter().enumerate() {
        let t0 = 1000 * k as u64;
        frames.push(ScriptedFrame::at_capture(trace_frame(t0, 0)));
        frames.push(ScriptedFrame::at_capture(trace_frame(t0 + 500, if s.moving { 3 } else { 0 })));
    }
    frames
}

pub fn golden_interpreter() -> MockInterpreter {
    MockInterpreter::new(
        GOLDEN_TRACE
            .iter()
            .map(|s| {
                let branch = if s.moving { BranchPattern::High } else { BranchPattern::Low };
                ScriptEntry::new(branch, s.reply)
            })
            .collect(),
    )
}

pub struct Rig {
    pub components: Components,
    pub synth: Arc<CountingSynth<MockSynth>>,
    pub log: Arc<EventLog>,
    pub dir: tempfile::TempDir,
}

pub fn rig(interpreter: MockInterpreter, synth: MockSynth) -> Rig {
    let dir = tempfile::tempdir().unwrap();
    let synth = Arc::new(CountingSynth::new(synth));
    Rig {
        components: Components {
            model: Arc::new(MotionModel::flow_threshold(1.0)),
            interpreter: Arc::new(interpreter),
            synth: synth.clone(),
            cache: Arc::new(AudioCache::open(dir.path()).unwrap()),
            clock: Arc::new(TokioClock::new()) as Arc<dyn Clock>,
        },
        synth,
        log: Arc::new(EventLog::memory()),
        dir,
    }
}

/// Runs the golden session once on a fresh cache; call under paused time.
pub async fn run_golden() -> (SessionOutcome, Vec<String>, Rig) {
    let r = rig(golden_interpreter(), MockSynth::new());
    let out = amava_core::pipeline::run_scripted(
        r.components.clone(),
        PipelineConfig::default(),
        r.log.clone(),
        golden_frames(),
    )
    .await
    .unwrap();
    let lines = r.log.lines();
    (out, lines, r)
}

/// Static-with-noise and translating clips at the default corpus size.
pub fn held_out_branch_clips(count_per_branch: usize, seed: u64) -> Vec<(amava_core::frame::FrameBatch, Branch)> {
    let spec = ClipSpec::default();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..count_per_branch {
        let low = synthetic_clip(&spec, MovementClass::Low, out.len() as u64, &mut rng);
        out.push((low.batch, Branch::Low));
        let moving = if i % 2 == 0 { MovementClass::Medium } else { MovementClass::High };
        let clip = synthetic_clip(&spec, moving, out.len() as u64, &mut rng);
        out.push((clip.batch, Branch::High));
    }
    out
}

/// Features extracted from synthetic clips, labelled by construction.
pub fn clip_dataset(per_class: usize, seed: u64) -> LabeledDataset {
    let params = FlowParams::default();
    let rows = synthetic_clips(&ClipSpec::default(), per_class, seed)
        .into_iter()
        .map(|c| LabeledRow {
            features: extract_features(&c.batch, &params).unwrap(),
            label: c.label,
        })
        .collect();
    LabeledDataset::new(rows)
}

/// Model trained on clip features plus its test-split accuracy.
pub fn trained_clip_model(seed: u64) -> (MotionModel, f64) {
    let data = clip_dataset(100, seed);
    let trained = train(
        &data,
        &TrainConfig {
            seed,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let acc = trained.report.test_accuracy;
    (
        MotionModel {
            params: trained.params,
            scaler: trained.scaler,
        },
        acc,
    )
}
