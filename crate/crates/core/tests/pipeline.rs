mod common;

use std::time::Duration;

use amava_core::category::AudioCategory;
use amava_core::corpus::texture;
use amava_core::frame::GrayFrame;
use amava_core::interpreter::{BranchPattern, MockInterpreter, ScriptEntry};
use amava_core::metrics::analyze_str;
use amava_core::pipeline::{run_scripted, EmissionRecord, Ingested, LogRecord, PipelineConfig, ScriptedFrame};
use amava_core::policy::{EmissionDecision, PolicyConfig};
use amava_core::synth::{parse_wav_header, MockSynth};
use rand::{Rng, SeedableRng};

fn emission_records(lines: &[String]) -> Vec<EmissionRecord> {
    lines
        .iter()
        .filter_map(|l| match LogRecord::parse(l).unwrap() {
            LogRecord::Emission(e) => Some(e),
            LogRecord::Aux(_) => None,
        })
        .collect()
}

fn still_script(batches: u64, period_ms: u64) -> Vec<ScriptedFrame> {
    (0..batches * 2)
        .map(|i| {
            let f = GrayFrame::new(64, 48, texture(64, 48, 9), i * period_ms).unwrap();
            ScriptedFrame::at_capture(f)
        })
        .collect()
}

fn no_throttle() -> PipelineConfig {
    PipelineConfig {
        policy: PolicyConfig {
            hazard_throttle_ms: 0,
            sfx_throttle_ms: 0,
            description_throttle_ms: 0,
            shared_tts_ms: 0,
        },
        ..PipelineConfig::default()
    }
}

#[tokio::test(start_paused = true)]
async fn golden_trace_matches_hand_derivation() {
    let (out, lines, rig) = common::run_golden().await;
    let got: Vec<common::ExpectedRecord> = emission_records(&lines)
        .into_iter()
        .map(|r| (r.batch_index, r.category, r.decision, r.clip_key, r.t_batch, r.t_decision, r.t_sent))
        .collect();
    assert_eq!(got, common::golden_expected());
    assert_eq!(out.events.len(), 20);

    // Clips carry the mock renderer's audio for the spoken or effect text.
    for ev in out.events.iter().filter(|e| e.is_play()) {
        let clip = ev.clip.as_ref().unwrap();
        assert!(parse_wav_header(&clip.bytes).is_some());
        assert_eq!(clip.batch_index, ev.batch_index);
        assert_eq!(clip.category, ev.category);
    }
    // Batches 0, 5 and 10 synthesize speech; 2 and 11 fill effects in the background.
    assert_eq!(rig.synth.tts_calls(), 3);
    assert_eq!(rig.synth.sfx_calls(), 2);
    let fills = lines.iter().filter(|l| l.contains("\"event\":\"cache_fill\"")).count();
    assert_eq!(fills, 2);
}

#[tokio::test(start_paused = true)]
async fn golden_trace_is_reproducible() {
    let (_, a, _) = common::run_golden().await;
    let (_, b, _) = common::run_golden().await;
    assert_eq!(a, b);
}

#[tokio::test(start_paused = true)]
async fn golden_trace_metrics() {
    let (_, lines, _) = common::run_golden().await;
    let report = analyze_str(&lines.join("\n")).unwrap();
    assert_eq!(report.reordering_rate, 0.0);
    assert_eq!(report.played, 8);
    assert!(report.gap_violations(&PolicyConfig::default()).is_empty());
    assert_eq!(report.gap(AudioCategory::Sfx).unwrap().min_s, 3.0);
    assert_eq!(report.gap(AudioCategory::Hazard).unwrap().min_s, 5.0);
    assert_eq!(report.gap(AudioCategory::Description).unwrap().min_s, 19.0);
}

#[tokio::test(start_paused = true)]
async fn repeated_prompt_synthesizes_once() {
    let r = common::rig(MockInterpreter::constant("A quiet office.", 0), MockSynth::new());
    let out = run_scripted(r.components.clone(), no_throttle(), r.log.clone(), still_script(50, 500))
        .await
        .unwrap();
    assert_eq!(out.events.len(), 50);
    assert_eq!(r.synth.total_calls(), 1);
    assert_eq!(out.events[0].decision, EmissionDecision::SynthesizeAndPlay);
    assert!(out.events[1..].iter().all(|e| e.decision == EmissionDecision::PlayCached));
    assert_eq!(r.components.cache.entry("a quiet office").unwrap().hit_count, 49);
}

#[tokio::test(start_paused = true)]
async fn stalled_synth_does_not_block_ingest() {
    let synth = MockSynth::new()
        .with_latency(Duration::from_secs(5))
        .with_timeout(Duration::from_secs(30));
    let interp = MockInterpreter::new(
        (0..10)
            .map(|i| ScriptEntry::new(BranchPattern::Low, format!("scene number {i}")))
            .collect(),
    );
    let r = common::rig(interp, synth);
    let out = run_scripted(r.components.clone(), no_throttle(), r.log.clone(), still_script(10, 500))
        .await
        .unwrap();
    let worst = out.ingest_durations.iter().max().unwrap();
    assert!(*worst < Duration::from_millis(10), "slowest ingest {worst:?}");
    let started = out.ingested.iter().filter(|i| matches!(i, Ingested::Started { .. })).count();
    let dropped = out.ingested.iter().filter(|i| matches!(i, Ingested::Dropped { .. })).count();
    assert_eq!(started + dropped, 10);
    assert!(dropped >= 4, "{dropped} drops");
    assert_eq!(out.events.len(), started);
    let logged = r.log.contents().matches("\"reason\":\"overload\"").count();
    assert_eq!(logged, dropped);
    // The first two batches occupy both slots for the whole stall.
    assert_eq!(out.ingested[1], Ingested::Started { batch_index: 0 });
    assert_eq!(out.ingested[3], Ingested::Started { batch_index: 1 });
    assert!(matches!(out.ingested[5], Ingested::Dropped { batch_index: 2 }));
}

async fn reordering_with(latencies: Vec<u64>, max_in_flight: usize) -> f64 {
    let entries = latencies
        .iter()
        .enumerate()
        .map(|(i, ms)| ScriptEntry::new(BranchPattern::Low, format!("view {i}")).with_latency(*ms))
        .collect();
    let r = common::rig(MockInterpreter::new(entries).with_timeout(Duration::from_secs(10)), MockSynth::new());
    let cfg = PipelineConfig {
        max_in_flight,
        ..no_throttle()
    };
    let n = latencies.len() as u64;
    run_scripted(r.components.clone(), cfg, r.log.clone(), still_script(n, 500))
        .await
        .unwrap();
    analyze_str(&r.log.contents()).unwrap().reordering_rate
}

#[tokio::test(start_paused = true)]
async fn uniform_latency_never_reorders() {
    assert_eq!(reordering_with(vec![800; 12], 2).await, 0.0);
}

#[tokio::test(start_paused = true)]
async fn random_latency_with_wide_cap_reorders() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    let latencies = (0..20).map(|_| rng.random_range(500..=3000)).collect();
    let rate = reordering_with(latencies, 4).await;
    assert!(rate > 0.0);
}

#[tokio::test(start_paused = true)]
async fn session_log_lines_are_well_formed() {
    let (_, lines, _) = common::run_golden().await;
    for line in &lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v.get("event").is_none() {
            let rec: EmissionRecord = serde_json::from_value(v).unwrap();
            assert!(rec.t_batch <= rec.t_decision && rec.t_decision <= rec.t_sent);
        }
    }
}
