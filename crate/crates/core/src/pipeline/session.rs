use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use bytes::Bytes;
use thiserror::Error;
use tokio::runtime::Handle;
use tokio::sync::{mpsc, Notify};
use tokio::task::AbortHandle;

use super::log::{AuxRecord, DropReason, EventLog};
use super::{Components, ConfigError, EmissionEvent, PipelineConfig};
use crate::cache::key_of;
use crate::category::AudioCategory;
use crate::features::extract_features;
use crate::frame::{FrameBatch, GrayFrame};
use crate::interpreter::{interpret, SceneResponse};
use crate::policy::{decide, EmissionDecision, ThrottleState};
use crate::synth::{synthesize, SynthKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SessionError {
    #[error("session is closed")]
    Closed,
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// What happened to an ingested frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ingested {
    /// Waiting for its partner.
    Buffered,
    Started { batch_index: u64 },
    /// Batch formed while the in-flight cap was reached.
    Dropped { batch_index: u64 },
    /// Could not pair with the pending frame; the older frame was discarded.
    Unpaired { reason: String },
}

type Original = Bytes;

struct State {
    open: bool,
    pending: Option<(GrayFrame, Original)>,
    next_batch: u64,
    throttle: ThrottleState,
    workers: BTreeMap<u64, AbortHandle>,
    fills: HashMap<u64, AbortHandle>,
    next_fill: u64,
    next_seq: u64,
    next_send: u64,
    ready: BTreeMap<u64, EmissionEvent>,
    tx: Option<mpsc::UnboundedSender<EmissionEvent>>,
}

struct Shared {
    id: String,
    components: Components,
    cfg: PipelineConfig,
    log: Arc<EventLog>,
    runtime: Handle,
    state: Mutex<State>,
    idle: Notify,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn now(&self) -> u64 {
        self.components.clock.now_ms()
    }
}

/// Handle to a running session. Cheap to clone.
#[derive(Clone)]
pub struct Session {
    shared: Arc<Shared>,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("id", &self.shared.id).finish_non_exhaustive()
    }
}

impl Session {
    /// Must be called from within a tokio runtime; batch work is spawned on it.
    pub fn start(
        id: impl Into<String>,
        components: Components,
        cfg: PipelineConfig,
        log: Arc<EventLog>,
    ) -> Result<(Session, mpsc::UnboundedReceiver<EmissionEvent>), SessionError> {
        cfg.validate()?;
        let (tx, rx) = mpsc::unbounded_channel();
        let shared = Arc::new(Shared {
            id: id.into(),
            components,
            cfg,
            log,
            runtime: Handle::current(),
            state: Mutex::new(State {
                open: true,
                pending: None,
                next_batch: 0,
                throttle: ThrottleState::new(),
                workers: BTreeMap::new(),
                fills: HashMap::new(),
                next_fill: 0,
                next_seq: 0,
                next_send: 0,
                ready: BTreeMap::new(),
                tx: Some(tx),
            }),
            idle: Notify::new(),
        });
        Ok((Session { shared }, rx))
    }

    pub fn id(&self) -> &str {
        &self.shared.id
    }

    pub fn in_flight(&self) -> usize {
        self.shared.lock().workers.len()
    }

    pub fn is_open(&self) -> bool {
        self.shared.lock().open
    }

    /// Buffers a frame and starts a batch when a pair is complete. Never
    /// waits on batch processing.
    pub fn ingest(&self, frame: GrayFrame, original: Bytes) -> Result<Ingested, SessionError> {
        let shared = &self.shared;
        let mut st = shared.lock();
        if !st.open {
            return Err(SessionError::Closed);
        }
        let Some((prev, prev_original)) = st.pending.take() else {
            st.pending = Some((frame, original));
            return Ok(Ingested::Buffered);
        };
        let reason = if let Err(e) = prev.same_size(&frame) {
            Some(e.to_string())
        } else if prev.timestamp_ms() == frame.timestamp_ms() {
            Some(format!("duplicate capture timestamp {}", frame.timestamp_ms()))
        } else {
            None
        };
        if let Some(reason) = reason {
            tracing::warn!(session = %shared.id, %reason, "discarding unpaired frame");
            st.pending = Some((frame, original));
            return Ok(Ingested::Unpaired { reason });
        }
        let (first, second) = if frame.timestamp_ms() < prev.timestamp_ms() {
            ((frame, original), (prev, prev_original))
        } else {
            ((prev, prev_original), (frame, original))
        };
        let batch_index = st.next_batch;
        st.next_batch += 1;
        let t_batch = shared.now();
        if st.workers.len() >= shared.cfg.max_in_flight {
            shared.log.append(&AuxRecord::Drop {
                batch_index,
                reason: DropReason::Overload,
                t: t_batch,
            });
            tracing::debug!(session = %shared.id, batch_index, "in-flight cap reached, batch dropped");
            return Ok(Ingested::Dropped { batch_index });
        }
        let batch = FrameBatch::new(first.0, second.0, batch_index).expect("pair checked above");
        let originals = [first.1, second.1];
        let task = shared
            .runtime
            .spawn(run_batch(self.shared.clone(), batch, originals, t_batch));
        // The worker cannot finish before this insert: completing needs the lock.
        st.workers.insert(batch_index, task.abort_handle());
        Ok(Ingested::Started { batch_index })
    }

    /// Stops ingestion and waits for in-flight batches and cache fills.
    pub async fn finish(&self) {
        {
            let mut st = self.shared.lock();
            st.open = false;
            st.pending = None;
        }
        loop {
            let notified = self.shared.idle.notified();
            tokio::pin!(notified);
            notified.as_mut().enable();
            {
                let st = self.shared.lock();
                if st.workers.is_empty() && st.fills.is_empty() {
                    break;
                }
            }
            notified.await;
        }
        self.shutdown(false);
    }

    /// Closes immediately; unfinished batches are cancelled and logged.
    pub fn close(&self) {
        self.shutdown(true);
    }

    fn shutdown(&self, cancel: bool) {
        let mut st = self.shared.lock();
        st.open = false;
        st.pending = None;
        if cancel {
            let t = self.shared.now();
            for (batch_index, handle) in std::mem::take(&mut st.workers) {
                handle.abort();
                self.shared.log.append(&AuxRecord::Drop {
                    batch_index,
                    reason: DropReason::SessionClosed,
                    t,
                });
            }
            for (_, handle) in st.fills.drain() {
                handle.abort();
            }
            st.ready.clear();
        }
        st.tx = None;
        drop(st);
        self.shared.log.flush();
        self.shared.idle.notify_waiters();
    }
}

/// Result of feature extraction, classification and interpretation.
type Analysis = Result<SceneResponse, String>;

async fn analyze(shared: &Shared, batch: FrameBatch, originals: &[Bytes; 2]) -> Analysis {
    let batch_index = batch.batch_index();
    let flow = shared.cfg.flow;
    let features = tokio::task::spawn_blocking(move || extract_features(&batch, &flow))
        .await
        .map_err(|e| format!("feature task: {e}"))?
        .map_err(|e| format!("features: {e}"))?;
    let classification = shared.components.model.classify(&features);
    interpret(&*shared.components.interpreter, originals, classification.branch, batch_index)
        .await
        .map_err(|e| e.to_string())
}

async fn run_batch(shared: Arc<Shared>, batch: FrameBatch, originals: [Bytes; 2], t_batch: u64) {
    let batch_index = batch.batch_index();
    let analysis = analyze(&shared, batch, &originals).await;

    // Throttle and cache decisions are serialized per session.
    let (seq, mut event) = {
        let mut st = shared.lock();
        let t_decision = shared.now();
        let seq = st.next_seq;
        st.next_seq += 1;
        let mut event = EmissionEvent {
            batch_index,
            category: AudioCategory::None,
            decision: EmissionDecision::SkipFailed,
            text: String::new(),
            clip: None,
            clip_key: None,
            t_batch,
            t_decision,
            t_sent: t_decision,
        };
        match analysis {
            Err(e) => {
                tracing::warn!(session = %shared.id, batch_index, error = %e, "batch analysis failed");
            }
            Ok(resp) => {
                event.category = resp.category;
                let throttled = resp.category != AudioCategory::None
                    && st.throttle.should_throttle(resp.category, t_decision, &shared.cfg.policy);
                let cached = resp.category != AudioCategory::None && shared.components.cache.contains(&resp.content);
                event.decision = decide(resp.category, cached, throttled);
                if event.decision.is_play() {
                    st.throttle
                        .record_playback(resp.category, t_decision)
                        .expect("decision times come from a monotonic clock");
                }
                if resp.category != AudioCategory::None {
                    event.clip_key = Some(key_of(&resp.content));
                    event.text = resp.content;
                }
            }
        }
        if event.decision == EmissionDecision::SynthesizeAndCacheOnly {
            spawn_fill(&shared, &mut st, batch_index, event.text.clone());
        }
        (seq, event)
    };

    match event.decision {
        EmissionDecision::PlayCached => match shared.components.cache.get(&event.text) {
            Ok(Some(clip)) => event.clip = Some(clip.for_batch(batch_index)),
            Ok(None) => fail(&shared, &mut event, "cache entry vanished".into()),
            Err(e) => fail(&shared, &mut event, e.to_string()),
        },
        EmissionDecision::SynthesizeAndPlay => {
            match synthesize(
                &*shared.components.synth,
                kind_for(event.category),
                &event.text,
                event.category,
                batch_index,
            )
            .await
            {
                Ok(clip) => {
                    if let Err(e) = shared.components.cache.put(&event.text, &clip) {
                        tracing::warn!(session = %shared.id, error = %e, "cache put failed");
                    }
                    event.clip = Some(clip);
                }
                Err(e) => fail(&shared, &mut event, e.to_string()),
            }
        }
        _ => {}
    }
    complete(&shared, seq, event);
}

fn kind_for(category: AudioCategory) -> SynthKind {
    if category == AudioCategory::Sfx {
        SynthKind::Sfx
    } else {
        SynthKind::Tts
    }
}

fn fail(shared: &Shared, event: &mut EmissionEvent, error: String) {
    tracing::warn!(session = %shared.id, batch_index = event.batch_index, %error, "playback failed");
    event.decision = EmissionDecision::SkipFailed;
    event.clip = None;
}

/// Background synthesis for a sound effect that is not cached yet.
fn spawn_fill(shared: &Arc<Shared>, st: &mut State, batch_index: u64, text: String) {
    let id = st.next_fill;
    st.next_fill += 1;
    let sh = shared.clone();
    let task = shared.runtime.spawn(async move {
        let result = synthesize(&*sh.components.synth, SynthKind::Sfx, &text, AudioCategory::Sfx, batch_index).await;
        let record = match result.map_err(|e| e.to_string()).and_then(|clip| {
            sh.components.cache.put(&text, &clip).map_err(|e| e.to_string())
        }) {
            Ok(key) => AuxRecord::CacheFill {
                batch_index,
                clip_key: key.to_string(),
                t: sh.now(),
            },
            Err(error) => AuxRecord::CacheFillFailed {
                batch_index,
                error,
                t: sh.now(),
            },
        };
        let mut st = sh.lock();
        if st.fills.remove(&id).is_some() {
            sh.log.append(&record);
        }
        if st.workers.is_empty() && st.fills.is_empty() {
            sh.idle.notify_waiters();
        }
    });
    st.fills.insert(id, task.abort_handle());
}

/// Releases the worker slot and flushes every event that is next in
/// decision order.
fn complete(shared: &Shared, seq: u64, event: EmissionEvent) {
    let mut st = shared.lock();
    if st.workers.remove(&event.batch_index).is_none() {
        // Cancelled by close().
        return;
    }
    st.ready.insert(seq, event);
    loop {
        let next = st.next_send;
        let Some(mut ev) = st.ready.remove(&next) else { break };
        ev.t_sent = shared.now().max(ev.t_decision);
        shared.log.append(&ev.record());
        if let Some(tx) = &st.tx {
            let _ = tx.send(ev);
        }
        st.next_send += 1;
    }
    if st.workers.is_empty() && st.fills.is_empty() {
        shared.idle.notify_waiters();
    }
}

/// Feeds frames from `source` until it closes, then drains the session.
pub async fn run_session(session: &Session, mut source: mpsc::Receiver<(GrayFrame, Bytes)>) {
    while let Some((frame, original)) = source.recv().await {
        if session.ingest(frame, original).is_err() {
            return;
        }
    }
    session.finish().await;
}

#[derive(Debug, Clone)]
pub struct ScriptedFrame {
    /// Delivery time relative to the start of the run.
    pub at_ms: u64,
    pub frame: GrayFrame,
    pub original: Bytes,
}

impl ScriptedFrame {
    /// Delivered at the frame's own capture timestamp.
    pub fn at_capture(frame: GrayFrame) -> Self {
        Self {
            at_ms: frame.timestamp_ms(),
            frame,
            original: Bytes::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub events: Vec<EmissionEvent>,
    /// Wall time spent inside each `ingest` call.
    pub ingest_durations: Vec<Duration>,
    pub ingested: Vec<Ingested>,
}

/// Runs a whole session against a timed frame script and collects its events.
pub async fn run_scripted(
    components: Components,
    cfg: PipelineConfig,
    log: Arc<EventLog>,
    script: Vec<ScriptedFrame>,
) -> Result<SessionOutcome, SessionError> {
    let (session, mut rx) = Session::start("scripted", components, cfg, log)?;
    let collector = tokio::spawn(async move {
        let mut events = Vec::new();
        while let Some(ev) = rx.recv().await {
            events.push(ev);
        }
        events
    });
    let start = tokio::time::Instant::now();
    let mut ingest_durations = Vec::with_capacity(script.len());
    let mut ingested = Vec::with_capacity(script.len());
    for item in script {
        tokio::time::sleep_until(start + Duration::from_millis(item.at_ms)).await;
        let t0 = std::time::Instant::now();
        let outcome = session.ingest(item.frame, item.original)?;
        ingest_durations.push(t0.elapsed());
        ingested.push(outcome);
    }
    session.finish().await;
    let events = collector.await.expect("collector task");
    Ok(SessionOutcome {
        events,
        ingest_durations,
        ingested,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::AudioCache;
    use crate::classifier::MotionModel;
    use crate::corpus::texture;
    use crate::interpreter::{BranchPattern, MockInterpreter, ScriptEntry};
    use crate::pipeline::{Clock, TokioClock};
    use crate::synth::{CountingSynth, MockSynth};

    const W: usize = 64;
    const H: usize = 48;

    fn still(ts: u64) -> GrayFrame {
        GrayFrame::new(W, H, texture(W, H, 5), ts).unwrap()
    }

    fn shifted(ts: u64, dx: usize) -> GrayFrame {
        let base = texture(W + 8, H, 5);
        let mut px = Vec::with_capacity(W * H);
        for y in 0..H {
            for x in 0..W {
                px.push(base[y * (W + 8) + x + dx]);
            }
        }
        GrayFrame::new(W, H, px, ts).unwrap()
    }

    struct Rig {
        components: Components,
        synth: Arc<CountingSynth<MockSynth>>,
        log: Arc<EventLog>,
        _dir: tempfile::TempDir,
    }

    fn rig(interpreter: MockInterpreter, synth: MockSynth) -> Rig {
        let dir = tempfile::tempdir().unwrap();
        let synth = Arc::new(CountingSynth::new(synth));
        let components = Components {
            model: Arc::new(MotionModel::flow_threshold(1.0)),
            interpreter: Arc::new(interpreter),
            synth: synth.clone(),
            cache: Arc::new(AudioCache::open(dir.path()).unwrap()),
            clock: Arc::new(TokioClock::new()) as Arc<dyn Clock>,
        };
        Rig {
            components,
            synth,
            log: Arc::new(EventLog::memory()),
            _dir: dir,
        }
    }

    fn still_script(batches: u64) -> Vec<ScriptedFrame> {
        (0..batches * 2).map(|i| ScriptedFrame::at_capture(still(i * 500))).collect()
    }

    #[tokio::test(start_paused = true)]
    async fn pairing_is_disjoint() {
        let r = rig(MockInterpreter::constant("a quiet room", 0), MockSynth::new());
        let (s, _rx) = Session::start("t", r.components, PipelineConfig::default(), r.log).unwrap();
        assert_eq!(s.ingest(still(0), Bytes::new()).unwrap(), Ingested::Buffered);
        assert_eq!(s.ingest(still(500), Bytes::new()).unwrap(), Ingested::Started { batch_index: 0 });
        assert_eq!(s.ingest(still(1000), Bytes::new()).unwrap(), Ingested::Buffered);
        assert_eq!(s.ingest(still(1500), Bytes::new()).unwrap(), Ingested::Started { batch_index: 1 });
        assert_eq!(s.ingest(still(2000), Bytes::new()).unwrap(), Ingested::Buffered);
        s.finish().await;
        assert_eq!(s.ingest(still(2500), Bytes::new()), Err(SessionError::Closed));
    }

    #[tokio::test(start_paused = true)]
    async fn unpaired_frames_are_replaced() {
        let r = rig(MockInterpreter::constant("a quiet room", 0), MockSynth::new());
        let (s, _rx) = Session::start("t", r.components, PipelineConfig::default(), r.log).unwrap();
        s.ingest(still(0), Bytes::new()).unwrap();
        let small = GrayFrame::filled(32, 32, 0, 500);
        assert!(matches!(s.ingest(small, Bytes::new()).unwrap(), Ingested::Unpaired { .. }));
        let same_ts = GrayFrame::filled(32, 32, 0, 500);
        assert!(matches!(s.ingest(same_ts, Bytes::new()).unwrap(), Ingested::Unpaired { .. }));
        // Out-of-order capture times are reordered, not rejected.
        assert!(matches!(s.ingest(still(2000), Bytes::new()).unwrap(), Ingested::Unpaired { .. }));
        assert_eq!(s.ingest(still(1500), Bytes::new()).unwrap(), Ingested::Started { batch_index: 0 });
        s.close();
    }

    #[tokio::test(start_paused = true)]
    async fn static_batch_describes() {
        let r = rig(MockInterpreter::constant("quiet office with two desks", 0), MockSynth::new());
        let out = run_scripted(r.components, PipelineConfig::default(), r.log, still_script(1))
            .await
            .unwrap();
        assert_eq!(out.events.len(), 1);
        let ev = &out.events[0];
        assert_eq!(ev.category, AudioCategory::Description);
        assert_eq!(ev.decision, EmissionDecision::SynthesizeAndPlay);
        assert_eq!(ev.text, "quiet office with two desks");
        assert_eq!(ev.clip.as_ref().unwrap().duration_ms, 5 * 60);
        assert_eq!(r.synth.tts_calls(), 1);
    }

    #[tokio::test(start_paused = true)]
    async fn moving_sfx_is_cached_then_played() {
        let interp = MockInterpreter::new(vec![
            ScriptEntry::new(BranchPattern::High, "sfx: passing car"),
            ScriptEntry::new(BranchPattern::High, "sfx: passing car"),
            ScriptEntry::new(BranchPattern::High, "none"),
        ]);
        let r = rig(interp, MockSynth::new());
        let script = vec![
            ScriptedFrame::at_capture(shifted(0, 0)),
            ScriptedFrame::at_capture(shifted(500, 3)),
            ScriptedFrame::at_capture(shifted(3000, 0)),
            ScriptedFrame::at_capture(shifted(3500, 3)),
            ScriptedFrame::at_capture(shifted(4000, 0)),
            ScriptedFrame::at_capture(shifted(4500, 3)),
        ];
        let out = run_scripted(r.components, PipelineConfig::default(), r.log.clone(), script)
            .await
            .unwrap();
        let decisions: Vec<_> = out.events.iter().map(|e| e.decision).collect();
        assert_eq!(
            decisions,
            [
                EmissionDecision::SynthesizeAndCacheOnly,
                EmissionDecision::PlayCached,
                EmissionDecision::SkipNone
            ]
        );
        assert!(out.events[0].clip.is_none());
        assert_eq!(out.events[1].clip.as_ref().unwrap().duration_ms, 1000);
        assert_eq!(r.synth.sfx_calls(), 1);
        assert!(r.log.contents().contains("\"event\":\"cache_fill\""));
    }

    #[tokio::test(start_paused = true)]
    async fn interpreter_timeout_is_a_failed_skip() {
        let interp = MockInterpreter::constant("never", 10_000).with_timeout(Duration::from_millis(2500));
        let r = rig(interp, MockSynth::new());
        let out = run_scripted(r.components, PipelineConfig::default(), r.log, still_script(1))
            .await
            .unwrap();
        assert_eq!(out.events[0].decision, EmissionDecision::SkipFailed);
        assert_eq!(out.events[0].t_decision - out.events[0].t_batch, 2500);
        assert_eq!(r.synth.total_calls(), 0);
    }

    #[tokio::test(start_paused = true)]
    async fn zero_latency_processes_everything() {
        let r = rig(MockInterpreter::constant("none", 0).cycling(true), MockSynth::new());
        let out = run_scripted(r.components, PipelineConfig::default(), r.log.clone(), still_script(10))
            .await
            .unwrap();
        assert_eq!(out.events.len(), 10);
        assert!(!r.log.contents().contains("\"drop\""));
    }

    #[tokio::test(start_paused = true)]
    async fn slow_interpreter_drops_beyond_cap() {
        let interp = MockInterpreter::constant("a hallway", 3000).with_timeout(Duration::from_secs(10));
        let r = rig(interp, MockSynth::new());
        let out = run_scripted(r.components, PipelineConfig::default(), r.log.clone(), still_script(10))
            .await
            .unwrap();
        let drops = r.log.contents().matches("\"reason\":\"overload\"").count();
        assert!(drops >= 4, "only {drops} drops");
        assert_eq!(out.events.len() + drops, 10);
    }

    #[tokio::test(start_paused = true)]
    async fn close_cancels_in_flight() {
        let interp = MockInterpreter::constant("a hallway", 2000);
        let r = rig(interp, MockSynth::new());
        let (s, mut rx) = Session::start("t", r.components, PipelineConfig::default(), r.log.clone()).unwrap();
        s.ingest(still(0), Bytes::new()).unwrap();
        s.ingest(still(500), Bytes::new()).unwrap();
        tokio::time::sleep(Duration::from_millis(100)).await;
        s.close();
        tokio::time::sleep(Duration::from_secs(5)).await;
        assert!(rx.recv().await.is_none());
        assert!(r.log.contents().contains("session_closed"));
        assert_eq!(r.synth.total_calls(), 0);
    }
}
