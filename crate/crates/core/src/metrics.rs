//! Session performance measures computed from an event log: processing
//! latency, playback reordering and per-category gaps between plays.
//!
//! Played events are ordered by `t_sent`, ties broken by `batch_index`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::category::AudioCategory;
use crate::pipeline::{AuxRecord, EmissionRecord, LogRecord};
use crate::policy::{EmissionDecision, PolicyConfig};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("csv: {0}")]
    Csv(String),
}

/// Gap statistics for one category, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GapStats {
    pub count: usize,
    pub mean_s: f64,
    pub min_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub latency_mean_ms: f64,
    pub latency_median_ms: f64,
    pub latency_p95_ms: f64,
    pub reordering_rate: f64,
    pub events: usize,
    pub played: usize,
    pub drops: usize,
    pub cache_fills: usize,
    /// Keyed by the three audible categories; `count == 0` means fewer than
    /// two plays.
    pub gaps: BTreeMap<AudioCategory, GapStats>,
    pub decisions: BTreeMap<EmissionDecision, usize>,
}

impl Default for SessionReport {
    fn default() -> Self {
        Self {
            latency_mean_ms: 0.0,
            latency_median_ms: 0.0,
            latency_p95_ms: 0.0,
            reordering_rate: 0.0,
            events: 0,
            played: 0,
            drops: 0,
            cache_fills: 0,
            gaps: AUDIBLE.iter().map(|c| (*c, GapStats::default())).collect(),
            decisions: EmissionDecision::ALL.iter().map(|d| (*d, 0)).collect(),
        }
    }
}

const AUDIBLE: [AudioCategory; 3] = [AudioCategory::Description, AudioCategory::Hazard, AudioCategory::Sfx];

impl SessionReport {
    pub fn gap(&self, category: AudioCategory) -> Option<GapStats> {
        self.gaps.get(&category).copied().filter(|g| g.count > 0)
    }

    /// Categories whose smallest gap falls more than 1 ms under the throttle.
    pub fn gap_violations(&self, cfg: &PolicyConfig) -> Vec<AudioCategory> {
        AUDIBLE
            .into_iter()
            .filter(|c| {
                let floor = cfg.throttle_ms(*c).unwrap_or(0) as f64 / 1000.0;
                self.gap(*c).is_some_and(|g| g.min_s < floor - 0.001)
            })
            .collect()
    }
}

/// Parses an NDJSON log; blank lines are skipped.
pub fn parse_log(reader: impl BufRead) -> Result<Vec<LogRecord>, MetricsError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = LogRecord::parse(&line).map_err(|e| MetricsError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn analyze_str(log: &str) -> Result<SessionReport, MetricsError> {
    Ok(analyze(&parse_log(log.as_bytes())?))
}

pub fn analyze_file(path: &Path) -> Result<SessionReport, MetricsError> {
    let f = fs::File::open(path)?;
    Ok(analyze(&parse_log(io::BufReader::new(f))?))
}

pub fn analyze(records: &[LogRecord]) -> SessionReport {
    let mut report = SessionReport::default();
    let mut played: Vec<&EmissionRecord> = Vec::new();
    for rec in records {
        match rec {
            LogRecord::Emission(e) => {
                report.events += 1;
                *report.decisions.entry(e.decision).or_default() += 1;
                if e.decision.is_play() {
                    played.push(e);
                }
            }
            LogRecord::Aux(AuxRecord::Drop { .. }) => report.drops += 1,
            LogRecord::Aux(AuxRecord::CacheFill { .. }) => report.cache_fills += 1,
            LogRecord::Aux(AuxRecord::CacheFillFailed { .. }) => {}
        }
    }
    played.sort_by_key(|e| (e.t_sent, e.batch_index));
    report.played = played.len();
    if played.is_empty() {
        return report;
    }

    let mut latencies: Vec<f64> = played
        .iter()
        .map(|e| e.t_sent.saturating_sub(e.t_batch) as f64)
        .collect();
    latencies.sort_by(f64::total_cmp);
    report.latency_mean_ms = latencies.iter().sum::<f64>() / latencies.len() as f64;
    report.latency_median_ms = percentile(&latencies, 0.5);
    report.latency_p95_ms = percentile(&latencies, 0.95);

    let mut max_seen: Option<u64> = None;
    let mut reordered = 0usize;
    for e in &played {
        if max_seen.is_some_and(|m| e.batch_index < m) {
            reordered += 1;
        }
        max_seen = Some(max_seen.map_or(e.batch_index, |m| m.max(e.batch_index)));
    }
    report.reordering_rate = reordered as f64 / played.len() as f64;

    for c in AUDIBLE {
        let times: Vec<u64> = played.iter().filter(|e| e.category == c).map(|e| e.t_sent).collect();
        let gaps: Vec<f64> = times.windows(2).map(|w| (w[1] - w[0]) as f64 / 1000.0).collect();
        if !gaps.is_empty() {
            report.gaps.insert(
                c,
                GapStats {
                    count: gaps.len(),
                    mean_s: gaps.iter().sum::<f64>() / gaps.len() as f64,
                    min_s: gaps.iter().copied().fold(f64::INFINITY, f64::min),
                },
            );
        }
    }
    report
}

/// Linear interpolation between closest ranks; `sorted` must be ascending.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

fn metric_rows(r: &SessionReport) -> Vec<(String, String)> {
    let mut rows = vec![
        ("latency_mean_ms".to_string(), r.latency_mean_ms.to_string()),
        ("latency_median_ms".into(), r.latency_median_ms.to_string()),
        ("latency_p95_ms".into(), r.latency_p95_ms.to_string()),
        ("reordering_rate".into(), r.reordering_rate.to_string()),
        ("events".into(), r.events.to_string()),
        ("played".into(), r.played.to_string()),
        ("drops".into(), r.drops.to_string()),
        ("cache_fills".into(), r.cache_fills.to_string()),
    ];
    for c in AUDIBLE {
        let g = r.gaps.get(&c).copied().unwrap_or_default();
        rows.push((format!("gap_count.{c}"), g.count.to_string()));
        rows.push((format!("gap_mean_s.{c}"), g.mean_s.to_string()));
        rows.push((format!("gap_min_s.{c}"), g.min_s.to_string()));
    }
    for d in EmissionDecision::ALL {
        let n = r.decisions.get(&d).copied().unwrap_or(0);
        rows.push((format!("decisions.{d}"), n.to_string()));
    }
    rows
}

pub fn write_csv(report: &SessionReport, w: impl io::Write) -> Result<(), MetricsError> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| MetricsError::Csv(e.to_string());
    out.write_record(["metric", "value"]).map_err(csv_err)?;
    for (k, v) in metric_rows(report) {
        out.write_record([k, v]).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn export(report: &SessionReport, path: &Path) -> Result<(), MetricsError> {
    let f = fs::File::create(path)?;
    write_csv(report, f)
}

pub fn read_csv(r: impl io::Read) -> Result<SessionReport, MetricsError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut values = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| MetricsError::Csv(e.to_string()))?;
        if row.len() != 2 {
            return Err(MetricsError::Csv(format!("expected 2 columns, got {}", row.len())));
        }
        values.insert(row[0].to_string(), row[1].to_string());
    }
    let get = |k: &str| -> Result<&str, MetricsError> {
        values
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| MetricsError::Csv(format!("missing metric {k}")))
    };
    let f = |k: &str| -> Result<f64, MetricsError> {
        get(k)?.parse().map_err(|_| MetricsError::Csv(format!("bad number for {k}")))
    };
    let n = |k: &str| -> Result<usize, MetricsError> {
        get(k)?.parse().map_err(|_| MetricsError::Csv(format!("bad count for {k}")))
    };
    let mut report = SessionReport {
        latency_mean_ms: f("latency_mean_ms")?,
        latency_median_ms: f("latency_median_ms")?,
        latency_p95_ms: f("latency_p95_ms")?,
        reordering_rate: f("reordering_rate")?,
        events: n("events")?,
        played: n("played")?,
        drops: n("drops")?,
        cache_fills: n("cache_fills")?,
        ..SessionReport::default()
    };
    for c in AUDIBLE {
        report.gaps.insert(
            c,
            GapStats {
                count: n(&format!("gap_count.{c}"))?,
                mean_s: f(&format!("gap_mean_s.{c}"))?,
                min_s: f(&format!("gap_min_s.{c}"))?,
            },
        );
    }
    for d in EmissionDecision::ALL {
        report.decisions.insert(d, n(&format!("decisions.{d}"))?);
    }
    Ok(report)
}

pub fn load_csv(path: &Path) -> Result<SessionReport, MetricsError> {
    read_csv(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn play(batch_index: u64, category: AudioCategory, t_batch: u64, t_sent: u64) -> LogRecord {
        LogRecord::Emission(EmissionRecord {
            batch_index,
            category,
            decision: EmissionDecision::SynthesizeAndPlay,
            clip_key: None,
            t_batch,
            t_decision: t_batch,
            t_sent,
        })
    }

    #[test]
    fn in_order_has_no_reordering() {
        let log: Vec<_> = (0..3).map(|i| play(i, AudioCategory::Hazard, i * 1000, i * 1000 + 10)).collect();
        assert_eq!(analyze(&log).reordering_rate, 0.0);
    }

    #[test]
    fn one_late_event_is_a_third() {
        let log = vec![
            play(0, AudioCategory::Sfx, 0, 100),
            play(2, AudioCategory::Sfx, 2000, 2100),
            play(1, AudioCategory::Sfx, 1000, 2200),
        ];
        let r = analyze(&log);
        assert!((r.reordering_rate - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.latency_median_ms, 100.0);
        assert_eq!(r.latency_mean_ms, (100.0 + 100.0 + 1200.0) / 3.0);
    }

    #[test]
    fn description_gap_in_seconds() {
        let log = vec![
            play(0, AudioCategory::Description, 0, 0),
            play(16, AudioCategory::Description, 16_000, 16_000),
        ];
        let r = analyze(&log);
        let g = r.gap(AudioCategory::Description).unwrap();
        assert_eq!((g.count, g.mean_s, g.min_s), (1, 16.0, 16.0));
        assert!(r.gap_violations(&PolicyConfig::default()).is_empty());
        assert!(r.gap(AudioCategory::Hazard).is_none());
    }

    #[test]
    fn skips_and_aux_records_are_counted_not_timed() {
        let text = concat!(
            r#"{"batch_index":0,"category":"none","decision":"skip_none","clip_key":null,"t_batch":0,"t_decision":5,"t_sent":5}"#,
            "\n\n",
            r#"{"event":"drop","batch_index":1,"reason":"overload","t":900}"#,
            "\n",
            r#"{"event":"cache_fill","batch_index":2,"clip_key":"ab","t":950}"#,
            "\n"
        );
        let r = analyze_str(text).unwrap();
        assert_eq!((r.events, r.played, r.drops, r.cache_fills), (1, 0, 1, 1));
        assert_eq!(r.decisions[&EmissionDecision::SkipNone], 1);
        assert_eq!(r.latency_mean_ms, 0.0);
    }

    #[test]
    fn malformed_line_is_reported() {
        let text = concat!(
            r#"{"event":"drop","batch_index":1,"reason":"overload","t":900}"#,
            "\n",
            r#"{"batch_index":"x"}"#,
            "\n"
        );
        match analyze_str(text) {
            Err(MetricsError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tie_break_by_batch_index() {
        let a = vec![play(1, AudioCategory::Sfx, 0, 50), play(0, AudioCategory::Sfx, 0, 50)];
        let b = vec![play(0, AudioCategory::Sfx, 0, 50), play(1, AudioCategory::Sfx, 0, 50)];
        assert_eq!(analyze(&a), analyze(&b));
    }

    #[test]
    fn empty_log_is_zeros() {
        let r = analyze(&[]);
        assert_eq!(r, SessionReport::default());
        assert_eq!(r.events, 0);
        let mut buf = Vec::new();
        write_csv(&r, &mut buf).unwrap();
        assert_eq!(read_csv(buf.as_slice()).unwrap(), r);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_eq!(percentile(&v, 0.95), 4.8);
        assert_eq!(percentile(&[7.0], 0.95), 7.0);
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = export(&SessionReport::default(), &dir.path().join("missing/out.csv")).unwrap_err();
        assert!(matches!(err, MetricsError::Io(_)));
    }

    proptest! {
        #[test]
        fn csv_round_trip(sends in proptest::collection::vec((0u64..50, 0usize..3, 0u64..10_000, 0u64..500), 0..40)) {
            let log: Vec<_> = sends
                .iter()
                .map(|(b, c, t, lat)| play(*b, AUDIBLE[*c], *t, t + lat))
                .collect();
            let r = analyze(&log);
            prop_assert!((0.0..=1.0).contains(&r.reordering_rate));
            prop_assert!(r.latency_mean_ms >= 0.0 && r.latency_p95_ms >= r.latency_median_ms);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.csv");
            export(&r, &path).unwrap();
            prop_assert_eq!(load_csv(&path).unwrap(), r);
        }
    }
}
