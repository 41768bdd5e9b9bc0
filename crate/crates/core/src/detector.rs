//! Event-counter anomaly detector. Classifies an actor from two ratios over
//! a sampling window: cache misses per ITLB event and cache references per
//! ITLB event. Cache attacks churn data lines from a tiny code loop, so both
//! ratios run far above anything ordinary software produces; normalizing by
//! ITLB activity keeps busy-but-honest workloads (builds, streaming) below
//! the line.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use crate::mem::{ActorId, CounterSample, MemorySystem};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    /// Malicious when cache_misses / itlb >= k_m.
    pub k_m: f64,
    /// Malicious when cache_references / itlb >= k_r.
    pub k_r: f64,
    /// Cycles between monitor samples.
    pub sampling_interval: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig { k_m: 2.35, k_r: 2.34, sampling_interval: 100_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Benign,
    Malicious,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malicious => "malicious",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub label: Label,
    pub miss_ratio: f64,
    pub ref_ratio: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("sample has no ITLB events; ratios are undefined")]
    ZeroItlb,
    #[error(
        "{metric} ratios overlap: worst benign {benign_max:.6} >= best malicious {malicious_min:.6}; \
         no threshold separates the calibration sets"
    )]
    ThresholdOverlap { metric: &'static str, benign_max: f64, malicious_min: f64 },
    #[error("calibration needs at least one benign and one malicious sample")]
    EmptyCalibrationSet,
    #[error("bad counter csv at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn itlb_events(s: &CounterSample) -> u64 {
    s.itlb_ra + s.itlb_wa
}

/// Ratio pair for a sample, or None when ITLB count is zero.
pub fn ratios(s: &CounterSample) -> Option<(f64, f64)> {
    let itlb = itlb_events(s);
    if itlb == 0 {
        return None;
    }
    Some((
        s.cache_misses as f64 / itlb as f64,
        s.cache_references as f64 / itlb as f64,
    ))
}

/// Applies both thresholds to one sample (a window delta or a whole run).
/// Either ratio at or above its threshold flags the actor.
pub fn classify(cfg: &DetectorConfig, s: &CounterSample) -> Result<Classification, DetectorError> {
    let (miss_ratio, ref_ratio) = ratios(s).ok_or(DetectorError::ZeroItlb)?;
    let label = if miss_ratio >= cfg.k_m || ref_ratio >= cfg.k_r {
        Label::Malicious
    } else {
        Label::Benign
    };
    Ok(Classification { label, miss_ratio, ref_ratio })
}

/// Picks per-metric thresholds from labelled exemplar runs: midpoint between
/// the worst benign ratio and the best malicious ratio. Fails loudly when a
/// metric's ranges overlap rather than producing a threshold that silently
/// misclassifies part of the calibration set.
pub fn calibrate_thresholds(
    benign: &[CounterSample],
    malicious: &[CounterSample],
    sampling_interval: u64,
) -> Result<DetectorConfig, DetectorError> {
    if benign.is_empty() || malicious.is_empty() {
        return Err(DetectorError::EmptyCalibrationSet);
    }
    let mut benign_max = (f64::MIN, f64::MIN);
    for s in benign {
        let (m, r) = ratios(s).ok_or(DetectorError::ZeroItlb)?;
        benign_max.0 = benign_max.0.max(m);
        benign_max.1 = benign_max.1.max(r);
    }
    let mut malicious_min = (f64::MAX, f64::MAX);
    for s in malicious {
        let (m, r) = ratios(s).ok_or(DetectorError::ZeroItlb)?;
        malicious_min.0 = malicious_min.0.min(m);
        malicious_min.1 = malicious_min.1.min(r);
    }
    if benign_max.0 >= malicious_min.0 {
        return Err(DetectorError::ThresholdOverlap {
            metric: "cache_misses/itlb",
            benign_max: benign_max.0,
            malicious_min: malicious_min.0,
        });
    }
    if benign_max.1 >= malicious_min.1 {
        return Err(DetectorError::ThresholdOverlap {
            metric: "cache_references/itlb",
            benign_max: benign_max.1,
            malicious_min: malicious_min.1,
        });
    }
    Ok(DetectorConfig {
        k_m: (benign_max.0 + malicious_min.0) / 2.0,
        k_r: (benign_max.1 + malicious_min.1) / 2.0,
        sampling_interval,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowScope {
    Window,
    WholeRun,
}

impl RowScope {
    pub fn as_str(self) -> &'static str {
        match self {
            RowScope::Window => "window",
            RowScope::WholeRun => "whole_run",
        }
    }
}

/// One monitored interval for one actor. `outcome` is None when the actor
/// retired no ITLB events in the window: nothing ran, nothing to judge.
#[derive(Debug, Clone)]
pub struct MonitorRow {
    pub actor: String,
    pub window_start: u64,
    pub window_end: u64,
    pub scope: RowScope,
    pub sample: CounterSample,
    pub outcome: Option<Classification>,
}

/// Samples per-actor counter deltas every `sampling_interval` cycles. Drive
/// `poll` from a scheduler observer, then `finalize` to flush the last
/// partial window and append whole-run rows.
pub struct Monitor {
    cfg: DetectorConfig,
    initial: Vec<(ActorId, CounterSample)>,
    last: Vec<(ActorId, CounterSample)>,
    window_start: u64,
    next_due: u64,
    pub rows: Vec<MonitorRow>,
}

impl Monitor {
    pub fn new(cfg: DetectorConfig, sys: &MemorySystem, actors: &[ActorId]) -> Self {
        let snap: Vec<(ActorId, CounterSample)> =
            actors.iter().map(|&a| (a, sys.read_counters(a))).collect();
        let now = sys.clock();
        Monitor {
            initial: snap.clone(),
            last: snap,
            window_start: now,
            next_due: now + cfg.sampling_interval,
            cfg,
            rows: Vec::new(),
        }
    }

    fn emit_window(&mut self, sys: &MemorySystem, end: u64) {
        for (actor, prev) in self.last.iter_mut() {
            let now = sys.read_counters(*actor);
            let delta = now.delta(prev);
            self.rows.push(MonitorRow {
                actor: sys.actor_name(*actor).to_string(),
                window_start: self.window_start,
                window_end: end,
                scope: RowScope::Window,
                sample: delta,
                outcome: classify(&self.cfg, &delta).ok(),
            });
            *prev = now;
        }
        self.window_start = end;
    }

    pub fn poll(&mut self, sys: &MemorySystem) {
        while sys.clock() >= self.next_due {
            let end = self.next_due;
            self.emit_window(sys, end);
            self.next_due += self.cfg.sampling_interval;
        }
    }

    pub fn finalize(&mut self, sys: &MemorySystem) {
        let progressed = self
            .last
            .iter()
            .any(|(actor, prev)| sys.read_counters(*actor) != *prev);
        if sys.clock() > self.window_start && progressed {
            self.emit_window(sys, sys.clock());
        }
        for (actor, first) in self.initial.clone() {
            let total = sys.read_counters(actor).delta(&first);
            self.rows.push(MonitorRow {
                actor: sys.actor_name(actor).to_string(),
                window_start: 0,
                window_end: sys.clock(),
                scope: RowScope::WholeRun,
                sample: total,
                outcome: classify(&self.cfg, &total).ok(),
            });
        }
    }
}

/// Cumulative counter snapshot read back from a CSV trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceSample {
    pub actor: String,
    pub cycle: u64,
    pub counters: CounterSample,
}

pub const COUNTER_CSV_HEADER: &str =
    "actor,cycle,cache_references,cache_misses,itlb_ra,itlb_wa,instructions,cycles";

pub fn write_counter_csv<W: Write>(samples: &[TraceSample], mut w: W) -> io::Result<()> {
    writeln!(w, "{COUNTER_CSV_HEADER}")?;
    for s in samples {
        let c = &s.counters;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            s.actor,
            s.cycle,
            c.cache_references,
            c.cache_misses,
            c.itlb_ra,
            c.itlb_wa,
            c.instructions,
            c.cycles
        )?;
    }
    Ok(())
}

/// Parses the counter CSV produced by `write_counter_csv` (or by the CLI's
/// monitor runs). Snapshots are cumulative per actor, in time order. Lines
/// starting with `#` are preamble comments and ignored.
pub fn parse_counter_csv<R: BufRead>(r: R) -> Result<Vec<TraceSample>, DetectorError> {
    let mut out = Vec::new();
    let mut seen_header = false;
    for (idx, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !seen_header {
            if line != COUNTER_CSV_HEADER {
                return Err(DetectorError::Parse {
                    line: idx + 1,
                    reason: format!("expected header '{COUNTER_CSV_HEADER}'"),
                });
            }
            seen_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(DetectorError::Parse {
                line: idx + 1,
                reason: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let num = |pos: usize| -> Result<u64, DetectorError> {
            fields[pos].parse().map_err(|_| DetectorError::Parse {
                line: idx + 1,
                reason: format!("bad number '{}'", fields[pos]),
            })
        };
        out.push(TraceSample {
            actor: fields[0].to_string(),
            cycle: num(1)?,
            counters: CounterSample {
                cache_references: num(2)?,
                cache_misses: num(3)?,
                itlb_ra: num(4)?,
                itlb_wa: num(5)?,
                instructions: num(6)?,
                cycles: num(7)?,
            },
        });
    }
    Ok(out)
}

/// Classifies an offline counter trace: every consecutive snapshot pair per
/// actor becomes a window row, the last snapshot a whole-run row.
pub fn classify_trace(cfg: &DetectorConfig, samples: &[TraceSample]) -> Vec<MonitorRow> {
    let mut per_actor: BTreeMap<&str, Vec<&TraceSample>> = BTreeMap::new();
    for s in samples {
        per_actor.entry(&s.actor).or_default().push(s);
    }
    let mut rows = Vec::new();
    for (actor, snaps) in per_actor {
        let mut prev_counters = CounterSample::default();
        let mut prev_cycle = 0u64;
        for s in &snaps {
            let delta = s.counters.delta(&prev_counters);
            rows.push(MonitorRow {
                actor: actor.to_string(),
                window_start: prev_cycle,
                window_end: s.cycle,
                scope: RowScope::Window,
                sample: delta,
                outcome: classify(cfg, &delta).ok(),
            });
            prev_counters = s.counters;
            prev_cycle = s.cycle;
        }
        if let Some(last) = snaps.last() {
            rows.push(MonitorRow {
                actor: actor.to_string(),
                window_start: 0,
                window_end: last.cycle,
                scope: RowScope::WholeRun,
                sample: last.counters,
                outcome: classify(cfg, &last.counters).ok(),
            });
        }
    }
    rows
}

pub fn write_rows_csv<W: Write>(rows: &[MonitorRow], mut w: W) -> io::Result<()> {
    writeln!(
        w,
        "actor,scope,window_start,window_end,miss_ratio,ref_ratio,label"
    )?;
    for row in rows {
        let (m, r, label) = match &row.outcome {
            Some(c) => (
                format!("{:.6}", c.miss_ratio),
                format!("{:.6}", c.ref_ratio),
                c.label.as_str(),
            ),
            None => ("nan".to_string(), "nan".to_string(), "indeterminate"),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            row.actor,
            row.scope.as_str(),
            row.window_start,
            row.window_end,
            m,
            r,
            label
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CacheConfig;
    use crate::sched::{run_observed, Schedule, ScheduledActor, StopCondition};
    use crate::victims::{compute_step, streaming_step};

    fn sample(refs: u64, misses: u64, itlb: u64) -> CounterSample {
        CounterSample {
            cache_references: refs,
            cache_misses: misses,
            itlb_ra: itlb,
            ..CounterSample::default()
        }
    }

    #[test]
    fn default_thresholds_flag_heavy_ratios() {
        let cfg = DetectorConfig::default();
        let c = classify(&cfg, &sample(5140, 5138, 1000)).unwrap();
        assert_eq!(c.label, Label::Malicious);
        assert!((c.miss_ratio - 5.138).abs() < 1e-12);
        let c = classify(&cfg, &sample(200, 100, 1000)).unwrap();
        assert_eq!(c.label, Label::Benign);
    }

    #[test]
    fn threshold_boundary_is_inclusive() {
        let cfg = DetectorConfig::default();
        // Exactly k_m on misses, well under k_r on refs.
        let c = classify(&cfg, &sample(235, 235, 100)).unwrap();
        assert_eq!(c.label, Label::Malicious);
        // A hair under both.
        let c = classify(&cfg, &sample(233, 233, 100)).unwrap();
        assert_eq!(c.label, Label::Benign);
    }

    #[test]
    fn either_ratio_alone_triggers() {
        let cfg = DetectorConfig::default();
        let refs_only = classify(&cfg, &sample(10_000, 0, 1000)).unwrap();
        assert_eq!(refs_only.label, Label::Malicious);
        let misses_only = classify(&cfg, &sample(0, 10_000, 1000)).unwrap();
        assert_eq!(misses_only.label, Label::Malicious);
    }

    #[test]
    fn zero_itlb_is_an_error() {
        let cfg = DetectorConfig::default();
        assert!(matches!(
            classify(&cfg, &sample(10, 10, 0)),
            Err(DetectorError::ZeroItlb)
        ));
    }

    #[test]
    fn calibration_takes_midpoints() {
        let benign = [sample(100, 10, 1000), sample(200, 40, 1000)];
        let malicious = [sample(1000, 400, 1000), sample(1200, 500, 1000)];
        let cfg = calibrate_thresholds(&benign, &malicious, 50_000).unwrap();
        assert!((cfg.k_m - (0.04 + 0.4) / 2.0).abs() < 1e-12);
        assert!((cfg.k_r - (0.2 + 1.0) / 2.0).abs() < 1e-12);
        assert_eq!(cfg.sampling_interval, 50_000);
        for b in &benign {
            assert_eq!(classify(&cfg, b).unwrap().label, Label::Benign);
        }
        for m in &malicious {
            assert_eq!(classify(&cfg, m).unwrap().label, Label::Malicious);
        }
    }

    #[test]
    fn overlapping_ranges_refuse_to_calibrate() {
        let benign = [sample(900, 10, 1000)];
        let malicious = [sample(800, 400, 1000)];
        let err = calibrate_thresholds(&benign, &malicious, 1).unwrap_err();
        match err {
            DetectorError::ThresholdOverlap { metric, .. } => {
                assert_eq!(metric, "cache_references/itlb")
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn monitor_windows_cover_a_run() {
        let mut sys = MemorySystem::new(CacheConfig::default()).unwrap();
        let s = sys.register_actor("stream", 0, 16).unwrap();
        let c = sys.register_actor("compute", 1, 16).unwrap();
        let mut schedule = Schedule {
            actors: vec![
                ScheduledActor::new("stream", 1, streaming_step(s, 0x40_0000, 1 << 24)),
                ScheduledActor::new("compute", 1, compute_step(c)),
            ],
            stop: StopCondition::TimeLimit(200_000),
        };
        let det = DetectorConfig { sampling_interval: 20_000, ..DetectorConfig::default() };
        let mut monitor = Monitor::new(det, &sys, &[s, c]);
        run_observed(&mut sys, &mut schedule, |sys, _| monitor.poll(sys)).unwrap();
        monitor.finalize(&sys);
        let stream_windows: Vec<&MonitorRow> = monitor
            .rows
            .iter()
            .filter(|r| r.actor == "stream" && r.scope == RowScope::Window)
            .collect();
        assert!(stream_windows.len() >= 10, "got {}", stream_windows.len());
        // Windows tile the run without gaps.
        for pair in stream_windows.windows(2) {
            assert_eq!(pair[0].window_end, pair[1].window_start);
        }
        for r in &monitor.rows {
            let c = r.outcome.expect("both actors execute in every window");
            assert_eq!(c.label, Label::Benign, "{} misjudged: {c:?}", r.actor);
        }
        assert!(monitor.rows.iter().any(|r| r.scope == RowScope::WholeRun));
    }

    #[test]
    fn csv_roundtrip_and_trace_classification() {
        let samples = vec![
            TraceSample { actor: "spy".into(), cycle: 1000, counters: sample(5000, 2500, 1000) },
            TraceSample { actor: "spy".into(), cycle: 2000, counters: sample(9000, 5000, 2000) },
            TraceSample { actor: "ed".into(), cycle: 2000, counters: sample(30, 2, 4000) },
        ];
        let mut buf = Vec::new();
        write_counter_csv(&samples, &mut buf).unwrap();
        let back = parse_counter_csv(&buf[..]).unwrap();
        assert_eq!(back, samples);

        // Preamble comments above the header must not confuse the parser.
        let mut commented = b"# seed=7 preset=haswell\n".to_vec();
        commented.extend_from_slice(&buf);
        assert_eq!(parse_counter_csv(&commented[..]).unwrap(), samples);

        let rows = classify_trace(&DetectorConfig::default(), &back);
        // Two windows + one whole-run for spy, one + one for ed; sorted by actor.
        assert_eq!(rows.len(), 5);
        let spy_rows: Vec<&MonitorRow> = rows.iter().filter(|r| r.actor == "spy").collect();
        assert_eq!(spy_rows.len(), 3);
        // Second spy window is the delta: 4000 refs, 2500 misses, 1000 itlb.
        let w2 = &spy_rows[1];
        assert_eq!(w2.sample.cache_references, 4000);
        assert_eq!(w2.outcome.unwrap().label, Label::Malicious);
        let ed = rows.iter().find(|r| r.actor == "ed" && r.scope == RowScope::WholeRun).unwrap();
        assert_eq!(ed.outcome.unwrap().label, Label::Benign);

        let mut out = Vec::new();
        write_rows_csv(&rows, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("actor,scope,"));
        assert!(text.contains("malicious"));
    }

    #[test]
    fn bad_csv_is_rejected_with_line_numbers() {
        let bad = "actor,cycle,cache_references,cache_misses,itlb_ra,itlb_wa,instructions,cycles\nspy,12,3\n";
        match parse_counter_csv(bad.as_bytes()) {
            Err(DetectorError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_header = "who,what\n";
        assert!(matches!(
            parse_counter_csv(bad_header.as_bytes()),
            Err(DetectorError::Parse { line: 1, .. })
        ));
    }
}
