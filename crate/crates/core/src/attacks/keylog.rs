//! Keystroke spying: probe the handler's hot lines in a loop and report a
//! keystroke on each idle-to-active edge. With several hot lines a majority
//! vote across them filters out unrelated touches of a single line.

use super::AttackError;
use crate::mem::{ActorId, MemorySystem};
use crate::probes::{
    calibrate_access_timing, calibrate_flush_timing, build_eviction_set, calibrate_set_timing,
    ff_probe, fr_probe, pp_prime, pp_probe, PrimedSet, SimBackend, Technique, Threshold, Verdict,
};
use crate::sched::StepStatus;
use std::ops::Range;

pub struct KeylogOptions {
    /// Probe rounds to skip after a detection before the edge detector
    /// re-arms; rides out handler activity that spans a round boundary.
    pub debounce_rounds: u32,
}

impl Default for KeylogOptions {
    fn default() -> Self {
        KeylogOptions { debounce_rounds: 1 }
    }
}

enum SpyProbe {
    Ff { addrs: Vec<u64>, thr: Threshold },
    Fr { addrs: Vec<u64>, thr: Threshold },
    Pp { sets: Vec<PrimedSet>, thr: Threshold },
}

/// Probe loop state. Drive `step` from the scheduler; detections accumulate
/// as clock timestamps.
pub struct KeystrokeSpy {
    pub actor: ActorId,
    probe: SpyProbe,
    opts: KeylogOptions,
    was_active: bool,
    debounce_left: u32,
    pub detections: Vec<u64>,
    pub round_clocks: Vec<u64>,
    pub probes: u64,
}

impl KeystrokeSpy {
    /// Calibrates per-technique probe state for the watched addresses.
    /// Calibration traffic runs as `cal` to keep the spy's counters clean.
    pub fn new(
        sys: &mut MemorySystem,
        actor: ActorId,
        cal: ActorId,
        technique: Technique,
        addrs: &[u64],
        calibration_rounds: u32,
        pp_region: Range<u64>,
        opts: KeylogOptions,
    ) -> Result<Self, AttackError> {
        assert!(!addrs.is_empty());
        let mut b = SimBackend::new(sys, cal);
        let probe = match technique {
            Technique::Ff => SpyProbe::Ff {
                addrs: addrs.to_vec(),
                thr: calibrate_flush_timing(&mut b, addrs[0], calibration_rounds)?,
            },
            Technique::Fr => SpyProbe::Fr {
                addrs: addrs.to_vec(),
                thr: calibrate_access_timing(&mut b, addrs[0], calibration_rounds)?,
            },
            Technique::Pp => {
                let cfg = b.sys.config().clone();
                let mut cursor = pp_region.start;
                let mut sets = Vec::with_capacity(addrs.len());
                for &a in addrs {
                    let set = build_eviction_set(&cfg, pp_region.clone(), &mut cursor, a)?;
                    sets.push(PrimedSet::new(set));
                }
                let thr = calibrate_set_timing(&mut b, &mut sets[0], addrs[0], calibration_rounds)?;
                for ps in sets.iter_mut().skip(1) {
                    pp_prime(&mut b, ps)?;
                }
                SpyProbe::Pp { sets, thr }
            }
        };
        Ok(KeystrokeSpy {
            actor,
            probe,
            opts,
            was_active: false,
            debounce_left: 0,
            detections: Vec::new(),
            round_clocks: Vec::new(),
            probes: 0,
        })
    }

    pub fn n_addresses(&self) -> usize {
        match &self.probe {
            SpyProbe::Ff { addrs, .. } | SpyProbe::Fr { addrs, .. } => addrs.len(),
            SpyProbe::Pp { sets, .. } => sets.len(),
        }
    }

    /// One probe round over every watched line, then edge detection on the
    /// majority verdict.
    pub fn step(&mut self, sys: &mut MemorySystem) -> Result<StepStatus, AttackError> {
        let now = sys.clock();
        let mut b = SimBackend::new(sys, self.actor);
        let mut votes = 0usize;
        let total;
        match &mut self.probe {
            SpyProbe::Ff { addrs, thr } => {
                total = addrs.len();
                for &a in addrs.iter() {
                    if ff_probe(&mut b, a, thr)?.verdict == Verdict::VictimActive {
                        votes += 1;
                    }
                }
            }
            SpyProbe::Fr { addrs, thr } => {
                total = addrs.len();
                for &a in addrs.iter() {
                    if fr_probe(&mut b, a, thr)?.verdict == Verdict::VictimActive {
                        votes += 1;
                    }
                }
            }
            SpyProbe::Pp { sets, thr } => {
                total = sets.len();
                for ps in sets.iter_mut() {
                    if pp_probe(&mut b, ps, thr)?.verdict == Verdict::VictimActive {
                        votes += 1;
                    }
                }
            }
        }
        self.probes += total as u64;
        let active = 2 * votes > total;
        if self.debounce_left > 0 {
            self.debounce_left -= 1;
        } else if active && !self.was_active {
            self.detections.push(now);
            self.debounce_left = self.opts.debounce_rounds;
        }
        self.was_active = active;
        self.round_clocks.push(now);
        Ok(StepStatus::Ready)
    }

    /// A detection window wide enough for an event to surface: an event can
    /// land just after a probe and be seen one round later, plus debounce.
    pub fn match_window(&self) -> u64 {
        let max_gap = self
            .round_clocks
            .windows(2)
            .map(|w| w[1] - w[0])
            .max()
            .unwrap_or(1);
        (self.opts.debounce_rounds as u64 + 2) * max_gap
    }
}

/// Greedy in-order matching of ground-truth events to detections within
/// `window` cycles after each event.
pub fn match_events(truth: &[u64], detections: &[u64], window: u64) -> (u64, u64, u64) {
    let mut matched = 0u64;
    let mut i = 0usize;
    let mut j = 0usize;
    while i < truth.len() && j < detections.len() {
        if detections[j] < truth[i] {
            j += 1;
        } else if detections[j] <= truth[i] + window {
            matched += 1;
            i += 1;
            j += 1;
        } else {
            i += 1;
        }
    }
    let false_positives = detections.len() as u64 - matched;
    let missed = truth.len() as u64 - matched;
    (matched, false_positives, missed)
}

#[derive(Debug, Clone)]
pub struct KeylogReport {
    pub technique: Technique,
    pub n_addresses: usize,
    pub events: u64,
    pub matched: u64,
    pub false_positives: u64,
    pub missed: u64,
    /// Matched events net of false positives, over total events; floors at
    /// zero when spurious detections swamp the signal.
    pub accuracy: f64,
    pub probes: u64,
    pub rounds: u64,
}

pub fn score_spy(technique: Technique, spy: &KeystrokeSpy, truth: &[u64]) -> KeylogReport {
    let (matched, false_positives, missed) =
        match_events(truth, &spy.detections, spy.match_window());
    let accuracy = if truth.is_empty() {
        0.0
    } else {
        matched.saturating_sub(false_positives) as f64 / truth.len() as f64
    };
    KeylogReport {
        technique,
        n_addresses: spy.n_addresses(),
        events: truth.len() as u64,
        matched,
        false_positives,
        missed,
        accuracy,
        probes: spy.probes,
        rounds: spy.round_clocks.len() as u64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CacheConfig;
    use crate::victims::KeystrokeVictim;

    #[test]
    fn matching_pairs_events_in_order() {
        let truth = [100, 200, 300];
        let detections = [110, 210, 290, 310, 500];
        let (matched, fp, missed) = match_events(&truth, &detections, 50);
        // 290 precedes 300 and cannot match it; 310 does.
        assert_eq!((matched, fp, missed), (3, 2, 0));
        let (matched, fp, missed) = match_events(&truth, &[], 50);
        assert_eq!((matched, fp, missed), (0, 0, 3));
        let (matched, fp, missed) = match_events(&[], &detections, 50);
        assert_eq!((matched, fp, missed), (0, 5, 0));
    }

    #[test]
    fn ff_spy_sees_every_keystroke() {
        let mut sys = MemorySystem::new(CacheConfig::default()).unwrap();
        let spy_actor = sys.register_actor("spy", 0, 1).unwrap();
        let cal = sys.register_actor("cal", 0, 1).unwrap();
        let vic = sys.register_actor("victim", 1, 4).unwrap();
        let addrs = vec![0x8000u64];
        let mut victim = KeystrokeVictim::with_random_schedule(
            vic,
            addrs.clone(),
            20,
            5_000..=10_000,
            0.0,
            1_000_000,
            42,
        );
        let mut spy = KeystrokeSpy::new(
            &mut sys,
            spy_actor,
            cal,
            Technique::Ff,
            &addrs,
            150,
            0..0,
            KeylogOptions::default(),
        )
        .unwrap();
        loop {
            if victim.step(&mut sys).unwrap() == StepStatus::Done {
                break;
            }
            spy.step(&mut sys).unwrap();
        }
        let report = score_spy(Technique::Ff, &spy, &victim.truth);
        assert_eq!(report.matched, 20, "{report:?}");
        assert_eq!(report.false_positives, 0);
        assert!((report.accuracy - 1.0).abs() < 1e-12);
        // The spy never loads the watched line: flush probes miss the cache
        // entirely except when the victim armed them.
        assert_eq!(sys.read_counters(spy_actor).cache_misses, 0);
    }

    #[test]
    fn majority_vote_needs_more_than_half() {
        // Three addresses, one touched: a single vote must not trigger.
        let mut sys = MemorySystem::new(CacheConfig::default()).unwrap();
        let spy_actor = sys.register_actor("spy", 0, 1).unwrap();
        let cal = sys.register_actor("cal", 0, 1).unwrap();
        let toucher = sys.register_actor("toucher", 1, 4).unwrap();
        let addrs = vec![0x8000u64, 0x9000, 0xa000];
        let mut spy = KeystrokeSpy::new(
            &mut sys,
            spy_actor,
            cal,
            Technique::Ff,
            &addrs,
            150,
            0..0,
            KeylogOptions::default(),
        )
        .unwrap();
        spy.step(&mut sys).unwrap();
        sys.access(toucher, addrs[1]).unwrap();
        spy.step(&mut sys).unwrap();
        assert!(spy.detections.is_empty());
        // All three touched: majority reached, one detection, then debounced.
        for &a in &addrs {
            sys.access(toucher, a).unwrap();
        }
        spy.step(&mut sys).unwrap();
        assert_eq!(spy.detections.len(), 1);
    }
}
