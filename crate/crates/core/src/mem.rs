//! Deterministic simulated memory system: per-core L1/L2, a shared sliced
//! inclusive L3 with strict LRU per set, per-actor event counters, and a
//! global cycle clock that advances by the latency of each operation.
//!
//! All state is owned by one `MemorySystem`; actors are lightweight handles.
//! No interior mutability, no threads: one operation at a time, fully
//! reproducible for a given config and seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::CacheConfig;

/// Handle for a registered actor. Only `register_actor` creates these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActorId(usize);

impl ActorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-actor event counters, modelled after a perf-style sample.
///
/// `cache_references` counts last-level-cache lookups (accesses that miss
/// L1/L2, plus flushes that found the line cached). `cache_misses` counts L3
/// lookup misses. `itlb_ra` accrues `itlb_events_per_step` per executed
/// operation and stands in for the actor's code-footprint pressure; `itlb_wa`
/// exists for trace ingestion and stays zero in simulation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CounterSample {
    pub cache_references: u64,
    pub cache_misses: u64,
    pub itlb_ra: u64,
    pub itlb_wa: u64,
    pub instructions: u64,
    pub cycles: u64,
}

impl CounterSample {
    /// Field-wise difference against an earlier snapshot of the same actor.
    pub fn delta(&self, earlier: &CounterSample) -> CounterSample {
        CounterSample {
            cache_references: self.cache_references.saturating_sub(earlier.cache_references),
            cache_misses: self.cache_misses.saturating_sub(earlier.cache_misses),
            itlb_ra: self.itlb_ra.saturating_sub(earlier.itlb_ra),
            itlb_wa: self.itlb_wa.saturating_sub(earlier.itlb_wa),
            instructions: self.instructions.saturating_sub(earlier.instructions),
            cycles: self.cycles.saturating_sub(earlier.cycles),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitLevel {
    L1,
    L2,
    L3,
    Dram,
}

impl HitLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            HitLevel::L1 => "l1",
            HitLevel::L2 => "l2",
            HitLevel::L3 => "l3",
            HitLevel::Dram => "dram",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AccessOutcome {
    pub latency: u64,
    pub hit_level: HitLevel,
    pub slice: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct FlushOutcome {
    pub latency: u64,
    /// Whether the line was present anywhere in the hierarchy (equivalently
    /// in L3, by inclusiveness) before this flush removed it.
    pub was_cached: bool,
    pub slice: usize,
}

#[derive(Debug, Error)]
pub enum MemError {
    #[error("address {addr:#x} outside simulated space of {space:#x} bytes")]
    AddressOutOfRange { addr: u64, space: u64 },
    #[error("core {core} out of range (n_cores = {n_cores})")]
    BadCore { core: usize, n_cores: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceOp {
    Access,
    Flush,
    Tick,
}

impl TraceOp {
    pub fn as_str(self) -> &'static str {
        match self {
            TraceOp::Access => "access",
            TraceOp::Flush => "flush",
            TraceOp::Tick => "tick",
        }
    }
}

/// One scheduled operation, recorded when tracing is enabled. For `Tick`,
/// `addr` holds the instruction count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    /// Global clock before the operation ran.
    pub cycle: u64,
    pub actor: usize,
    pub op: TraceOp,
    pub addr: u64,
    pub latency: u64,
}

struct Actor {
    name: String,
    core: usize,
    itlb_events_per_step: u64,
    counters: CounterSample,
}

/// One cache level's worth of sets. Lines are stored MRU-first; strict LRU
/// eviction is "pop the back".
struct CacheLevel {
    ways: usize,
    set_mask: u64,
    sets: Vec<Vec<u64>>,
}

impl CacheLevel {
    fn new(ways: usize, n_sets: usize) -> Self {
        CacheLevel {
            ways,
            set_mask: n_sets as u64 - 1,
            sets: vec![Vec::new(); n_sets],
        }
    }

    fn set_of(&self, line: u64) -> usize {
        (line & self.set_mask) as usize
    }

    fn contains(&self, line: u64) -> bool {
        self.sets[self.set_of(line)].contains(&line)
    }

    /// Lookup with LRU update. True on hit.
    fn promote(&mut self, line: u64) -> bool {
        let set_idx = self.set_of(line);
        let set = &mut self.sets[set_idx];
        match set.iter().position(|&l| l == line) {
            Some(i) => {
                set.remove(i);
                set.insert(0, line);
                true
            }
            None => false,
        }
    }

    /// Insert as MRU (promoting if already present). Returns the evicted
    /// line, if the set overflowed.
    fn insert(&mut self, line: u64) -> Option<u64> {
        let ways = self.ways;
        let set_idx = self.set_of(line);
        let set = &mut self.sets[set_idx];
        if let Some(i) = set.iter().position(|&l| l == line) {
            set.remove(i);
            set.insert(0, line);
            return None;
        }
        set.insert(0, line);
        if set.len() > ways {
            set.pop()
        } else {
            None
        }
    }

    fn remove(&mut self, line: u64) {
        let set_idx = self.set_of(line);
        let set = &mut self.sets[set_idx];
        if let Some(i) = set.iter().position(|&l| l == line) {
            set.remove(i);
        }
    }
}

pub struct MemorySystem {
    cfg: CacheConfig,
    slice_masks: Vec<u64>,
    l1: Vec<CacheLevel>,
    l2: Vec<CacheLevel>,
    l3: Vec<CacheLevel>,
    actors: Vec<Actor>,
    clock: u64,
    rng: ChaCha8Rng,
    trace: Option<Vec<TraceRecord>>,
}

impl MemorySystem {
    pub fn new(cfg: CacheConfig) -> Result<Self, crate::config::ConfigError> {
        cfg.validate()?;
        let l1 = (0..cfg.n_cores)
            .map(|_| CacheLevel::new(cfg.levels[0].ways, cfg.levels[0].sets))
            .collect();
        let l2 = (0..cfg.n_cores)
            .map(|_| CacheLevel::new(cfg.levels[1].ways, cfg.levels[1].sets))
            .collect();
        let l3 = (0..cfg.n_slices)
            .map(|_| CacheLevel::new(cfg.levels[2].ways, cfg.levels[2].sets))
            .collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(MemorySystem {
            slice_masks: cfg.slice_masks(),
            l1,
            l2,
            l3,
            actors: Vec::new(),
            clock: 0,
            rng,
            trace: None,
            cfg,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.cfg
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    /// `itlb_events_per_step` is this actor's configured code-footprint
    /// pressure: how many iTLB read events accrue per executed operation.
    pub fn register_actor(
        &mut self,
        name: &str,
        core: usize,
        itlb_events_per_step: u64,
    ) -> Result<ActorId, MemError> {
        if core >= self.cfg.n_cores {
            return Err(MemError::BadCore { core, n_cores: self.cfg.n_cores });
        }
        self.actors.push(Actor {
            name: name.to_string(),
            core,
            itlb_events_per_step,
            counters: CounterSample::default(),
        });
        Ok(ActorId(self.actors.len() - 1))
    }

    pub fn actor_name(&self, actor: ActorId) -> &str {
        &self.actors[actor.0].name
    }

    pub fn actor_core(&self, actor: ActorId) -> usize {
        self.actors[actor.0].core
    }

    pub fn set_actor_core(&mut self, actor: ActorId, core: usize) -> Result<(), MemError> {
        if core >= self.cfg.n_cores {
            return Err(MemError::BadCore { core, n_cores: self.cfg.n_cores });
        }
        self.actors[actor.0].core = core;
        Ok(())
    }

    pub fn read_counters(&self, actor: ActorId) -> CounterSample {
        self.actors[actor.0].counters
    }

    pub fn slice_of(&self, addr: u64) -> usize {
        self.slice_of_line(self.cfg.line_of(addr))
    }

    fn slice_of_line(&self, line: u64) -> usize {
        let mut slice = 0usize;
        for (b, mask) in self.slice_masks.iter().enumerate() {
            slice |= (((line & mask).count_ones() & 1) as usize) << b;
        }
        slice
    }

    fn check_addr(&self, addr: u64) -> Result<(), MemError> {
        if addr >= self.cfg.addr_space {
            Err(MemError::AddressOutOfRange { addr, space: self.cfg.addr_space })
        } else {
            Ok(())
        }
    }

    fn jitter(&mut self) -> u64 {
        if self.cfg.jitter_bound == 0 {
            0
        } else {
            self.rng.gen_range(0..=self.cfg.jitter_bound)
        }
    }

    /// Fill a line into L3/L2/L1 as seen from `core`, with back-invalidation
    /// on L3 eviction, touching no counters and no clock.
    fn quiet_fill(&mut self, core: usize, line: u64) {
        let slice = self.slice_of_line(line);
        if let Some(victim) = self.l3[slice].insert(line) {
            self.back_invalidate(victim);
        }
        self.l2[core].insert(line);
        self.l1[core].insert(line);
    }

    /// Inclusive-hierarchy rule: a line evicted from L3 may survive nowhere.
    fn back_invalidate(&mut self, line: u64) {
        for core in 0..self.cfg.n_cores {
            self.l1[core].remove(line);
            self.l2[core].remove(line);
        }
    }

    fn record(&mut self, actor: usize, op: TraceOp, addr: u64, cycle: u64, latency: u64) {
        if let Some(t) = self.trace.as_mut() {
            t.push(TraceRecord { cycle, actor, op, addr, latency });
        }
    }

    pub fn access(&mut self, actor: ActorId, addr: u64) -> Result<AccessOutcome, MemError> {
        self.check_addr(addr)?;
        let line = self.cfg.line_of(addr);
        let core = self.actors[actor.0].core;
        let slice = self.slice_of_line(line);
        let lat = self.cfg.latencies;

        let (hit_level, base) = if self.l1[core].promote(line) {
            (HitLevel::L1, lat.l1_hit)
        } else if self.l2[core].promote(line) {
            self.l1[core].insert(line);
            (HitLevel::L2, lat.l2_hit)
        } else {
            // The lookup reaches the shared level: one reference.
            self.actors[actor.0].counters.cache_references += 1;
            let remote = if slice == self.cfg.local_slice(core) {
                0
            } else {
                lat.l3_remote_penalty
            };
            if self.l3[slice].promote(line) {
                self.l2[core].insert(line);
                self.l1[core].insert(line);
                (HitLevel::L3, lat.l3_local_hit + remote)
            } else {
                self.actors[actor.0].counters.cache_misses += 1;
                if let Some(victim) = self.l3[slice].insert(line) {
                    self.back_invalidate(victim);
                }
                self.l2[core].insert(line);
                self.l1[core].insert(line);
                (HitLevel::Dram, lat.dram)
            }
        };

        let latency = base + self.jitter();
        let step = self.actors[actor.0].itlb_events_per_step;
        let c = &mut self.actors[actor.0].counters;
        c.instructions += 1;
        c.itlb_ra += step;
        c.cycles += latency;
        let start = self.clock;
        self.clock += latency;
        self.record(actor.0, TraceOp::Access, addr, start, latency);

        if self.cfg.prefetch_next_line {
            let next = line + 1;
            if self.cfg.page_of(next << self.cfg.line_bits()) == self.cfg.page_of(addr) {
                self.quiet_fill(core, next);
            }
        }

        Ok(AccessOutcome { latency, hit_level, slice })
    }

    pub fn flush(&mut self, actor: ActorId, addr: u64) -> Result<FlushOutcome, MemError> {
        self.check_addr(addr)?;
        let line = self.cfg.line_of(addr);
        let core = self.actors[actor.0].core;
        let slice = self.slice_of_line(line);
        let lat = self.cfg.latencies;

        // Inclusiveness makes the L3 lookup authoritative for "was cached
        // anywhere"; the removal sweep below keeps that invariant honest.
        let was_cached = self.l3[slice].contains(line);
        self.l3[slice].remove(line);
        for c in 0..self.cfg.n_cores {
            self.l1[c].remove(line);
            self.l2[c].remove(line);
        }

        let base = if self.cfg.constant_time_flush {
            lat.flush_miss
        } else if was_cached {
            let remote = if slice == self.cfg.local_slice(core) {
                0
            } else {
                lat.flush_remote_penalty
            };
            lat.flush_miss + lat.flush_hit_delta + remote
        } else {
            lat.flush_miss
        };

        let latency = base + self.jitter();
        let step = self.actors[actor.0].itlb_events_per_step;
        let c = &mut self.actors[actor.0].counters;
        if was_cached {
            c.cache_references += 1;
        }
        c.instructions += 1;
        c.itlb_ra += step;
        c.cycles += latency;
        let start = self.clock;
        self.clock += latency;
        self.record(actor.0, TraceOp::Flush, addr, start, latency);

        Ok(FlushOutcome { latency, was_cached, slice })
    }

    /// Run `n` instructions that touch no cache lines: models computation,
    /// protocol framing, or any other non-memory work. One cycle each.
    pub fn tick(&mut self, actor: ActorId, n: u64) {
        let step = self.actors[actor.0].itlb_events_per_step;
        let c = &mut self.actors[actor.0].counters;
        c.instructions += n;
        c.itlb_ra += n * step;
        c.cycles += n;
        let start = self.clock;
        self.clock += n;
        self.record(actor.0, TraceOp::Tick, n, start, n);
    }

    /// Non-mutating: is the line cached anywhere (i.e. present in L3)?
    pub fn peek_cached(&self, addr: u64) -> bool {
        let line = self.cfg.line_of(addr);
        self.l3[self.slice_of_line(line)].contains(line)
    }

    /// Non-mutating: the level an access from `core` would hit right now.
    pub fn peek_hit_level(&self, core: usize, addr: u64) -> HitLevel {
        let line = self.cfg.line_of(addr);
        if self.l1[core].contains(line) {
            HitLevel::L1
        } else if self.l2[core].contains(line) {
            HitLevel::L2
        } else if self.l3[self.slice_of_line(line)].contains(line) {
            HitLevel::L3
        } else {
            HitLevel::Dram
        }
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.replace(Vec::new()).unwrap_or_default()
    }

    /// Replays one recorded operation against this system. Used to verify
    /// that a trace reproduces the run it was captured from.
    pub fn apply_record(&mut self, rec: &TraceRecord) -> Result<u64, MemError> {
        let actor = ActorId(rec.actor);
        match rec.op {
            TraceOp::Access => Ok(self.access(actor, rec.addr)?.latency),
            TraceOp::Flush => Ok(self.flush(actor, rec.addr)?.latency),
            TraceOp::Tick => {
                self.tick(actor, rec.addr);
                Ok(rec.addr)
            }
        }
    }

    /// Checks the inclusive-hierarchy invariant: every L1/L2 line is in L3.
    pub fn audit_inclusive(&self) -> Result<(), String> {
        for core in 0..self.cfg.n_cores {
            for (lvl_name, lvl) in [("l1", &self.l1[core]), ("l2", &self.l2[core])] {
                for set in &lvl.sets {
                    for &line in set {
                        if !self.l3[self.slice_of_line(line)].contains(line) {
                            return Err(format!(
                                "{lvl_name} core {core} holds line {line:#x} absent from L3"
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Deterministic text snapshot of clock, counters, and cache contents.
    /// Two equal dumps mean two equal simulator states.
    pub fn dump_state(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "clock={}", self.clock);
        for (i, a) in self.actors.iter().enumerate() {
            let c = a.counters;
            let _ = writeln!(
                out,
                "actor={} name={} core={} refs={} misses={} itlb_ra={} itlb_wa={} instr={} cycles={}",
                i, a.name, a.core, c.cache_references, c.cache_misses, c.itlb_ra, c.itlb_wa,
                c.instructions, c.cycles
            );
        }
        let mut dump_level = |label: String, lvl: &CacheLevel| {
            for (si, set) in lvl.sets.iter().enumerate() {
                if set.is_empty() {
                    continue;
                }
                let lines: Vec<String> = set.iter().map(|l| format!("{l:x}")).collect();
                let _ = writeln!(out, "{label} set={si}: {}", lines.join(" "));
            }
        };
        for (s, lvl) in self.l3.iter().enumerate() {
            dump_level(format!("l3 slice={s}"), lvl);
        }
        for core in 0..self.cfg.n_cores {
            dump_level(format!("core={core} l1"), &self.l1[core]);
            dump_level(format!("core={core} l2"), &self.l2[core]);
        }
        out
    }

    /// Occupancy of one L3 congruence class, for diagnostics: lines MRU-first.
    pub fn l3_set_contents(&self, slice: usize, set: usize) -> Vec<u64> {
        self.l3[slice].sets[set].clone()
    }

    /// Per-actor counter table keyed by actor name, for reports.
    pub fn counters_by_name(&self) -> BTreeMap<String, CounterSample> {
        self.actors
            .iter()
            .map(|a| (a.name.clone(), a.counters))
            .collect()
    }

    pub fn actor_ids(&self) -> Vec<ActorId> {
        (0..self.actors.len()).map(ActorId).collect()
    }
}

/// Writes a recorded trace as CSV with a stable column order.
pub fn write_trace_csv<W: std::io::Write>(
    sys: &MemorySystem,
    trace: &[TraceRecord],
    mut w: W,
) -> std::io::Result<()> {
    writeln!(w, "cycle,actor,op,addr,latency")?;
    for r in trace {
        writeln!(
            w,
            "{},{},{},{:#x},{}",
            r.cycle,
            sys.actors[r.actor].name,
            r.op.as_str(),
            r.addr,
            r.latency
        )?;
    }
    Ok(())
}
