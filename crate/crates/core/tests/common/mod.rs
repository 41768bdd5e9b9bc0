//! Reference implementations shared by the integration tests. Everything
//! here is written against the documented contract, not against the crate's
//! internals, and uses deliberately different mechanics so a bug cannot hide
//! in both places at once.
#![allow(dead_code)] // each test binary pulls in the subset it needs

use std::collections::{BTreeSet, HashMap};

use cachechan::{CacheConfig, CounterSample, HitLevel};

/// Bit-serial long-division CRC-16/CCITT-FALSE: polynomial 0x1021, initial
/// value 0xFFFF, no reflection, no final xor. One message bit per step.
pub fn crc16_bitwise(data: &[u8]) -> u16 {
    let mut crc: u16 = 0xFFFF;
    for &byte in data {
        for bit in 0..8 {
            let in_bit = (byte >> (7 - bit)) & 1;
            let out_bit = (crc >> 15) as u8 & 1;
            crc <<= 1;
            if in_bit ^ out_bit == 1 {
                crc ^= 0x1021;
            }
        }
    }
    crc
}

/// One set-associative level as a flat line -> last-use-stamp map. Strict
/// LRU by scanning the whole map for the oldest stamp in the victim's set:
/// slow and obvious on purpose.
struct RefLevel {
    ways: usize,
    sets: u64,
    lines: HashMap<u64, u64>,
}

impl RefLevel {
    fn new(ways: usize, sets: usize) -> Self {
        RefLevel { ways, sets: sets as u64, lines: HashMap::new() }
    }

    fn set_of(&self, line: u64) -> u64 {
        line % self.sets
    }

    fn contains(&self, line: u64) -> bool {
        self.lines.contains_key(&line)
    }

    /// Refresh the stamp if present. True on hit.
    fn touch(&mut self, line: u64, stamp: u64) -> bool {
        match self.lines.get_mut(&line) {
            Some(s) => {
                *s = stamp;
                true
            }
            None => false,
        }
    }

    /// Touch-or-insert; a full set evicts its least recently stamped line
    /// first and reports it.
    fn insert(&mut self, line: u64, stamp: u64) -> Option<u64> {
        if self.touch(line, stamp) {
            return None;
        }
        let set = self.set_of(line);
        let mut evicted = None;
        let occupants: Vec<(u64, u64)> = self
            .lines
            .iter()
            .filter(|(l, _)| self.set_of(**l) == set)
            .map(|(l, s)| (*l, *s))
            .collect();
        if occupants.len() >= self.ways {
            let (victim, _) = occupants.iter().min_by_key(|(_, s)| *s).copied().unwrap();
            self.lines.remove(&victim);
            evicted = Some(victim);
        }
        self.lines.insert(line, stamp);
        evicted
    }

    fn remove(&mut self, line: u64) {
        self.lines.remove(&line);
    }
}

struct RefActor {
    core: usize,
    itlb_step: u64,
    counters: CounterSample,
}

/// Contract model of the simulated machine: per-core L1/L2, sliced shared
/// L3, inclusive hierarchy with back-invalidation, per-actor perf counters,
/// no jitter (drive it with jitter_bound 0 configs only).
pub struct RefMachine {
    cfg: CacheConfig,
    masks: Vec<u64>,
    l1: Vec<RefLevel>,
    l2: Vec<RefLevel>,
    l3: Vec<RefLevel>,
    actors: Vec<RefActor>,
    stamp: u64,
    /// Every line any operation ever named, for end-state sweeps.
    pub touched: BTreeSet<u64>,
}

impl RefMachine {
    pub fn new(cfg: &CacheConfig) -> Self {
        assert_eq!(cfg.jitter_bound, 0, "reference model is jitter-free");
        RefMachine {
            masks: cfg.slice_masks(),
            l1: (0..cfg.n_cores)
                .map(|_| RefLevel::new(cfg.levels[0].ways, cfg.levels[0].sets))
                .collect(),
            l2: (0..cfg.n_cores)
                .map(|_| RefLevel::new(cfg.levels[1].ways, cfg.levels[1].sets))
                .collect(),
            l3: (0..cfg.n_slices)
                .map(|_| RefLevel::new(cfg.levels[2].ways, cfg.levels[2].sets))
                .collect(),
            actors: Vec::new(),
            stamp: 0,
            touched: BTreeSet::new(),
            cfg: cfg.clone(),
        }
    }

    pub fn add_actor(&mut self, core: usize, itlb_step: u64) -> usize {
        self.actors.push(RefActor { core, itlb_step, counters: CounterSample::default() });
        self.actors.len() - 1
    }

    pub fn counters(&self, actor: usize) -> CounterSample {
        self.actors[actor].counters
    }

    fn line_of(&self, addr: u64) -> u64 {
        addr / self.cfg.line_size
    }

    fn slice_of_line(&self, line: u64) -> usize {
        let mut slice = 0usize;
        for (b, mask) in self.masks.iter().enumerate() {
            let parity = (line & mask).count_ones() & 1;
            slice |= (parity as usize) << b;
        }
        slice
    }

    fn next_stamp(&mut self) -> u64 {
        self.stamp += 1;
        self.stamp
    }

    /// Evicting from the shared level kills every private copy.
    fn back_invalidate(&mut self, victim: u64) {
        for core in 0..self.cfg.n_cores {
            self.l1[core].remove(victim);
            self.l2[core].remove(victim);
        }
    }

    /// Shared-level fill as seen from `core`: L3 first (with back-
    /// invalidation of its victim), then the private levels.
    fn fill(&mut self, core: usize, line: u64) {
        let slice = self.slice_of_line(line);
        let s = self.next_stamp();
        if let Some(victim) = self.l3[slice].insert(line, s) {
            self.back_invalidate(victim);
        }
        let s = self.next_stamp();
        self.l2[core].insert(line, s);
        let s = self.next_stamp();
        self.l1[core].insert(line, s);
    }

    fn prefetch(&mut self, core: usize, addr: u64, line: u64) {
        if !self.cfg.prefetch_next_line {
            return;
        }
        let next = line + 1;
        if (next * self.cfg.line_size) / self.cfg.page_size == addr / self.cfg.page_size {
            self.fill(core, next);
        }
    }

    fn charge(&mut self, actor: usize, instructions: u64, latency: u64) {
        let a = &mut self.actors[actor];
        a.counters.instructions += instructions;
        a.counters.itlb_ra += instructions * a.itlb_step;
        a.counters.cycles += latency;
    }

    pub fn access(&mut self, actor: usize, addr: u64) -> (HitLevel, u64, usize) {
        let line = self.line_of(addr);
        self.touched.insert(line);
        let core = self.actors[actor].core;
        let slice = self.slice_of_line(line);
        let lat = self.cfg.latencies;

        let s = self.next_stamp();
        let (level, latency) = if self.l1[core].touch(line, s) {
            (HitLevel::L1, lat.l1_hit)
        } else if self.l2[core].touch(line, s) {
            let s = self.next_stamp();
            self.l1[core].insert(line, s);
            (HitLevel::L2, lat.l2_hit)
        } else {
            self.actors[actor].counters.cache_references += 1;
            let remote = if slice == self.cfg.local_slice(core) {
                0
            } else {
                lat.l3_remote_penalty
            };
            if self.l3[slice].touch(line, s) {
                let s = self.next_stamp();
                self.l2[core].insert(line, s);
                let s = self.next_stamp();
                self.l1[core].insert(line, s);
                (HitLevel::L3, lat.l3_local_hit + remote)
            } else {
                self.actors[actor].counters.cache_misses += 1;
                self.fill(core, line);
                (HitLevel::Dram, lat.dram)
            }
        };

        self.charge(actor, 1, latency);
        self.prefetch(core, addr, line);
        (level, latency, slice)
    }

    pub fn flush(&mut self, actor: usize, addr: u64) -> (bool, u64, usize) {
        let line = self.line_of(addr);
        self.touched.insert(line);
        let core = self.actors[actor].core;
        let slice = self.slice_of_line(line);
        let lat = self.cfg.latencies;

        let was_cached = self.l3[slice].contains(line);
        self.l3[slice].remove(line);
        self.back_invalidate(line);

        let latency = if self.cfg.constant_time_flush {
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

        if was_cached {
            self.actors[actor].counters.cache_references += 1;
        }
        self.charge(actor, 1, latency);
        (was_cached, latency, slice)
    }

    pub fn tick(&mut self, actor: usize, n: u64) {
        self.charge(actor, n, n);
    }

    /// Highest level at which `core` would find `addr` right now.
    pub fn hit_level_seen_from(&self, core: usize, addr: u64) -> HitLevel {
        let line = self.line_of(addr);
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
}
