//! Simulated victims: a table-driven block cipher whose first-round lookups
//! leak key material through the cache, a keystroke handler with hot lines
//! and occasional unrelated touches, and a battery of benign workloads for
//! detector calibration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::mem::{ActorId, MemError, MemorySystem};
use crate::sched::{step_err, SchedError, StepStatus};

/// Four 1 KiB lookup tables of 256 four-byte entries each, packed
/// contiguously. With 64-byte lines that is 16 entries per line and 16
/// lines per table.
pub const TABLE_BYTES: u64 = 1024;
pub const N_TABLES: usize = 4;
pub const ENTRY_BYTES: u64 = 4;

/// First-round table lookups: byte `i` of the plaintext indexes table
/// `i mod 4` at `plaintext[i] ^ key[i]`. The accessed line depends only on
/// the upper nibble of that index, which is what a line-granular probe can
/// recover. `full_rounds` adds 36 uniformly random table touches per
/// encryption, modelling the remaining rounds' noise.
pub struct AesTTableVictim {
    pub actor: ActorId,
    pub table_base: u64,
    pub full_rounds: bool,
    /// Non-memory work per encryption (key schedule, rounds arithmetic).
    pub compute_ticks: u64,
    key: [u8; 16],
    rng: ChaCha8Rng,
}

impl AesTTableVictim {
    pub fn new(actor: ActorId, table_base: u64, key: [u8; 16], full_rounds: bool, seed: u64) -> Self {
        assert_eq!(table_base % 64, 0, "tables must be line-aligned");
        AesTTableVictim {
            actor,
            table_base,
            full_rounds,
            compute_ticks: 64,
            key,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn key(&self) -> [u8; 16] {
        self.key
    }

    /// Upper nibble of every key byte: the part first-round probing can see.
    pub fn key_upper_nibbles(&self) -> [u8; 16] {
        let mut out = [0u8; 16];
        for (o, k) in out.iter_mut().zip(&self.key) {
            *o = k >> 4;
        }
        out
    }

    fn entry_addr(&self, table: usize, index: u8) -> u64 {
        self.table_base + table as u64 * TABLE_BYTES + index as u64 * ENTRY_BYTES
    }

    /// Line-aligned address of `line` (0..16) within a table: what a prober
    /// monitors.
    pub fn table_line(&self, table: usize, line: u64) -> u64 {
        assert!(table < N_TABLES && line < 16);
        self.table_base + table as u64 * TABLE_BYTES + line * 64
    }

    /// One encryption's worth of memory behaviour.
    pub fn encrypt(&mut self, sys: &mut MemorySystem, plaintext: &[u8; 16]) -> Result<(), MemError> {
        for i in 0..16 {
            let index = plaintext[i] ^ self.key[i];
            sys.access(self.actor, self.entry_addr(i % 4, index))?;
        }
        if self.full_rounds {
            for _ in 0..36 {
                let t = self.rng.gen_range(0..N_TABLES);
                let idx: u8 = self.rng.r#gen();
                sys.access(self.actor, self.entry_addr(t, idx))?;
            }
        }
        sys.tick(self.actor, self.compute_ticks);
        Ok(())
    }
}

/// Line-aligned addresses of the 16 first-round lookups for a plaintext:
/// ground truth for probing experiments.
pub fn aes_first_round_lines(victim: &AesTTableVictim, plaintext: &[u8; 16]) -> [u64; 16] {
    let mut out = [0u64; 16];
    for i in 0..16 {
        let index = plaintext[i] ^ victim.key()[i];
        let addr = victim.table_base + (i % 4) as u64 * TABLE_BYTES + index as u64 * ENTRY_BYTES;
        out[i] = addr & !63;
    }
    out
}

enum KeyEventKind {
    /// A keystroke: the handler touches every hot address.
    Key,
    /// Unrelated activity touching one hot address; a source of false
    /// positives for a single-line spy.
    Spurious(usize),
}

/// Event-driven victim: sleeps (ticking) until the next scheduled event is
/// due, then performs its accesses. Keystroke times and per-address spurious
/// touches are generated up front from a seed, so a run is reproducible.
pub struct KeystrokeVictim {
    pub actor: ActorId,
    pub hot_addresses: Vec<u64>,
    /// Cycle offsets (from the first step) paired with what happens.
    events: Vec<(u64, KeyEventKind)>,
    next: usize,
    start: Option<u64>,
    pub duration: u64,
    /// Clock timestamps at which keystrokes actually ran.
    pub truth: Vec<u64>,
    /// Instruction cost of the handler around each keystroke.
    pub handler_ticks: u64,
}

impl KeystrokeVictim {
    /// `n_events` keystrokes separated by uniform gaps from `gap_cycles`,
    /// plus Poisson spurious touches at `spurious_per_sec` per address
    /// (converted through `cycles_per_second`).
    pub fn with_random_schedule(
        actor: ActorId,
        hot_addresses: Vec<u64>,
        n_events: usize,
        gap_cycles: std::ops::RangeInclusive<u64>,
        spurious_per_sec: f64,
        cycles_per_second: u64,
        seed: u64,
    ) -> Self {
        assert!(
            (1..=3).contains(&hot_addresses.len()),
            "keystroke victims watch 1 to 3 hot addresses"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut events: Vec<(u64, KeyEventKind)> = Vec::new();
        let mut t = 0u64;
        for _ in 0..n_events {
            t += rng.gen_range(gap_cycles.clone());
            events.push((t, KeyEventKind::Key));
        }
        let duration = t + (gap_cycles.start() + gap_cycles.end()) / 2;
        if spurious_per_sec > 0.0 {
            let mean_gap = cycles_per_second as f64 / spurious_per_sec;
            for (i, _) in hot_addresses.iter().enumerate() {
                let mut s = 0f64;
                loop {
                    let u: f64 = rng.r#gen::<f64>().max(1e-12);
                    s += -u.ln() * mean_gap;
                    if s >= duration as f64 {
                        break;
                    }
                    events.push((s as u64, KeyEventKind::Spurious(i)));
                }
            }
        }
        events.sort_by_key(|(t, k)| (*t, matches!(k, KeyEventKind::Spurious(_)) as u8));
        KeystrokeVictim {
            actor,
            hot_addresses,
            events,
            next: 0,
            start: None,
            duration,
            truth: Vec::new(),
            handler_ticks: 8,
        }
    }

    pub fn step(&mut self, sys: &mut MemorySystem) -> Result<StepStatus, MemError> {
        let start = *self.start.get_or_insert_with(|| sys.clock());
        let elapsed = sys.clock() - start;
        while self.next < self.events.len() && self.events[self.next].0 <= elapsed {
            match self.events[self.next].1 {
                KeyEventKind::Key => {
                    self.truth.push(sys.clock());
                    for i in 0..self.hot_addresses.len() {
                        sys.access(self.actor, self.hot_addresses[i])?;
                    }
                    sys.tick(self.actor, self.handler_ticks);
                }
                KeyEventKind::Spurious(i) => {
                    sys.access(self.actor, self.hot_addresses[i])?;
                }
            }
            self.next += 1;
        }
        if self.next >= self.events.len() && elapsed >= self.duration {
            return Ok(StepStatus::Done);
        }
        sys.tick(self.actor, 1);
        Ok(StepStatus::Ready)
    }
}

/// Drives the victim alone until its schedule is exhausted; returns the
/// keystroke ground truth. Spy scenarios interleave `step` via the
/// scheduler instead.
pub fn run_keystrokes(
    sys: &mut MemorySystem,
    victim: &mut KeystrokeVictim,
) -> Result<Vec<u64>, MemError> {
    while victim.step(sys)? == StepStatus::Ready {}
    Ok(victim.truth.clone())
}

/// Benign battery: an idle process that barely executes.
pub fn idle_step(actor: ActorId) -> impl FnMut(&mut MemorySystem) -> Result<StepStatus, SchedError> {
    move |sys| {
        sys.tick(actor, 1);
        Ok(StepStatus::Ready)
    }
}

/// Benign battery: sequential 4-byte-stride reads over a buffer much larger
/// than the cache. Touches each line 16 times, missing once: high bandwidth,
/// low miss rate per instruction.
pub fn streaming_step(
    actor: ActorId,
    base: u64,
    len: u64,
) -> impl FnMut(&mut MemorySystem) -> Result<StepStatus, SchedError> {
    let mut off = 0u64;
    move |sys| {
        sys.access(actor, base + off).map_err(|e| step_err("streaming", e))?;
        off = (off + 4) % len;
        Ok(StepStatus::Ready)
    }
}

/// Benign battery: arithmetic-heavy work with no data traffic.
pub fn compute_step(actor: ActorId) -> impl FnMut(&mut MemorySystem) -> Result<StepStatus, SchedError> {
    move |sys| {
        sys.tick(actor, 16);
        Ok(StepStatus::Ready)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CacheConfig;
    use crate::mem::HitLevel;

    #[test]
    fn first_round_touches_key_dependent_lines() {
        let mut sys = MemorySystem::new(CacheConfig::default()).unwrap();
        let v = sys.register_actor("aes", 0, 4).unwrap();
        let key = *b"0123456789abcdef";
        let mut victim = AesTTableVictim::new(v, 0x4000, key, false, 1);
        let pt = [0u8; 16];
        let lines = aes_first_round_lines(&victim, &pt);
        // Byte 0: index = 0 ^ b'0' = 0x30, line 3 of table 0.
        assert_eq!(lines[0], 0x4000 + 3 * 64);
        // Byte 5: table 1, index b'5' = 0x35 -> line 3 of table 1.
        assert_eq!(lines[5], 0x4000 + 1024 + 3 * 64);
        victim.encrypt(&mut sys, &pt).unwrap();
        for line in lines {
            assert!(sys.peek_cached(line), "line {line:#x} not cached");
        }
        // Plaintext upper nibble equal to the key's makes index < 16: the
        // monitored line zero gets touched.
        let mut pt2 = [0u8; 16];
        pt2[0] = key[0]; // index 0
        let lines2 = aes_first_round_lines(&victim, &pt2);
        assert_eq!(lines2[0], 0x4000);
    }

    #[test]
    fn full_rounds_add_noise_accesses() {
        let mut sys = MemorySystem::new(CacheConfig::default()).unwrap();
        let v = sys.register_actor("aes", 0, 4).unwrap();
        let mut victim = AesTTableVictim::new(v, 0x4000, [7u8; 16], true, 2);
        victim.encrypt(&mut sys, &[0u8; 16]).unwrap();
        let c = sys.read_counters(v);
        assert_eq!(c.instructions, 16 + 36 + victim.compute_ticks);
    }

    #[test]
    fn keystroke_schedule_is_reproducible_and_bounded() {
        let build = || {
            let mut sys = MemorySystem::new(CacheConfig::default()).unwrap();
            let v = sys.register_actor("keys", 0, 4).unwrap();
            let mut victim = KeystrokeVictim::with_random_schedule(
                v,
                vec![0x8000],
                50,
                80_000..=300_000,
                1.2,
                1_000_000,
                9,
            );
            let truth = run_keystrokes(&mut sys, &mut victim).unwrap();
            (truth, sys.clock())
        };
        let (truth_a, clock_a) = build();
        let (truth_b, clock_b) = build();
        assert_eq!(truth_a, truth_b);
        assert_eq!(clock_a, clock_b);
        assert_eq!(truth_a.len(), 50);
        // Gaps respect the configured range, up to handler time.
        for w in truth_a.windows(2) {
            let gap = w[1] - w[0];
            assert!((80_000..=301_000).contains(&gap), "gap {gap}");
        }
    }

    #[test]
    fn keystroke_events_touch_all_hot_lines() {
        let mut sys = MemorySystem::new(CacheConfig::default()).unwrap();
        let v = sys.register_actor("keys", 0, 4).unwrap();
        let addrs = vec![0x8000, 0x9000, 0xa000];
        let mut victim = KeystrokeVictim::with_random_schedule(
            v,
            addrs.clone(),
            3,
            1000..=2000,
            0.0,
            1_000_000,
            4,
        );
        run_keystrokes(&mut sys, &mut victim).unwrap();
        for a in addrs {
            assert_ne!(sys.peek_hit_level(0, a), HitLevel::Dram);
        }
        assert_eq!(victim.truth.len(), 3);
    }

    #[test]
    fn streaming_miss_rate_is_one_per_line() {
        let mut sys = MemorySystem::new(CacheConfig::default()).unwrap();
        let a = sys.register_actor("stream", 0, 16).unwrap();
        let mut step = streaming_step(a, 0x40_0000, 1 << 25);
        for _ in 0..6400 {
            step(&mut sys).unwrap();
        }
        let c = sys.read_counters(a);
        // 6400 four-byte reads cover 400 lines: one miss each.
        assert_eq!(c.cache_misses, 400);
        assert_eq!(c.cache_references, 400);
        assert_eq!(c.itlb_ra, 6400 * 16);
    }
}
