//! Cache-hierarchy configuration: geometry, latency model, presets, and the
//! address-to-slice hash. Everything here is plain data; `mem::MemorySystem`
//! consumes a validated config and never mutates it.

use serde::Deserialize;
use thiserror::Error;

/// Geometry of one cache level. For L3 `sets` counts sets *per slice*.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
pub struct LevelConfig {
    pub ways: usize,
    pub sets: usize,
}

/// Operation latencies in cycles.
///
/// Only the flush deltas (hit delta, remote-slice penalty) are grounded in
/// measured hardware behaviour; the absolute bases are simulator conventions
/// chosen so hit < flush < dram. They are echoed into every CSV header so no
/// downstream reader mistakes them for measurements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(default)]
pub struct Latencies {
    pub l1_hit: u64,
    pub l2_hit: u64,
    pub l3_local_hit: u64,
    pub l3_remote_penalty: u64,
    pub dram: u64,
    pub flush_miss: u64,
    pub flush_hit_delta: u64,
    pub flush_remote_penalty: u64,
}

impl Default for Latencies {
    fn default() -> Self {
        Latencies {
            l1_hit: 4,
            l2_hit: 12,
            l3_local_hit: 30,
            l3_remote_penalty: 3,
            dram: 200,
            flush_miss: 100,
            flush_hit_delta: 12,
            flush_remote_penalty: 3,
        }
    }
}

/// Full simulator configuration.
///
/// Loadable from TOML; every field has a default so partial files work.
#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    /// Cache line size in bytes. Power of two.
    pub line_size: u64,
    /// L1, L2, L3 geometry (L3 sets are per slice).
    pub levels: [LevelConfig; 3],
    /// Number of L3 slices. Power of two.
    pub n_slices: usize,
    /// Number of simulated cores (each with private L1/L2).
    pub n_cores: usize,
    pub latencies: Latencies,
    /// Makes flush latency independent of cache state (countermeasure toggle).
    pub constant_time_flush: bool,
    /// Uniform latency jitter in [0, jitter_bound], seeded.
    pub jitter_bound: u64,
    pub seed: u64,
    /// Flat simulated address space in bytes.
    pub addr_space: u64,
    /// Page size in bytes; granularity for the prefetcher rule and
    /// eviction-set page-distinctness.
    pub page_size: u64,
    /// When set, every access also fills the next sequential line within the
    /// same page (deliberately crude next-line prefetcher).
    pub prefetch_next_line: bool,
    /// Reporting convention for converting cycles to seconds in outputs.
    /// Not a claim about real hardware; echoed into every report.
    pub cycles_per_second: u64,
    /// Slice-hash override: one XOR mask per slice-index bit, applied to the
    /// line index (addr >> log2(line_size)). Empty = default fold, see
    /// [`CacheConfig::slice_masks`].
    pub slice_hash_masks: Vec<u64>,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig {
            line_size: 64,
            levels: [
                LevelConfig { ways: 8, sets: 64 },
                LevelConfig { ways: 8, sets: 512 },
                LevelConfig { ways: 16, sets: 1024 },
            ],
            n_slices: 4,
            n_cores: 4,
            latencies: Latencies::default(),
            constant_time_flush: false,
            jitter_bound: 0,
            seed: 1,
            addr_space: 1 << 30,
            page_size: 4096,
            prefetch_next_line: false,
            cycles_per_second: 1_000_000,
            slice_hash_masks: Vec::new(),
        }
    }
}

/// Named parameter presets. Only the flush-hit delta differs between them
/// (12, 9, and 12 cycles respectively); everything else uses defaults.
pub const PRESETS: &[&str] = &["haswell", "ivybridge", "sandybridge"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown preset `{0}` (expected one of: haswell, ivybridge, sandybridge)")]
    UnknownPreset(String),
    #[error("config file: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl CacheConfig {
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let delta = match name {
            "haswell" | "sandybridge" => 12,
            "ivybridge" => 9,
            _ => return Err(ConfigError::UnknownPreset(name.to_string())),
        };
        let mut cfg = CacheConfig::default();
        cfg.latencies.flush_hit_delta = delta;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: CacheConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let pow2 = |v: u64| v != 0 && v & (v - 1) == 0;
        if !pow2(self.line_size) {
            return Err(ConfigError::Invalid("line_size must be a power of two".into()));
        }
        if !pow2(self.n_slices as u64) {
            return Err(ConfigError::Invalid("n_slices must be a power of two".into()));
        }
        for (i, lv) in self.levels.iter().enumerate() {
            if !pow2(lv.sets as u64) || lv.ways == 0 {
                return Err(ConfigError::Invalid(format!(
                    "level {} needs power-of-two sets and ways > 0",
                    i + 1
                )));
            }
        }
        if self.n_cores == 0 {
            return Err(ConfigError::Invalid("n_cores must be > 0".into()));
        }
        if !self.constant_time_flush && self.latencies.flush_hit_delta == 0 {
            return Err(ConfigError::Invalid(
                "flush_hit_delta must be > 0 unless constant_time_flush is set".into(),
            ));
        }
        if !pow2(self.page_size) || self.page_size < self.line_size {
            return Err(ConfigError::Invalid(
                "page_size must be a power of two >= line_size".into(),
            ));
        }
        if self.addr_space % self.page_size != 0 || self.addr_space == 0 {
            return Err(ConfigError::Invalid(
                "addr_space must be a nonzero multiple of page_size".into(),
            ));
        }
        // Inclusiveness must be representable: capacity L3 >= L2 >= L1.
        let cap = |lv: LevelConfig, slices: usize| {
            lv.ways as u64 * lv.sets as u64 * slices as u64 * self.line_size
        };
        let (c1, c2, c3) = (
            cap(self.levels[0], 1),
            cap(self.levels[1], 1),
            cap(self.levels[2], self.n_slices),
        );
        if !(c3 >= c2 && c2 >= c1) {
            return Err(ConfigError::Invalid(format!(
                "capacities must satisfy L3 ({c3}) >= L2 ({c2}) >= L1 ({c1})"
            )));
        }
        if !self.slice_hash_masks.is_empty()
            && self.slice_hash_masks.len() != self.slice_bits() as usize
        {
            return Err(ConfigError::Invalid(format!(
                "slice_hash_masks needs exactly log2(n_slices) = {} masks",
                self.slice_bits()
            )));
        }
        Ok(())
    }

    pub fn line_bits(&self) -> u32 {
        self.line_size.trailing_zeros()
    }

    pub fn slice_bits(&self) -> u32 {
        (self.n_slices as u64).trailing_zeros()
    }

    /// Line index: address with the offset bits stripped.
    pub fn line_of(&self, addr: u64) -> u64 {
        addr >> self.line_bits()
    }

    pub fn page_of(&self, addr: u64) -> u64 {
        addr / self.page_size
    }

    pub fn lines_per_page(&self) -> u64 {
        self.page_size / self.line_size
    }

    /// Effective slice-hash masks: the configured override, or the default
    /// fold where slice bit b is the XOR of line-index bits at positions
    /// congruent to b modulo log2(n_slices).
    pub fn slice_masks(&self) -> Vec<u64> {
        if !self.slice_hash_masks.is_empty() {
            return self.slice_hash_masks.clone();
        }
        let k = self.slice_bits();
        (0..k)
            .map(|b| {
                let mut mask = 0u64;
                let mut pos = b;
                while pos < 64 {
                    mask |= 1 << pos;
                    pos += k;
                }
                mask
            })
            .collect()
    }

    /// Address-to-slice hash. Deterministic XOR-fold of the line index; a
    /// documented stand-in with the same shape as a per-bit parity matrix.
    pub fn slice_of(&self, addr: u64) -> usize {
        let line = self.line_of(addr);
        let mut slice = 0usize;
        for (b, mask) in self.slice_masks().iter().enumerate() {
            slice |= (((line & mask).count_ones() & 1) as usize) << b;
        }
        slice
    }

    /// The slice that is cheapest to flush from the given core.
    pub fn local_slice(&self, core: usize) -> usize {
        core % self.n_slices
    }

    /// L3 set index within a slice.
    pub fn l3_set(&self, addr: u64) -> usize {
        (self.line_of(addr) as usize) & (self.levels[2].sets - 1)
    }

    /// Number of distinct (set, slice) congruence classes in L3.
    pub fn l3_classes(&self) -> u64 {
        self.levels[2].sets as u64 * self.n_slices as u64
    }
}
