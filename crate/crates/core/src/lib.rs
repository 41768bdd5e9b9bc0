//! cachechan: a deterministic cache-hierarchy simulator plus the classic
//! timing-channel workloads built on top of it: flush-timing (FF),
//! flush-and-reload (FR), and prime-and-probe (PP) probes, a framed covert
//! channel, an event-counter-based detector, simulated victims, and
//! end-to-end attack harnesses.
//!
//! Everything simulated is reproducible: same config, same seed, same
//! result, byte for byte.

pub mod attacks;
pub mod channel;
pub mod config;
pub mod detector;
#[cfg(feature = "hw")]
pub mod hw;
pub mod mem;
pub mod probes;
pub mod scenario;
pub mod sched;
pub mod victims;

pub use config::{CacheConfig, ConfigError, Latencies, LevelConfig};
pub use mem::{
    AccessOutcome, ActorId, CounterSample, FlushOutcome, HitLevel, MemError, MemorySystem,
    TraceOp, TraceRecord,
};
