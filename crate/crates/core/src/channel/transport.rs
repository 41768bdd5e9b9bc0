//! Slot transports: how channel bits physically move. `SimTransport` drives
//! cache lanes in a `MemorySystem` with one of the three probe techniques;
//! `NoisyLoopback` is a direct wire with seeded bit flips and ack drops, for
//! exercising the protocol against loss without a simulator underneath.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ChannelConfig, ChannelError, ACK_LANES};
use crate::mem::{ActorId, MemorySystem};
use crate::probes::{
    build_eviction_set, calibrate_access_timing, calibrate_flush_timing, calibrate_set_timing,
    ff_probe, fr_probe, pp_prime, pp_probe, PrimedSet, SimBackend, Technique, Threshold, Verdict,
};

/// One bit-slot's worth of wire operations, from both endpoints' point of
/// view. The protocol driver is generic over this, so the same ARQ logic
/// runs over simulated cache lanes and over test loopbacks.
pub trait SlotTransport {
    fn data_width(&self) -> usize;
    /// One write pass: impress the bit vector onto the lanes.
    fn sender_write(&mut self, bits: &[bool]) -> Result<(), ChannelError>;
    /// One probe pass: read every data lane once.
    fn receiver_probe(&mut self) -> Result<Vec<bool>, ChannelError>;
    fn receiver_write_ack(&mut self, ack: &[bool; ACK_LANES]) -> Result<(), ChannelError>;
    fn sender_read_ack(&mut self) -> Result<[bool; ACK_LANES], ChannelError>;
    /// Non-memory protocol work (framing, CRC) on the sender side.
    fn sender_tick(&mut self, n: u64);
    fn receiver_tick(&mut self, n: u64);
    fn clock(&self) -> u64;
    fn cycles_per_second(&self) -> u64;
}

/// Cache-lane transport. Lane roles by technique:
///
/// - FF: sender writes a 1 by touching the lane line; the receiver's probe
///   is a timed flush, which also resets the lane. Acks are inverted: the
///   sender keeps ack lines cached, the receiver signals by flushing them,
///   and the sender reads acks with timed flushes and re-arms. The receiver
///   therefore performs no memory loads at all, on any lane, ever.
/// - FR: sender writes by touching; receiver reloads (timed) and flushes.
///   Acks are ordinary: receiver touches, sender reloads and resets.
/// - PP: each lane is an L3 congruence class with one eviction set per
///   endpoint. Writing a 1 primes the writer's set, which displaces the
///   reader's; the reader's timed sweep goes over the boundary and re-primes
///   itself as a side effect.
pub struct SimTransport<'a> {
    sys: &'a mut MemorySystem,
    tx: ActorId,
    rx: ActorId,
    technique: Technique,
    data_lines: Vec<u64>,
    ack_lines: Vec<u64>,
    thr_data: Threshold,
    thr_ack: Threshold,
    tx_data_sets: Vec<PrimedSet>,
    rx_data_sets: Vec<PrimedSet>,
    tx_ack_sets: Vec<PrimedSet>,
    rx_ack_sets: Vec<PrimedSet>,
}

impl<'a> SimTransport<'a> {
    /// Builds lanes, calibrates thresholds in place, and arms initial state.
    ///
    /// Calibration for FF and FR runs as a separate setup actor: it has to
    /// load lines, and the FF receiver must finish the whole run without a
    /// single cache miss of its own.
    pub fn setup(
        sys: &'a mut MemorySystem,
        tx: ActorId,
        rx: ActorId,
        cfg: &ChannelConfig,
    ) -> Result<Self, ChannelError> {
        cfg.check_lanes()?;
        let cal = sys.register_actor("chan_cal", sys.actor_core(tx), 1)?;
        let thr = match cfg.technique {
            Technique::Ff => {
                let mut b = SimBackend::new(sys, cal);
                calibrate_flush_timing(&mut b, cfg.data_lines[0], cfg.calibration_rounds)?
            }
            Technique::Fr => {
                let mut b = SimBackend::new(sys, cal);
                calibrate_access_timing(&mut b, cfg.data_lines[0], cfg.calibration_rounds)?
            }
            Technique::Pp => {
                // Placeholder; PP calibrates on its own sets below.
                Threshold {
                    boundary: 0,
                    polarity: crate::probes::Polarity::ActiveAtOrAbove,
                    active_hist: Default::default(),
                    idle_hist: Default::default(),
                }
            }
        };
        Self::setup_with_thresholds(sys, tx, rx, cfg, thr.clone(), thr)
    }

    /// Like `setup`, but with caller-supplied data/ack thresholds for FF and
    /// FR. Lets countermeasure experiments run the channel with a stale
    /// boundary when in-place calibration would refuse to produce one.
    pub fn setup_with_thresholds(
        sys: &'a mut MemorySystem,
        tx: ActorId,
        rx: ActorId,
        cfg: &ChannelConfig,
        thr_data: Threshold,
        thr_ack: Threshold,
    ) -> Result<Self, ChannelError> {
        cfg.check_lanes()?;
        let mut t = SimTransport {
            sys,
            tx,
            rx,
            technique: cfg.technique,
            data_lines: cfg.data_lines.clone(),
            ack_lines: cfg.ack_lines.clone(),
            thr_data,
            thr_ack,
            tx_data_sets: Vec::new(),
            rx_data_sets: Vec::new(),
            tx_ack_sets: Vec::new(),
            rx_ack_sets: Vec::new(),
        };
        match cfg.technique {
            Technique::Ff => {
                // Arm ack lines cached so the receiver can signal by flushing.
                for i in 0..ACK_LANES {
                    let line = t.ack_lines[i];
                    t.sys.access(t.tx, line)?;
                }
            }
            Technique::Fr => {}
            Technique::Pp => t.setup_pp(cfg)?,
        }
        Ok(t)
    }

    fn setup_pp(&mut self, cfg: &ChannelConfig) -> Result<(), ChannelError> {
        let (region_start, region_end) = cfg
            .pp_region
            .expect("pp channel config without a region; use ChannelConfig::plan");
        let mem_cfg = self.sys.config().clone();
        let mut cursor = region_start;
        let build = |target: u64, cursor: &mut u64| {
            build_eviction_set(&mem_cfg, region_start..region_end, cursor, target)
                .map(PrimedSet::new)
                .map_err(|e| ChannelError::infeasible_from_probe(e, cfg, &mem_cfg, region_end - region_start))
        };
        for &line in &self.data_lines {
            self.rx_data_sets.push(build(line, &mut cursor)?);
        }
        for &line in &self.data_lines {
            self.tx_data_sets.push(build(line, &mut cursor)?);
        }
        for &line in &self.ack_lines {
            self.rx_ack_sets.push(build(line, &mut cursor)?);
        }
        for &line in &self.ack_lines {
            self.tx_ack_sets.push(build(line, &mut cursor)?);
        }
        // In-place calibration on each endpoint's own lane zero.
        let thr_data = {
            let mut b = SimBackend::new(self.sys, self.rx);
            calibrate_set_timing(&mut b, &mut self.rx_data_sets[0], self.data_lines[0],
                cfg.calibration_rounds)?
        };
        let thr_ack = {
            let mut b = SimBackend::new(self.sys, self.tx);
            calibrate_set_timing(&mut b, &mut self.tx_ack_sets[0], self.ack_lines[0],
                cfg.calibration_rounds)?
        };
        self.thr_data = thr_data;
        self.thr_ack = thr_ack;
        // Receiver holds its data classes; sender holds its ack classes.
        for ps in &mut self.rx_data_sets {
            let mut b = SimBackend::new(self.sys, self.rx);
            pp_prime(&mut b, ps)?;
        }
        for ps in &mut self.tx_ack_sets {
            let mut b = SimBackend::new(self.sys, self.tx);
            pp_prime(&mut b, ps)?;
        }
        Ok(())
    }
}

impl SlotTransport for SimTransport<'_> {
    fn data_width(&self) -> usize {
        self.data_lines.len()
    }

    fn sender_write(&mut self, bits: &[bool]) -> Result<(), ChannelError> {
        match self.technique {
            Technique::Ff | Technique::Fr => {
                for (i, &bit) in bits.iter().enumerate() {
                    if bit {
                        self.sys.access(self.tx, self.data_lines[i])?;
                    }
                }
            }
            Technique::Pp => {
                for (i, &bit) in bits.iter().enumerate() {
                    if bit {
                        let mut b = SimBackend::new(self.sys, self.tx);
                        pp_prime(&mut b, &mut self.tx_data_sets[i])?;
                    }
                }
            }
        }
        Ok(())
    }

    fn receiver_probe(&mut self) -> Result<Vec<bool>, ChannelError> {
        let mut out = Vec::with_capacity(self.data_lines.len());
        match self.technique {
            Technique::Ff => {
                for &line in &self.data_lines {
                    let mut b = SimBackend::new(self.sys, self.rx);
                    let s = ff_probe(&mut b, line, &self.thr_data)?;
                    out.push(s.verdict == Verdict::VictimActive);
                }
            }
            Technique::Fr => {
                for &line in &self.data_lines {
                    let mut b = SimBackend::new(self.sys, self.rx);
                    let s = fr_probe(&mut b, line, &self.thr_data)?;
                    out.push(s.verdict == Verdict::VictimActive);
                }
            }
            Technique::Pp => {
                for ps in &mut self.rx_data_sets {
                    let mut b = SimBackend::new(self.sys, self.rx);
                    let s = pp_probe(&mut b, ps, &self.thr_data)?;
                    out.push(s.verdict == Verdict::VictimActive);
                }
            }
        }
        Ok(out)
    }

    fn receiver_write_ack(&mut self, ack: &[bool; ACK_LANES]) -> Result<(), ChannelError> {
        match self.technique {
            Technique::Ff => {
                // Signal by removing lines: the receiver only ever flushes.
                for (i, &bit) in ack.iter().enumerate() {
                    if bit {
                        self.sys.flush(self.rx, self.ack_lines[i])?;
                    }
                }
            }
            Technique::Fr => {
                for (i, &bit) in ack.iter().enumerate() {
                    if bit {
                        self.sys.access(self.rx, self.ack_lines[i])?;
                    }
                }
            }
            Technique::Pp => {
                for (i, &bit) in ack.iter().enumerate() {
                    if bit {
                        let mut b = SimBackend::new(self.sys, self.rx);
                        pp_prime(&mut b, &mut self.rx_ack_sets[i])?;
                    }
                }
            }
        }
        Ok(())
    }

    fn sender_read_ack(&mut self) -> Result<[bool; ACK_LANES], ChannelError> {
        let mut out = [false; ACK_LANES];
        match self.technique {
            Technique::Ff => {
                for i in 0..ACK_LANES {
                    let mut b = SimBackend::new(self.sys, self.tx);
                    let s = ff_probe(&mut b, self.ack_lines[i], &self.thr_ack)?;
                    // Inverted wire: a flushed (idle-looking) line is a 1.
                    out[i] = s.verdict == Verdict::VictimIdle;
                }
                // Re-arm for the next ack; the reads flushed everything.
                for i in 0..ACK_LANES {
                    self.sys.access(self.tx, self.ack_lines[i])?;
                }
            }
            Technique::Fr => {
                for i in 0..ACK_LANES {
                    let mut b = SimBackend::new(self.sys, self.tx);
                    let s = fr_probe(&mut b, self.ack_lines[i], &self.thr_ack)?;
                    out[i] = s.verdict == Verdict::VictimActive;
                }
            }
            Technique::Pp => {
                for i in 0..ACK_LANES {
                    let mut b = SimBackend::new(self.sys, self.tx);
                    let s = pp_probe(&mut b, &mut self.tx_ack_sets[i], &self.thr_ack)?;
                    out[i] = s.verdict == Verdict::VictimActive;
                }
            }
        }
        Ok(out)
    }

    fn sender_tick(&mut self, n: u64) {
        self.sys.tick(self.tx, n);
    }

    fn receiver_tick(&mut self, n: u64) {
        self.sys.tick(self.rx, n);
    }

    fn clock(&self) -> u64 {
        self.sys.clock()
    }

    fn cycles_per_second(&self) -> u64 {
        self.sys.config().cycles_per_second
    }
}

/// Direct wire with seeded impairments: every data bit flips independently
/// with `flip_prob` per probe, and a whole ack read is lost (reads as
/// invalid) with `ack_drop_prob`. Clock advances one cycle per lane touched.
pub struct NoisyLoopback {
    pub flip_prob: f64,
    pub ack_drop_prob: f64,
    width: usize,
    wire: Vec<bool>,
    ack: [bool; ACK_LANES],
    rng: ChaCha8Rng,
    clock: u64,
}

impl NoisyLoopback {
    pub fn new(width: usize, flip_prob: f64, ack_drop_prob: f64, seed: u64) -> Self {
        NoisyLoopback {
            flip_prob,
            ack_drop_prob,
            width,
            wire: vec![false; width],
            ack: [false; ACK_LANES],
            rng: ChaCha8Rng::seed_from_u64(seed),
            clock: 0,
        }
    }
}

impl SlotTransport for NoisyLoopback {
    fn data_width(&self) -> usize {
        self.width
    }

    fn sender_write(&mut self, bits: &[bool]) -> Result<(), ChannelError> {
        self.wire.copy_from_slice(bits);
        self.clock += bits.len() as u64;
        Ok(())
    }

    fn receiver_probe(&mut self) -> Result<Vec<bool>, ChannelError> {
        self.clock += self.width as u64;
        Ok(self
            .wire
            .iter()
            .map(|&b| {
                if self.rng.r#gen::<f64>() < self.flip_prob {
                    !b
                } else {
                    b
                }
            })
            .collect())
    }

    fn receiver_write_ack(&mut self, ack: &[bool; ACK_LANES]) -> Result<(), ChannelError> {
        self.ack = *ack;
        self.clock += ACK_LANES as u64;
        Ok(())
    }

    fn sender_read_ack(&mut self) -> Result<[bool; ACK_LANES], ChannelError> {
        self.clock += ACK_LANES as u64;
        if self.rng.r#gen::<f64>() < self.ack_drop_prob {
            return Ok([false; ACK_LANES]);
        }
        Ok(self.ack)
    }

    fn sender_tick(&mut self, n: u64) {
        self.clock += n;
    }

    fn receiver_tick(&mut self, n: u64) {
        self.clock += n;
    }

    fn clock(&self) -> u64 {
        self.clock
    }

    fn cycles_per_second(&self) -> u64 {
        1_000_000
    }
}
