//! Reliable covert channel over cache timing lanes. A packet is `N` bytes:
//! `N - 3` payload, one sequence byte, two CRC bytes. All `8N` bits of a
//! packet travel in parallel, one lane per bit, one slot per transmission
//! attempt. Nine extra lanes carry the acknowledgement (a valid flag plus
//! the echoed sequence number); the sender retransmits a packet until it is
//! acked, and the receiver discards duplicates by sequence number.
//!
//! The first four bytes of the stream are a big-endian length prefix, so
//! the receiving side knows where the message ends.

pub mod frame;
pub mod transport;

use std::ops::Range;

use thiserror::Error;

use crate::config::CacheConfig;
use crate::mem::{ActorId, MemError, MemorySystem};
use crate::probes::{ProbeError, Technique};
use frame::{decode_packet, encode_packet, Packet};
use transport::{SimTransport, SlotTransport};

pub const ACK_LANES: usize = 9;

#[derive(Debug, Clone)]
pub struct ChannelConfig {
    pub technique: Technique,
    /// Whole-packet size N in bytes; payload is N - 3.
    pub packet_size: usize,
    /// One address per data bit, 8 x packet_size lanes.
    pub data_lines: Vec<u64>,
    /// Valid flag plus eight sequence bits.
    pub ack_lines: Vec<u64>,
    /// Probe passes per slot; the receiver majority-votes across them.
    pub slot_probes: u32,
    pub max_retransmits: u32,
    /// Writes per probe within a sub-round: (sender_writes, receiver_probes).
    pub interleave: (u32, u32),
    /// Modeled instruction cost of framing plus CRC work per slot, per
    /// endpoint. Shows up in the endpoints' instruction and iTLB pressure.
    pub frame_ticks: u64,
    pub calibration_rounds: u32,
    /// PP only: the address range eviction sets are allocated from.
    pub pp_region: Option<(u64, u64)>,
}

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("packet_size must be at least 4 bytes, got {0}")]
    PacketTooSmall(usize),
    #[error("expected {expected} {kind} lines, got {got}")]
    LaneCount { kind: &'static str, expected: usize, got: usize },
    #[error(
        "prime-probe channel with packet_size {packet_size} needs {lanes} lanes \
         and roughly {needed_mib} MiB of eviction-set pages, but the region \
         provides {available_mib} MiB; large packets are infeasible for PP"
    )]
    EvictionSetsInfeasible {
        packet_size: usize,
        lanes: usize,
        needed_mib: u64,
        available_mib: u64,
    },
    #[error("packet {packet} unacked after {attempts} attempts")]
    TransmissionFailure {
        packet: usize,
        attempts: u32,
        metrics: Box<ChannelMetrics>,
    },
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Mem(#[from] MemError),
}

impl ChannelError {
    /// Region exhaustion during eviction-set building is the infeasibility
    /// case with the honest numbers attached.
    pub(crate) fn infeasible_from_probe(
        e: ProbeError,
        cfg: &ChannelConfig,
        mem: &CacheConfig,
        available: u64,
    ) -> ChannelError {
        match e {
            ProbeError::RegionExhausted { .. } => {
                let lanes = cfg.data_lines.len() + cfg.ack_lines.len();
                ChannelError::EvictionSetsInfeasible {
                    packet_size: cfg.packet_size,
                    lanes,
                    needed_mib: estimate_pp_bytes(mem, lanes) >> 20,
                    available_mib: available >> 20,
                }
            }
            other => ChannelError::Probe(other),
        }
    }
}

/// Expected scan footprint of all eviction sets: two endpoints, `ways`
/// members each, one qualifying page per (sets-per-page-stride x slices).
fn estimate_pp_bytes(mem: &CacheConfig, lanes: usize) -> u64 {
    let set_stride = (mem.levels[2].sets as u64 / mem.lines_per_page()).max(1);
    let pages_per_member = set_stride * mem.n_slices as u64;
    lanes as u64 * 2 * mem.levels[2].ways as u64 * pages_per_member * mem.page_size
}

impl ChannelConfig {
    /// Lays out lanes for a technique inside `region` and fills in protocol
    /// defaults. For PP this also checks that the eviction-set footprint
    /// fits the region, rejecting packet sizes that cannot be afforded.
    pub fn plan(
        technique: Technique,
        packet_size: usize,
        mem: &CacheConfig,
        region: Range<u64>,
    ) -> Result<ChannelConfig, ChannelError> {
        if packet_size < 4 {
            return Err(ChannelError::PacketTooSmall(packet_size));
        }
        let width = packet_size * 8;
        let lanes = width + ACK_LANES;
        let stride = match technique {
            // FF probes single lines and may pack them densely; FR reloads
            // whole lines too but gets one per page to keep prefetch-style
            // neighbour effects out of the wire.
            Technique::Ff => mem.line_size,
            Technique::Fr => mem.page_size,
            Technique::Pp => mem.line_size,
        };
        let base = region.start.next_multiple_of(mem.page_size);
        let data_lines: Vec<u64> = (0..width as u64).map(|i| base + i * stride).collect();
        let ack_base = (base + width as u64 * stride).next_multiple_of(mem.page_size);
        let ack_lines: Vec<u64> = (0..ACK_LANES as u64).map(|i| ack_base + i * stride).collect();
        let pp_region = match technique {
            Technique::Pp => {
                let sets_start = (ack_base + ACK_LANES as u64 * stride)
                    .next_multiple_of(mem.page_size);
                let available = region.end.saturating_sub(sets_start);
                let needed = estimate_pp_bytes(mem, lanes);
                if needed > available {
                    return Err(ChannelError::EvictionSetsInfeasible {
                        packet_size,
                        lanes,
                        needed_mib: needed >> 20,
                        available_mib: available >> 20,
                    });
                }
                Some((sets_start, region.end))
            }
            _ => None,
        };
        Ok(ChannelConfig {
            technique,
            packet_size,
            data_lines,
            ack_lines,
            slot_probes: 1,
            max_retransmits: 16,
            interleave: (1, 1),
            frame_ticks: 768,
            calibration_rounds: 300,
            pp_region,
        })
    }

    pub fn check_lanes(&self) -> Result<(), ChannelError> {
        if self.packet_size < 4 {
            return Err(ChannelError::PacketTooSmall(self.packet_size));
        }
        let want = self.packet_size * 8;
        if self.data_lines.len() != want {
            return Err(ChannelError::LaneCount {
                kind: "data",
                expected: want,
                got: self.data_lines.len(),
            });
        }
        if self.ack_lines.len() != ACK_LANES {
            return Err(ChannelError::LaneCount {
                kind: "ack",
                expected: ACK_LANES,
                got: self.ack_lines.len(),
            });
        }
        Ok(())
    }

    pub fn payload_bytes(&self) -> usize {
        self.packet_size - 3
    }
}

/// End-of-run channel accounting.
#[derive(Debug, Clone)]
pub struct ChannelMetrics {
    pub technique: Technique,
    pub packet_size: usize,
    pub packets_delivered: u64,
    pub retransmissions: u64,
    /// Payload bits offered by the sender (length prefix plus message, padded).
    pub bits_sent: u64,
    /// Payload bits accepted by the receiver.
    pub bits_received: u64,
    /// min(bits_sent, bits_received): what both ends agree was carried.
    pub bits_transmitted: u64,
    /// Mismatches between sent and received payload over the common prefix;
    /// nonzero only when a corrupted frame slipped past the CRC.
    pub bit_errors: u64,
    pub error_rate: f64,
    pub runtime_cycles: u64,
    pub rate_bytes_per_sec: f64,
    /// Fraction of raw lane verdicts that matched the written bits, before
    /// voting, CRC, or retransmission. Chance level is 0.5.
    pub raw_probe_accuracy: f64,
}

impl ChannelMetrics {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "technique,packet_size,packets_delivered,retransmissions,bits_sent,\
             bits_received,bits_transmitted,bit_errors,error_rate,runtime_cycles,\
             rate_bytes_per_sec,raw_probe_accuracy"
        )?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{:.6},{},{:.3},{:.6}",
            self.technique,
            self.packet_size,
            self.packets_delivered,
            self.retransmissions,
            self.bits_sent,
            self.bits_received,
            self.bits_transmitted,
            self.bit_errors,
            self.error_rate,
            self.runtime_cycles,
            self.rate_bytes_per_sec,
            self.raw_probe_accuracy
        )
    }
}

#[derive(Debug, Clone)]
pub struct TransmitOutcome {
    /// The message as reassembled by the receiver.
    pub message: Vec<u8>,
    pub metrics: ChannelMetrics,
}

struct ProtocolRun {
    stream_sent: Vec<u8>,
    delivered: Vec<u8>,
    packets_delivered: u64,
    retransmissions: u64,
    raw_matches: u64,
    raw_total: u64,
    start_clock: u64,
}

impl ProtocolRun {
    fn metrics<T: SlotTransport>(&self, t: &T, cfg: &ChannelConfig) -> ChannelMetrics {
        let bits_sent = self.stream_sent.len() as u64 * 8;
        let bits_received = self.delivered.len() as u64 * 8;
        let bits_transmitted = bits_sent.min(bits_received);
        let mut bit_errors = 0u64;
        for (a, b) in self.stream_sent.iter().zip(&self.delivered) {
            bit_errors += (a ^ b).count_ones() as u64;
        }
        let error_rate = if bits_transmitted == 0 {
            0.0
        } else {
            bit_errors as f64 / bits_transmitted as f64
        };
        let runtime_cycles = t.clock() - self.start_clock;
        let rate_bytes_per_sec = if runtime_cycles == 0 {
            0.0
        } else {
            (bits_transmitted as f64 / 8.0)
                / (runtime_cycles as f64 / t.cycles_per_second() as f64)
        };
        ChannelMetrics {
            technique: cfg.technique,
            packet_size: cfg.packet_size,
            packets_delivered: self.packets_delivered,
            retransmissions: self.retransmissions,
            bits_sent,
            bits_received,
            bits_transmitted,
            bit_errors,
            error_rate,
            runtime_cycles,
            rate_bytes_per_sec,
            raw_probe_accuracy: if self.raw_total == 0 {
                0.0
            } else {
                self.raw_matches as f64 / self.raw_total as f64
            },
        }
    }
}

fn ack_bits(seq: u8) -> [bool; ACK_LANES] {
    let mut a = [false; ACK_LANES];
    a[0] = true;
    for i in 0..8 {
        a[1 + i] = seq >> i & 1 == 1;
    }
    a
}

fn ack_seq(a: &[bool; ACK_LANES]) -> u8 {
    let mut s = 0u8;
    for i in 0..8 {
        s |= (a[1 + i] as u8) << i;
    }
    s
}

/// Drives the stop-and-wait protocol over any transport: frame, write and
/// probe slots with majority voting, ack, retransmit until acked, dedupe by
/// sequence. Returns once every packet of the framed stream is delivered.
pub fn run_protocol<T: SlotTransport>(
    t: &mut T,
    cfg: &ChannelConfig,
    message: &[u8],
) -> Result<TransmitOutcome, ChannelError> {
    let payload = cfg.payload_bytes();
    let mut stream = Vec::with_capacity(4 + message.len());
    stream.extend_from_slice(&(message.len() as u32).to_be_bytes());
    stream.extend_from_slice(message);
    while stream.len() % payload != 0 {
        stream.push(0);
    }

    let mut run = ProtocolRun {
        stream_sent: stream,
        delivered: Vec::new(),
        packets_delivered: 0,
        retransmissions: 0,
        raw_matches: 0,
        raw_total: 0,
        start_clock: t.clock(),
    };

    let n_packets = run.stream_sent.len() / payload;
    for k in 0..n_packets {
        let chunk = &run.stream_sent[k * payload..(k + 1) * payload];
        let seq = (k % 256) as u8;
        let bits = encode_packet(&Packet { payload: chunk.to_vec(), seq });
        let mut attempts = 0u32;
        loop {
            t.sender_tick(cfg.frame_ticks);
            let mut votes = vec![0u32; bits.len()];
            let mut probes = 0u32;
            for _ in 0..cfg.slot_probes {
                for _ in 0..cfg.interleave.0 {
                    t.sender_write(&bits)?;
                }
                for _ in 0..cfg.interleave.1 {
                    let obs = t.receiver_probe()?;
                    for (v, &o) in votes.iter_mut().zip(&obs) {
                        *v += o as u32;
                    }
                    probes += 1;
                }
            }
            let rx_bits: Vec<bool> = votes.iter().map(|&v| 2 * v > probes).collect();
            for (&a, &b) in bits.iter().zip(&rx_bits) {
                run.raw_matches += (a == b) as u64;
            }
            run.raw_total += bits.len() as u64;
            t.receiver_tick(cfg.frame_ticks);

            let expected = (run.packets_delivered % 256) as u8;
            let previous = (run.packets_delivered.wrapping_add(255) % 256) as u8;
            let ack = match decode_packet(&rx_bits, cfg.packet_size) {
                Ok(p) if p.seq == expected => {
                    run.delivered.extend_from_slice(&p.payload);
                    run.packets_delivered += 1;
                    Some(ack_bits(p.seq))
                }
                // Duplicate of the last delivered packet: its ack was lost.
                // Re-ack so the sender moves on; deliver nothing.
                Ok(p) if run.packets_delivered > 0 && p.seq == previous => {
                    Some(ack_bits(p.seq))
                }
                _ => None,
            };
            t.receiver_write_ack(&ack.unwrap_or([false; ACK_LANES]))?;

            let got = t.sender_read_ack()?;
            if got[0] && ack_seq(&got) == seq {
                break;
            }
            attempts += 1;
            run.retransmissions += 1;
            if attempts > cfg.max_retransmits {
                let metrics = run.metrics(t, cfg);
                return Err(ChannelError::TransmissionFailure {
                    packet: k,
                    attempts,
                    metrics: Box::new(metrics),
                });
            }
        }
    }

    let metrics = run.metrics(t, cfg);
    // Unwrap the length prefix; tolerate a short or garbled stream.
    let message = if run.delivered.len() >= 4 {
        let len = u32::from_be_bytes(run.delivered[..4].try_into().unwrap()) as usize;
        let end = (4 + len).min(run.delivered.len());
        run.delivered[4..end].to_vec()
    } else {
        run.delivered.clone()
    };
    Ok(TransmitOutcome { message, metrics })
}

/// Sets up lanes in the simulator (calibrating in place) and transmits.
pub fn transmit(
    sys: &mut MemorySystem,
    tx: ActorId,
    rx: ActorId,
    cfg: &ChannelConfig,
    message: &[u8],
) -> Result<TransmitOutcome, ChannelError> {
    let mut t = SimTransport::setup(sys, tx, rx, cfg)?;
    run_protocol(&mut t, cfg, message)
}
