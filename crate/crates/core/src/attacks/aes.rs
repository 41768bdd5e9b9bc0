//! First-round key recovery against the T-table cipher. For each key byte
//! the attacker submits chosen plaintexts that fix the byte's upper nibble,
//! lets the victim encrypt, and probes one monitored table line. Only the
//! nibble equal to the key's upper nibble makes the first-round lookup land
//! in table line zero, so the candidate whose plaintexts keep lighting the
//! line up is the key nibble.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::AttackError;
use crate::mem::{ActorId, MemError, MemorySystem};
use crate::probes::{
    build_eviction_set, calibrate_flush_timing, calibrate_access_timing, calibrate_set_timing,
    ff_probe, fr_probe, pp_prime, pp_probe, PrimedSet, SimBackend, Technique, Threshold, Verdict,
};
use crate::victims::{AesTTableVictim, N_TABLES};

pub struct AesAttackOptions {
    /// Probe the two leading lines of the table instead of one (FF only).
    /// A hit on line one after encrypting with candidate `g` is evidence for
    /// candidate `g ^ 1`, so every encryption feeds two hypotheses.
    pub multi_line: bool,
    /// Stop once the leader's score is this factor above the runner-up.
    pub margin_factor: f64,
    /// Minimum candidate rounds before the margin test applies.
    pub min_rounds: u64,
    /// Consecutive margin passes with an unchanged leader required to stop.
    pub stable_checks: u32,
    /// Give up on a byte beyond this many encryptions.
    pub max_encryptions_per_byte: u64,
    /// Instruction cost of crafting and submitting one plaintext.
    pub trigger_ticks: u64,
}

impl Default for AesAttackOptions {
    fn default() -> Self {
        AesAttackOptions {
            multi_line: false,
            margin_factor: 1.05,
            min_rounds: 16,
            stable_checks: 3,
            max_encryptions_per_byte: 100_000,
            trigger_ticks: 4,
        }
    }
}

/// Calibrated probe state for the monitored table lines.
pub enum AesProbeState {
    Ff { thr: Threshold },
    Fr { thr: Threshold },
    /// One primed eviction set per table, targeting the class of its line
    /// zero; the shared threshold comes from the first set.
    Pp { sets: Vec<PrimedSet>, thr: Threshold },
}

impl AesProbeState {
    pub fn technique(&self) -> Technique {
        match self {
            AesProbeState::Ff { .. } => Technique::Ff,
            AesProbeState::Fr { .. } => Technique::Fr,
            AesProbeState::Pp { .. } => Technique::Pp,
        }
    }
}

/// Calibrates probe timing against the victim's table lines. `cal` does the
/// measurement traffic so the attacking actor's counter profile stays clean.
pub fn build_aes_probe(
    sys: &mut MemorySystem,
    cal: ActorId,
    table_base: u64,
    technique: Technique,
    rounds: u32,
    pp_region: Range<u64>,
) -> Result<AesProbeState, AttackError> {
    let mut b = SimBackend::new(sys, cal);
    match technique {
        Technique::Ff => {
            let thr = calibrate_flush_timing(&mut b, table_base, rounds)?;
            Ok(AesProbeState::Ff { thr })
        }
        Technique::Fr => {
            let thr = calibrate_access_timing(&mut b, table_base, rounds)?;
            Ok(AesProbeState::Fr { thr })
        }
        Technique::Pp => {
            let cfg = b.sys.config().clone();
            let mut cursor = pp_region.start;
            let mut sets = Vec::with_capacity(N_TABLES);
            for j in 0..N_TABLES {
                let target = table_base + j as u64 * 1024;
                let set = build_eviction_set(&cfg, pp_region.clone(), &mut cursor, target)?;
                sets.push(PrimedSet::new(set));
            }
            let thr = calibrate_set_timing(&mut b, &mut sets[0], table_base, rounds)?;
            for ps in sets.iter_mut().skip(1) {
                pp_prime(&mut b, ps)?;
            }
            Ok(AesProbeState::Pp { sets, thr })
        }
    }
}

#[derive(Debug, Clone)]
pub struct AesAttackReport {
    pub technique: Technique,
    pub multi_line: bool,
    /// Recovered upper nibble per key byte, as values 0..16.
    pub recovered: [u8; 16],
    pub expected: [u8; 16],
    /// Whether the margin rule stopped the byte (false: budget ran out and
    /// the best guess stands unverified).
    pub conclusive: [bool; 16],
    pub encryptions: u64,
    pub probes: u64,
    /// Worst final leader-over-runner-up score ratio across bytes.
    pub min_margin: f64,
    /// True when every byte stopped conclusively and matches the key.
    pub success: bool,
}

pub fn recover_upper_nibbles(
    sys: &mut MemorySystem,
    attacker: ActorId,
    victim: &mut AesTTableVictim,
    probe: &mut AesProbeState,
    opts: &AesAttackOptions,
    seed: u64,
    mut noise: impl FnMut(&mut MemorySystem) -> Result<(), MemError>,
) -> Result<AesAttackReport, AttackError> {
    assert!(
        !opts.multi_line || matches!(probe, AesProbeState::Ff { .. }),
        "multi-line probing is a flush-timing refinement; FR and PP gain nothing from it"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let expected = victim.key_upper_nibbles();
    let mut recovered = [0u8; 16];
    let mut conclusive = [false; 16];
    let mut encryptions = 0u64;
    let mut probes = 0u64;
    let mut min_margin = f64::MAX;
    // Two watched lines double the evidence per encryption, so the
    // multi-line variant earns the margin test at half the rounds.
    let floor = if opts.multi_line {
        (opts.min_rounds / 2).max(4)
    } else {
        opts.min_rounds
    };

    for byte in 0..16 {
        let table = byte % N_TABLES;
        let line0 = victim.table_line(table, 0);
        let line1 = victim.table_line(table, 1);
        let mut hits0 = [0u64; 16];
        let mut hits1 = [0u64; 16];
        let mut rounds = 0u64;
        let mut stable = 0u32;
        let mut last_leader: Option<usize> = None;
        let mut byte_margin = 0.0f64;

        loop {
            if (rounds + 1) * 16 > opts.max_encryptions_per_byte {
                // Budget exhausted: keep the best guess, flagged inconclusive.
                let (leader, _, _) = rank(&hits0, &hits1, opts.multi_line);
                recovered[byte] = leader as u8;
                break;
            }
            rounds += 1;
            for g in 0..16u8 {
                let mut pt = [0u8; 16];
                rng.fill(&mut pt);
                pt[byte] = (g << 4) | (rng.r#gen::<u8>() & 0x0f);
                sys.tick(attacker, opts.trigger_ticks);
                victim.encrypt(sys, &pt)?;
                encryptions += 1;
                noise(sys)?;
                let mut b = SimBackend::new(sys, attacker);
                match probe {
                    AesProbeState::Ff { thr } => {
                        if ff_probe(&mut b, line0, thr)?.verdict == Verdict::VictimActive {
                            hits0[g as usize] += 1;
                        }
                        probes += 1;
                        if opts.multi_line {
                            if ff_probe(&mut b, line1, thr)?.verdict == Verdict::VictimActive {
                                hits1[g as usize] += 1;
                            }
                            probes += 1;
                        }
                    }
                    AesProbeState::Fr { thr } => {
                        if fr_probe(&mut b, line0, thr)?.verdict == Verdict::VictimActive {
                            hits0[g as usize] += 1;
                        }
                        probes += 1;
                    }
                    AesProbeState::Pp { sets, thr } => {
                        if pp_probe(&mut b, &mut sets[table], thr)?.verdict
                            == Verdict::VictimActive
                        {
                            hits0[g as usize] += 1;
                        }
                        probes += 1;
                    }
                }
            }
            if rounds < floor {
                continue;
            }
            let (leader, best, second) = rank(&hits0, &hits1, opts.multi_line);
            let margin = best as f64 / second.max(1) as f64;
            let margin_ok = best > 0
                && margin >= opts.margin_factor
                // The leader must actually light its line up in most rounds,
                // not merely edge out uniformly noisy rivals.
                && hits0[leader] * 4 >= rounds * 3;
            if margin_ok && last_leader == Some(leader) {
                stable += 1;
            } else if margin_ok {
                stable = 1;
            } else {
                stable = 0;
            }
            last_leader = margin_ok.then_some(leader);
            byte_margin = margin;
            if stable >= opts.stable_checks {
                recovered[byte] = leader as u8;
                conclusive[byte] = true;
                break;
            }
        }
        if conclusive[byte] {
            min_margin = min_margin.min(byte_margin);
        }
    }

    let success = conclusive.iter().all(|&c| c) && recovered == expected;
    Ok(AesAttackReport {
        technique: probe.technique(),
        multi_line: opts.multi_line,
        recovered,
        expected,
        conclusive,
        encryptions,
        probes,
        min_margin: if min_margin == f64::MAX { 0.0 } else { min_margin },
        success,
    })
}

/// Leader and runner-up of the combined score. With multi-line evidence a
/// line-one hit observed while encrypting for candidate `c ^ 1` counts
/// toward `c`.
fn rank(hits0: &[u64; 16], hits1: &[u64; 16], multi: bool) -> (usize, u64, u64) {
    let score =
        |c: usize| -> u64 { if multi { hits0[c] + hits1[c ^ 1] } else { hits0[c] } };
    let mut leader = 0usize;
    let mut best = 0u64;
    for c in 0..16 {
        if score(c) > best {
            best = score(c);
            leader = c;
        }
    }
    let mut second = 0u64;
    for c in 0..16 {
        if c != leader {
            second = second.max(score(c));
        }
    }
    (leader, best, second)
}

/// Profiling template for one key byte: hit counts per candidate upper
/// nibble (rows) across all 16 lines of the byte's table (columns). The scan
/// uses flush timing whatever the attack technique, since it needs no
/// eviction sets and probing a line also resets it. The key byte shows up as
/// a shifted diagonal: row `g` peaks at column `g ^ key_nibble`.
pub fn collect_template(
    sys: &mut MemorySystem,
    attacker: ActorId,
    victim: &mut AesTTableVictim,
    thr: &Threshold,
    byte: usize,
    rounds: u32,
    seed: u64,
) -> Result<[[u64; 16]; 16], AttackError> {
    assert!(byte < 16);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = byte % N_TABLES;
    let mut out = [[0u64; 16]; 16];
    for g in 0..16u8 {
        for _ in 0..rounds {
            let mut pt = [0u8; 16];
            rng.fill(&mut pt);
            pt[byte] = (g << 4) | (rng.r#gen::<u8>() & 0x0f);
            victim.encrypt(sys, &pt)?;
            let mut b = SimBackend::new(sys, attacker);
            for line in 0..16u64 {
                let addr = victim.table_line(table, line);
                if ff_probe(&mut b, addr, thr)?.verdict == Verdict::VictimActive {
                    out[g as usize][line as usize] += 1;
                }
            }
        }
    }
    Ok(out)
}
