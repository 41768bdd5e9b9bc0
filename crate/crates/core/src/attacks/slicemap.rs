//! Recovers the line-to-slice mapping from flush timing alone: a flush of a
//! cached line completes fastest from the core co-located with the line's
//! slice. Voting over repetitions from every core pins each address to the
//! slice its fastest core serves.

use super::AttackError;
use crate::probes::ProbeBackend;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceMapEntry {
    pub addr: u64,
    pub slice: usize,
    /// Repetitions whose fastest-core measurement agreed on this slice.
    pub votes: u32,
    pub reps: u32,
}

/// Maps each address to a slice, or fails when no slice wins a strict
/// majority of repetitions. `n_slices` is how the caller translates a core
/// to the slice it is local to.
pub fn map_slices(
    b: &mut dyn ProbeBackend,
    addrs: &[u64],
    reps: u32,
    n_slices: usize,
) -> Result<Vec<SliceMapEntry>, AttackError> {
    assert!(reps > 0 && n_slices > 0);
    let n_cores = b.n_cores();
    let home = b.current_core();
    let mut out = Vec::with_capacity(addrs.len());
    for &addr in addrs {
        let mut votes = vec![0u32; n_slices];
        for _ in 0..reps {
            let mut lat = vec![0u64; n_cores];
            for (core, slot) in lat.iter_mut().enumerate() {
                b.pin_to_core(core)?;
                b.plain_access(addr)?;
                b.serialize();
                *slot = b.timed_flush(addr)?;
            }
            let fastest = *lat.iter().min().unwrap();
            // All cores at the minimum must agree on a slice; a tie across
            // slices (uniform timing) casts no vote.
            let mut slice_at_min: Option<usize> = None;
            let mut consistent = true;
            for (core, &l) in lat.iter().enumerate() {
                if l == fastest {
                    let s = core % n_slices;
                    match slice_at_min {
                        None => slice_at_min = Some(s),
                        Some(prev) if prev != s => {
                            consistent = false;
                            break;
                        }
                        _ => {}
                    }
                }
            }
            if consistent {
                if let Some(s) = slice_at_min {
                    votes[s] += 1;
                }
            }
        }
        b.pin_to_core(home)?;
        let (slice, &n) = votes
            .iter()
            .enumerate()
            .max_by_key(|(_, &v)| v)
            .unwrap();
        if u64::from(n) * 2 <= u64::from(reps) {
            return Err(AttackError::MappingFailed { addr });
        }
        out.push(SliceMapEntry { addr, slice, votes: n, reps });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::CacheConfig;
    use crate::mem::MemorySystem;
    use crate::probes::SimBackend;

    fn run_map(jitter: u64, ct: bool, reps: u32) -> Result<Vec<SliceMapEntry>, AttackError> {
        let cfg = CacheConfig {
            jitter_bound: jitter,
            constant_time_flush: ct,
            ..CacheConfig::default()
        };
        let mut sys = MemorySystem::new(cfg).unwrap();
        let a = sys.register_actor("mapper", 0, 1).unwrap();
        let addrs: Vec<u64> = (0..32).map(|i| 0x2_0000 + i * 64).collect();
        let mut b = SimBackend::new(&mut sys, a);
        map_slices(&mut b, &addrs, reps, 4)
    }

    #[test]
    fn exact_mapping_with_low_jitter() {
        let entries = run_map(1, false, 100).unwrap();
        let cfg = CacheConfig::default();
        for e in &entries {
            assert_eq!(e.slice, cfg.slice_of(e.addr), "addr {:#x}", e.addr);
            assert_eq!(e.votes, e.reps);
        }
    }

    #[test]
    fn constant_time_flush_defeats_mapping() {
        let err = run_map(0, true, 20).unwrap_err();
        assert!(matches!(err, AttackError::MappingFailed { .. }));
    }
}
