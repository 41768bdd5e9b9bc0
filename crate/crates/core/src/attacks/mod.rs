//! End-to-end attack procedures built on the probe primitives: first-round
//! key recovery against the table-driven cipher, keystroke event spying, and
//! flush-latency slice mapping.

pub mod aes;
pub mod keylog;
pub mod slicemap;

use crate::mem::MemError;
use crate::probes::ProbeError;

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Mem(#[from] MemError),
    #[error(
        "no core shows a reliably faster flush for {addr:#x}; latency is uniform across cores \
         (constant-time flush defeats the measurement)"
    )]
    MappingFailed { addr: u64 },
}
