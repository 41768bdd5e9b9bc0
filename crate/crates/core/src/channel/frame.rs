//! Packet framing for the covert channel: payload, sequence byte, and a
//! CRC-16/CCITT-FALSE trailer, serialized to a flat bit vector (one bit per
//! data lane, LSB-first within each byte).

use thiserror::Error;

/// CRC-16/CCITT-FALSE: polynomial 0x1021, init 0xFFFF, no reflection, no
/// final xor. Check value: crc16(b"123456789") == 0x29B1.
const POLY: u16 = 0x1021;

const fn crc_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ POLY } else { crc << 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

static CRC_TABLE: [u16; 256] = crc_table();

pub fn crc16(data: &[u8]) -> u16 {
    let mut crc = 0xFFFFu16;
    for &b in data {
        crc = (crc << 8) ^ CRC_TABLE[((crc >> 8) ^ b as u16) as usize];
    }
    crc
}

/// One protocol packet: `packet_size - 3` payload bytes plus a sequence
/// number; the CRC is computed over payload and sequence together.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub payload: Vec<u8>,
    pub seq: u8,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("bit vector length {got} is not 8 x packet_size = {expected}")]
    Length { got: usize, expected: usize },
    #[error("crc mismatch: computed {computed:#06x}, trailer {trailer:#06x}")]
    Crc { computed: u16, trailer: u16 },
}

/// Wire byte order: payload, seq, then the CRC big-endian. Bits go out
/// LSB-first within each byte, one lane per bit position.
pub fn encode_packet(p: &Packet) -> Vec<bool> {
    let mut bytes = Vec::with_capacity(p.payload.len() + 3);
    bytes.extend_from_slice(&p.payload);
    bytes.push(p.seq);
    let crc = crc16(&bytes);
    bytes.extend_from_slice(&crc.to_be_bytes());
    let mut bits = Vec::with_capacity(bytes.len() * 8);
    for b in bytes {
        for i in 0..8 {
            bits.push(b >> i & 1 == 1);
        }
    }
    bits
}

/// Inverse of `encode_packet` for a known packet size; rejects any frame
/// whose CRC trailer does not match its contents.
pub fn decode_packet(bits: &[bool], packet_size: usize) -> Result<Packet, FrameError> {
    if bits.len() != packet_size * 8 || packet_size < 4 {
        return Err(FrameError::Length { got: bits.len(), expected: packet_size * 8 });
    }
    let mut bytes = Vec::with_capacity(packet_size);
    for chunk in bits.chunks(8) {
        let mut b = 0u8;
        for (i, &bit) in chunk.iter().enumerate() {
            b |= (bit as u8) << i;
        }
        bytes.push(b);
    }
    let trailer = u16::from_be_bytes([bytes[packet_size - 2], bytes[packet_size - 1]]);
    let computed = crc16(&bytes[..packet_size - 2]);
    if computed != trailer {
        return Err(FrameError::Crc { computed, trailer });
    }
    let seq = bytes[packet_size - 3];
    bytes.truncate(packet_size - 3);
    Ok(Packet { payload: bytes, seq })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent reference: plain polynomial long division over a bit
    /// vector. The init value is folded in by xoring it into the first 16
    /// bits of the zero-padded message, which is the textbook definition of
    /// a nonzero initial remainder.
    fn crc16_long_division(data: &[u8]) -> u16 {
        let mut bits: Vec<u8> = Vec::with_capacity(data.len() * 8 + 16);
        for &b in data {
            for i in (0..8).rev() {
                bits.push(b >> i & 1);
            }
        }
        bits.extend(std::iter::repeat(0).take(16));
        for i in 0..16 {
            bits[i] ^= (0xFFFFu16 >> (15 - i) & 1) as u8;
        }
        let divisor: [u8; 17] = [1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1]; // x^16+x^12+x^5+1
        for start in 0..bits.len() - 16 {
            if bits[start] == 1 {
                for (j, &d) in divisor.iter().enumerate() {
                    bits[start + j] ^= d;
                }
            }
        }
        let mut rem = 0u16;
        for &b in &bits[bits.len() - 16..] {
            rem = rem << 1 | b as u16;
        }
        rem
    }

    #[test]
    fn crc_check_value() {
        assert_eq!(crc16(b"123456789"), 0x29B1);
        assert_eq!(crc16_long_division(b"123456789"), 0x29B1);
    }

    #[test]
    fn crc_empty_input_is_init() {
        assert_eq!(crc16(b""), 0xFFFF);
        assert_eq!(crc16_long_division(b""), 0xFFFF);
    }

    #[test]
    fn crc_table_matches_long_division() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for len in 0..64 {
            let data: Vec<u8> = (0..len).map(|_| rng.r#gen()).collect();
            assert_eq!(crc16(&data), crc16_long_division(&data), "len {len}");
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [4usize, 5, 16, 28] {
            for _ in 0..50 {
                let p = Packet {
                    payload: (0..n - 3).map(|_| rng.r#gen()).collect(),
                    seq: rng.r#gen(),
                };
                let bits = encode_packet(&p);
                assert_eq!(bits.len(), n * 8);
                assert_eq!(decode_packet(&bits, n).unwrap(), p);
            }
        }
    }

    #[test]
    fn every_single_bit_flip_is_detected() {
        let p = Packet { payload: b"covert-channel-payload-28".to_vec(), seq: 17 };
        let bits = encode_packet(&p);
        assert_eq!(bits.len(), 28 * 8);
        for i in 0..bits.len() {
            let mut corrupted = bits.clone();
            corrupted[i] = !corrupted[i];
            assert!(
                decode_packet(&corrupted, 28).is_err(),
                "flip at bit {i} slipped through"
            );
        }
    }

    #[test]
    fn wrong_length_rejected() {
        let p = Packet { payload: vec![0; 2], seq: 0 };
        let bits = encode_packet(&p);
        assert!(matches!(
            decode_packet(&bits, 6),
            Err(FrameError::Length { .. })
        ));
    }

    #[test]
    fn bit_order_is_lsb_first() {
        // payload 0x01 -> first wire bit set, next seven clear.
        let p = Packet { payload: vec![0x01], seq: 0 };
        let bits = encode_packet(&p);
        assert!(bits[0]);
        assert!(!bits[1..8].iter().any(|&b| b));
    }
}
