//! Versioned binary snapshot of a [`OneBitAdamState`].
//!
//! ```text
//! offset  size  field
//! 0       8     magic "1BADAMCK"
//! 8       4     version, u32 LE (currently 1)
//! 12      1     phase: 0 = warmup, 1 = compression
//! 13      8     step t, u64 LE
//! 21      8     warmup steps T_w, u64 LE
//! 29      4     dim, u32 LE
//! 33      ...   6 * dim f32 LE: x, m, v, v_frozen, worker residual, server residual
//! ```

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::DenseVector;
use crate::optimizer::{OneBitAdamState, Phase};

pub const MAGIC: [u8; 8] = *b"1BADAMCK";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 33;

pub fn encode(state: &OneBitAdamState) -> Vec<u8> {
    let dim = state.dim();
    let mut out = Vec::with_capacity(HEADER_LEN + 24 * dim);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match state.phase() {
        Phase::Warmup => 0,
        Phase::Compression => 1,
    });
    out.extend_from_slice(&state.step().to_le_bytes());
    out.extend_from_slice(&state.warmup_steps().to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for v in [
        state.x(),
        state.m(),
        state.v(),
        state.v_frozen(),
        state.worker_error().delta(),
        state.server_error().delta(),
    ] {
        for f in v.as_slice() {
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    out
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn le_u64(b: &[u8]) -> u64 {
    let mut a = [0u8; 8];
    a.copy_from_slice(&b[..8]);
    u64::from_le_bytes(a)
}

pub fn decode(bytes: &[u8]) -> Result<OneBitAdamState> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Decode("checkpoint truncated"));
    }
    if bytes[..8] != MAGIC {
        return Err(Error::Decode("bad checkpoint magic"));
    }
    if le_u32(&bytes[8..12]) != VERSION {
        return Err(Error::Decode("unsupported checkpoint version"));
    }
    let phase = match bytes[12] {
        0 => Phase::Warmup,
        1 => Phase::Compression,
        _ => return Err(Error::Decode("bad phase byte")),
    };
    let t = le_u64(&bytes[13..21]);
    let warmup = le_u64(&bytes[21..29]);
    let dim = le_u32(&bytes[29..33]) as usize;
    if dim == 0 {
        return Err(Error::EmptyVector);
    }
    if bytes.len() != HEADER_LEN + 24 * dim {
        return Err(Error::Decode("checkpoint length does not match dim"));
    }
    let mut vectors = bytes[HEADER_LEN..].chunks_exact(4 * dim).map(|block| {
        DenseVector::new(
            block
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )
    });
    let mut next = || vectors.next().expect("six blocks");
    OneBitAdamState::from_parts(phase, t, warmup, next()?, next()?, next()?, next()?, next()?, next()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::AdamHyper;

    fn sample_state() -> OneBitAdamState {
        let h = AdamHyper::default();
        let mut s = OneBitAdamState::new(DenseVector::from_slice(&[0.5, -1.0, 2.0]).unwrap(), 2);
        let g = DenseVector::from_slice(&[0.1, -0.2, 0.3]).unwrap();
        s.adam_step(&g, &h).unwrap();
        s.adam_step(&g, &h).unwrap();
        s.freeze_variance().unwrap();
        let ct = s.compression_step_local(&g, &h).unwrap();
        s.apply_global(&ct, &h).unwrap();
        s
    }

    #[test]
    fn round_trip() {
        let s = sample_state();
        let bytes = encode(&s);
        assert_eq!(bytes.len(), HEADER_LEN + 24 * 3);
        assert_eq!(&bytes[..8], b"1BADAMCK");
        assert_eq!(bytes[12], 1);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.x(), s.x());
        assert_eq!(back.phase(), s.phase());
        assert_eq!(back.theory().v_min, s.theory().v_min);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&sample_state());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(decode(&bad).is_err());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[12] = 7;
        assert!(decode(&bad).is_err());
        let mut bad = bytes;
        let nan = f32::NAN.to_le_bytes();
        bad[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&nan);
        assert!(decode(&bad).is_err());
    }
}
