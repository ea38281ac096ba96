//! Bit-exact encoding of the messages exchanged by the allreduce collectives.
//!
//! ```text
//! compressed (GATHER = 0x01, SCATTER = 0x02):
//!   tag u8 | dim u32 LE | scale f32 LE | bitmap ceil(dim/8) bytes, MSB first, 1 = nonnegative
//! raw (FP_RAW = 0x03):
//!   tag u8 | dim u32 LE | dim * f32 LE
//! ```
//!
//! Example: GATHER of signs `[+, -, +]` with scale 0.5 is
//! `01 03 00 00 00 00 00 00 3f a0`.

use alloc::vec::Vec;

use crate::compression::{bitmap_len, CompressedTensor};
use crate::error::{Error, Result};
use crate::numerics::DenseVector;

pub const TAG_GATHER: u8 = 0x01;
pub const TAG_SCATTER: u8 = 0x02;
pub const TAG_FP_RAW: u8 = 0x03;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    Gather,
    Scatter,
    FpRaw,
}

impl MessageKind {
    pub fn tag(self) -> u8 {
        match self {
            MessageKind::Gather => TAG_GATHER,
            MessageKind::Scatter => TAG_SCATTER,
            MessageKind::FpRaw => TAG_FP_RAW,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Gather(CompressedTensor),
    Scatter(CompressedTensor),
    FpRaw(DenseVector),
}

/// Encoded size of a compressed message carrying `dim` signs.
pub const fn compressed_len(dim: usize) -> usize {
    1 + 4 + 4 + dim.div_ceil(8)
}

/// Encoded size of a raw message carrying `dim` floats.
pub const fn fp_raw_len(dim: usize) -> usize {
    1 + 4 + 4 * dim
}

impl WireMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            WireMessage::Gather(_) => MessageKind::Gather,
            WireMessage::Scatter(_) => MessageKind::Scatter,
            WireMessage::FpRaw(_) => MessageKind::FpRaw,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            WireMessage::Gather(t) | WireMessage::Scatter(t) => t.dim(),
            WireMessage::FpRaw(v) => v.dim(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        match self {
            WireMessage::Gather(t) | WireMessage::Scatter(t) => compressed_len(t.dim()),
            WireMessage::FpRaw(v) => fp_raw_len(v.dim()),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.kind().tag());
        out.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        match self {
            WireMessage::Gather(t) | WireMessage::Scatter(t) => {
                out.extend_from_slice(&t.scale().to_le_bytes());
                out.extend_from_slice(t.bitmap());
            }
            WireMessage::FpRaw(v) => {
                for f in v.as_slice() {
                    out.extend_from_slice(&f.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 {
            return Err(Error::Decode("message shorter than header"));
        }
        let dim = u32::from_le_bytes([bytes[1], bytes[2], bytes[3], bytes[4]]) as usize;
        if dim == 0 {
            return Err(Error::EmptyVector);
        }
        match bytes[0] {
            tag @ (TAG_GATHER | TAG_SCATTER) => {
                if bytes.len() != compressed_len(dim) {
                    return Err(Error::Decode("compressed message length does not match dim"));
                }
                let scale = f32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]);
                let t = CompressedTensor::from_bitmap(dim, scale, bytes[9..9 + bitmap_len(dim)].to_vec())?;
                Ok(if tag == TAG_GATHER {
                    WireMessage::Gather(t)
                } else {
                    WireMessage::Scatter(t)
                })
            }
            TAG_FP_RAW => {
                if bytes.len() != fp_raw_len(dim) {
                    return Err(Error::Decode("raw message length does not match dim"));
                }
                let values = bytes[5..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Ok(WireMessage::FpRaw(DenseVector::new(values)?))
            }
            _ => Err(Error::Decode("unknown message tag")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn documented_example() {
        let t = CompressedTensor::from_signs(&[true, false, true], 0.5).unwrap();
        let bytes = WireMessage::Gather(t).encode();
        assert_eq!(bytes, [0x01, 0x03, 0, 0, 0, 0, 0, 0, 0x3f, 0xa0]);
    }

    #[test]
    fn raw_layout() {
        let v = DenseVector::from_slice(&[1.0, -2.0]).unwrap();
        let bytes = WireMessage::FpRaw(v.clone()).encode();
        assert_eq!(bytes.len(), fp_raw_len(2));
        assert_eq!(&bytes[..5], &[0x03, 2, 0, 0, 0]);
        assert_eq!(&bytes[5..9], &1.0f32.to_le_bytes());
        assert_eq!(WireMessage::decode(&bytes).unwrap(), WireMessage::FpRaw(v));
    }

    #[test]
    fn lengths() {
        assert_eq!(compressed_len(1), 10);
        assert_eq!(compressed_len(8), 10);
        assert_eq!(compressed_len(9), 11);
        assert_eq!(fp_raw_len(3), 17);
    }

    #[test]
    fn decode_rejects_malformed() {
        assert!(WireMessage::decode(&[0x01, 1, 0]).is_err());
        assert!(WireMessage::decode(&[0x09, 1, 0, 0, 0, 0, 0, 0, 0, 0x80]).is_err());
        assert!(WireMessage::decode(&[0x01, 0, 0, 0, 0, 0, 0, 0, 0]).is_err());
        assert!(WireMessage::decode(&[0x01, 2, 0, 0, 0, 0, 0, 0, 0]).is_err());
        assert!(WireMessage::decode(&[0x03, 1, 0, 0, 0, 0, 0]).is_err());
        let mut nan = vec![0x03, 1, 0, 0, 0];
        nan.extend_from_slice(&f32::NAN.to_le_bytes());
        assert!(WireMessage::decode(&nan).is_err());
    }

    fn tensor() -> impl Strategy<Value = CompressedTensor> {
        (1usize..100, 0f32..1e6).prop_flat_map(|(d, scale)| {
            proptest::collection::vec(any::<bool>(), d)
                .prop_map(move |signs| CompressedTensor::from_signs(&signs, scale).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn compressed_round_trip(t in tensor(), scatter in any::<bool>()) {
            let msg = if scatter { WireMessage::Scatter(t) } else { WireMessage::Gather(t) };
            let bytes = msg.encode();
            prop_assert_eq!(bytes.len(), msg.encoded_len());
            prop_assert_eq!(WireMessage::decode(&bytes).unwrap(), msg);
        }
    }
}
