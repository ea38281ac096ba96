//! 1-bit sign compression with a norm-preserving scale, and the error-feedback
//! residual bookkeeping around it.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{Error, Result};
use crate::numerics::{sum_of_squares, DenseVector};

/// Sign bitmap plus one scaling factor.
///
/// Bits are packed most-significant-bit first, exactly as they travel on the
/// wire; bit set means the coordinate was nonnegative. Unused low bits of the
/// last byte are always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedTensor {
    dim: usize,
    scale: f32,
    bitmap: Vec<u8>,
}

pub(crate) fn bitmap_len(dim: usize) -> usize {
    dim.div_ceil(8)
}

impl CompressedTensor {
    /// Build from a packed bitmap. Rejects a wrong bitmap length, nonzero
    /// padding bits, and negative or non-finite scales.
    pub fn from_bitmap(dim: usize, scale: f32, bitmap: Vec<u8>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyVector);
        }
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::Decode("scale must be finite and nonnegative"));
        }
        if bitmap.len() != bitmap_len(dim) {
            return Err(Error::DimMismatch {
                expected: bitmap_len(dim),
                got: bitmap.len(),
            });
        }
        let tail = dim % 8;
        if tail != 0 && bitmap[bitmap.len() - 1] & (0xFF >> tail) != 0 {
            return Err(Error::Decode("nonzero padding bits in bitmap"));
        }
        Ok(Self { dim, scale, bitmap })
    }

    pub fn from_signs(signs: &[bool], scale: f32) -> Result<Self> {
        let mut bitmap = vec![0u8; bitmap_len(signs.len())];
        for (i, _) in signs.iter().enumerate().filter(|(_, s)| **s) {
            bitmap[i / 8] |= 0x80 >> (i % 8);
        }
        Self::from_bitmap(signs.len(), scale, bitmap)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn bitmap(&self) -> &[u8] {
        &self.bitmap
    }

    /// `true` when coordinate `i` decompresses to `+scale`.
    pub fn sign(&self, i: usize) -> bool {
        self.bitmap[i / 8] & (0x80 >> (i % 8)) != 0
    }

    pub fn signs(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.dim).map(|i| self.sign(i))
    }

    /// The coordinates in `range`, keeping this tensor's scale.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.dim || range.start >= range.end {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: range.end,
            });
        }
        let signs: Vec<bool> = range.map(|i| self.sign(i)).collect();
        Self::from_signs(&signs, self.scale)
    }

    pub(crate) fn decompress_into(&self, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.dim);
        for (i, o) in out.iter_mut().enumerate() {
            *o = if self.sign(i) { self.scale } else { -self.scale };
        }
    }
}

/// Which side of the protocol owns a residual buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferRole {
    Worker,
    Server,
}

/// Compression residual carried from one step to the next. Starts at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorBuffer {
    delta: DenseVector,
    role: BufferRole,
}

impl ErrorBuffer {
    pub fn new(dim: usize, role: BufferRole) -> Self {
        Self {
            delta: DenseVector::zeros(dim),
            role,
        }
    }

    /// Restore a buffer, e.g. from a checkpoint.
    pub fn with_delta(delta: DenseVector, role: BufferRole) -> Self {
        Self { delta, role }
    }

    pub fn delta(&self) -> &DenseVector {
        &self.delta
    }

    pub fn role(&self) -> BufferRole {
        self.role
    }

    pub fn dim(&self) -> usize {
        self.delta.dim()
    }

    /// Mutable view of the residual coordinates; the length cannot change.
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        self.delta.as_mut_slice()
    }

    pub fn reset(&mut self) {
        self.delta.as_mut_slice().fill(0.0);
    }
}

/// Scale that makes the decompressed vector keep the input's l2 norm:
/// `||v|| / ||sign(v)|| = ||v|| / sqrt(dim)`.
fn scaling_factor(v: &[f32]) -> f32 {
    libm::sqrt(sum_of_squares(v) / v.len() as f64) as f32
}

pub(crate) fn compress_slice(v: &[f32]) -> CompressedTensor {
    let mut bitmap = vec![0u8; bitmap_len(v.len())];
    for (i, _) in v.iter().enumerate().filter(|(_, x)| **x >= 0.0) {
        bitmap[i / 8] |= 0x80 >> (i % 8);
    }
    CompressedTensor {
        dim: v.len(),
        scale: scaling_factor(v),
        bitmap,
    }
}

/// Compress `v + lr_scale * delta` and leave the new residual in `delta`.
pub(crate) fn compress_feedback_slice(v: &[f32], delta: &mut [f32], lr_scale: f32) -> CompressedTensor {
    debug_assert_eq!(v.len(), delta.len());
    for (d, &x) in delta.iter_mut().zip(v) {
        *d = x + lr_scale * *d;
    }
    let out = compress_slice(delta);
    for (i, d) in delta.iter_mut().enumerate() {
        *d -= if out.sign(i) { out.scale } else { -out.scale };
    }
    out
}

/// Sign bitmap (`v_i >= 0` sets the bit) and l2-preserving scale.
pub fn onebit_compress(v: &DenseVector) -> CompressedTensor {
    compress_slice(v.as_slice())
}

pub fn decompress(ct: &CompressedTensor) -> DenseVector {
    let mut out = vec![0.0; ct.dim];
    ct.decompress_into(&mut out);
    DenseVector::from_vec_unchecked(out)
}

/// Error-compensated compression: compresses `v + lr_scale * delta` and
/// stores the new residual `compensated - decompress(result)` in `buf`.
///
/// `lr_scale` is `gamma_t / gamma_{t-1}`; it is 1 under a constant rate.
pub fn compress_with_error_feedback(
    v: &DenseVector,
    buf: &mut ErrorBuffer,
    lr_scale: f32,
) -> Result<CompressedTensor> {
    v.check_dim(buf.dim())?;
    if !(lr_scale > 0.0 && lr_scale.is_finite()) {
        return Err(Error::Hyper("lr_scale must be positive and finite"));
    }
    Ok(compress_feedback_slice(v.as_slice(), buf.as_mut_slice(), lr_scale))
}

/// Error-compensated gradient compression used by the naive compressed Adam
/// baseline. Same mechanics as [`compress_with_error_feedback`] with unit scale.
pub fn naive_compress(g: &DenseVector, buf: &mut ErrorBuffer) -> Result<CompressedTensor> {
    compress_with_error_feedback(g, buf, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_norm;
    use proptest::prelude::*;

    fn dv(v: &[f32]) -> DenseVector {
        DenseVector::from_slice(v).unwrap()
    }

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn compress_examples() {
        let ct = onebit_compress(&dv(&[1.0, -1.0]));
        assert_eq!(ct.signs().collect::<Vec<_>>(), [true, false]);
        assert_eq!(ct.scale(), 1.0);
        assert_eq!(decompress(&ct).as_slice(), &[1.0, -1.0]);

        let ct = onebit_compress(&DenseVector::zeros(4));
        assert!(ct.signs().all(|s| s));
        assert_eq!(ct.scale(), 0.0);

        // sqrt(0.34) / sqrt(2) = 0.412310562561766...
        let ct = onebit_compress(&dv(&[0.5, -0.3]));
        assert_eq!(ct.signs().collect::<Vec<_>>(), [true, false]);
        assert!((ct.scale() - 0.412_310_56).abs() < 1e-7);
    }

    #[test]
    fn decompress_examples() {
        let ct = CompressedTensor::from_signs(&[true, false], 1.0).unwrap();
        assert_eq!(decompress(&ct).as_slice(), &[1.0, -1.0]);
        let ct = CompressedTensor::from_signs(&[false, true, false], 0.0).unwrap();
        assert!(decompress(&ct).is_zero());
        let ct = CompressedTensor::from_signs(&[true, true, false], 0.5).unwrap();
        assert_eq!(decompress(&ct).as_slice(), &[0.5, 0.5, -0.5]);
    }

    #[test]
    fn bitmap_is_msb_first() {
        let signs = [true, false, false, false, false, false, false, true, true];
        let ct = CompressedTensor::from_signs(&signs, 1.0).unwrap();
        assert_eq!(ct.bitmap(), &[0x81, 0x80]);
    }

    #[test]
    fn from_bitmap_rejects_bad_input() {
        assert!(CompressedTensor::from_bitmap(3, 1.0, vec![0xE0]).is_ok());
        assert!(CompressedTensor::from_bitmap(3, 1.0, vec![0xE1]).is_err());
        assert!(CompressedTensor::from_bitmap(9, 1.0, vec![0xFF]).is_err());
        assert!(CompressedTensor::from_bitmap(1, -1.0, vec![0x80]).is_err());
        assert!(CompressedTensor::from_bitmap(0, 1.0, vec![]).is_err());
    }

    #[test]
    fn slice_keeps_scale() {
        let ct = onebit_compress(&dv(&[1.0, -2.0, 3.0, -4.0, 5.0]));
        let s = ct.slice(1..4).unwrap();
        assert_eq!(s.scale(), ct.scale());
        assert_eq!(s.signs().collect::<Vec<_>>(), [false, true, false]);
        assert!(ct.slice(3..6).is_err());
    }

    #[test]
    fn feedback_with_zero_residual_is_plain_compression() {
        let v = dv(&[0.25, -1.5, 0.0, 3.0]);
        let mut buf = ErrorBuffer::new(4, BufferRole::Worker);
        let ct = compress_with_error_feedback(&v, &mut buf, 1.0).unwrap();
        assert_eq!(ct, onebit_compress(&v));
        let d = decompress(&ct);
        let expected: Vec<f32> = v.as_slice().iter().zip(d.as_slice()).map(|(a, b)| a - b).collect();
        assert_eq!(buf.delta().as_slice(), expected.as_slice());
    }

    #[test]
    fn feedback_representable_input_leaves_no_residual() {
        let mut buf = ErrorBuffer::new(2, BufferRole::Worker);
        let ct = compress_with_error_feedback(&dv(&[1.0, -1.0]), &mut buf, 1.0).unwrap();
        assert_eq!(ct.scale(), 1.0);
        assert_eq!(ct.signs().collect::<Vec<_>>(), [true, false]);
        assert!(buf.delta().is_zero());
    }

    #[test]
    fn feedback_example_with_history() {
        // compensated [0.6, -0.2]; scale sqrt(0.40)/sqrt(2) = 0.447213595...
        // residual [0.152786404..., 0.247213595...]
        let mut buf = ErrorBuffer::with_delta(dv(&[0.1, 0.1]), BufferRole::Worker);
        let ct = compress_with_error_feedback(&dv(&[0.5, -0.3]), &mut buf, 1.0).unwrap();
        assert!((ct.scale() - 0.447_213_6).abs() < 1e-7);
        assert_eq!(ct.signs().collect::<Vec<_>>(), [true, false]);
        assert!(close(buf.delta().as_slice(), &[0.152_786_4, 0.247_213_6], 1e-7));

        let mut naive_buf = ErrorBuffer::with_delta(dv(&[0.1, 0.1]), BufferRole::Worker);
        let naive = naive_compress(&dv(&[0.5, -0.3]), &mut naive_buf).unwrap();
        assert_eq!(naive, ct);
        assert_eq!(naive_buf, buf);
    }

    #[test]
    fn lr_scale_weights_history() {
        let mut buf = ErrorBuffer::with_delta(dv(&[0.2, -0.4]), BufferRole::Worker);
        compress_with_error_feedback(&dv(&[1.0, 1.0]), &mut buf, 0.5).unwrap();
        // compensated [1.1, 0.8] -> scale sqrt((1.21 + 0.64) / 2)
        let scale = libm::sqrt((1.21 + 0.64) / 2.0) as f32;
        assert!(close(buf.delta().as_slice(), &[1.1 - scale, 0.8 - scale], 1e-6));
    }

    #[test]
    fn feedback_errors() {
        let mut buf = ErrorBuffer::new(3, BufferRole::Worker);
        assert_eq!(
            compress_with_error_feedback(&dv(&[1.0]), &mut buf, 1.0),
            Err(Error::DimMismatch { expected: 3, got: 1 })
        );
        assert!(compress_with_error_feedback(&dv(&[1.0, 2.0, 3.0]), &mut buf, 0.0).is_err());
    }

    fn ulp(x: f32) -> f32 {
        let x = x.abs().max(f32::MIN_POSITIVE);
        f32::from_bits(x.to_bits() + 1) - x
    }

    proptest! {
        #[test]
        fn magnitude_is_preserved(
            v in prop_oneof![1usize..3, 31usize..33, Just(1000usize)]
                .prop_flat_map(|d| proptest::collection::vec(-10f32..10.0, d))
        ) {
            let x = DenseVector::new(v).unwrap();
            let n = l2_norm(&x);
            let back = l2_norm(&decompress(&onebit_compress(&x)));
            prop_assert!((back - n).abs() <= 1e-5 * n);
        }

        #[test]
        fn residual_identity_holds(
            (v, old) in (1usize..64).prop_flat_map(|d| (
                proptest::collection::vec(-10f32..10.0, d),
                proptest::collection::vec(-1f32..1.0, d),
            )),
            lr_scale in 0.1f32..2.0,
        ) {
            let x = DenseVector::new(v).unwrap();
            let old = DenseVector::new(old).unwrap();
            let mut buf = ErrorBuffer::with_delta(old.clone(), BufferRole::Worker);
            let ct = compress_with_error_feedback(&x, &mut buf, lr_scale).unwrap();
            let d = decompress(&ct);
            for i in 0..x.dim() {
                let lhs = d.as_slice()[i] + buf.delta().as_slice()[i];
                let rhs = x.as_slice()[i] + lr_scale * old.as_slice()[i];
                prop_assert!((lhs - rhs).abs() <= 2.0 * ulp(rhs.abs().max(d.as_slice()[i].abs())));
            }
        }

        #[test]
        fn residual_stays_bounded_on_constant_input(
            v in (2usize..200).prop_flat_map(|d| proptest::collection::vec(-10f32..10.0, d))
        ) {
            let x = DenseVector::new(v).unwrap();
            let bound = 2.0 * l2_norm(&x);
            let mut buf = ErrorBuffer::new(x.dim(), BufferRole::Worker);
            for _ in 0..100 {
                compress_with_error_feedback(&x, &mut buf, 1.0).unwrap();
                prop_assert!(l2_norm(buf.delta()) < bound);
            }
        }
    }
}
