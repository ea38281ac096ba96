//! Dense f32 vectors and the seeded random stream shared by every other module.
//!
//! Element-wise arithmetic is single precision. Reductions (norms, averages)
//! accumulate in f64 and round once at the end, which keeps n-way averages
//! insensitive to summation order within one ulp.

use alloc::vec::Vec;
use core::ops::Range;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Flat parameter / gradient / moment storage. Always non-empty and finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector(Vec<f32>);

impl DenseVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyVector);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[f32]) -> Result<Self> {
        Self::new(values.to_vec())
    }

    /// # Panics
    /// If `dim == 0`.
    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "DenseVector dimension must be at least 1");
        Self(alloc::vec![0.0; dim])
    }

    /// Skips validation; callers inside the crate guarantee the invariants.
    pub(crate) fn from_vec_unchecked(values: Vec<f32>) -> Self {
        debug_assert!(!values.is_empty());
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Copy of the coordinates in `range`.
    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.dim() || range.start >= range.end {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: range.end,
            });
        }
        Ok(Self(self.0[range].to_vec()))
    }

    pub(crate) fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(Error::DimMismatch {
                expected,
                got: self.dim(),
            });
        }
        Ok(())
    }
}

/// Where the stabilizing constant sits in the Adam denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EtaMode {
    /// `sqrt(v + eta)`
    #[default]
    Inside,
    /// `sqrt(v) + eta`
    Outside,
}

pub(crate) fn sum_of_squares(values: &[f32]) -> f64 {
    values.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
}

/// Euclidean norm, accumulated in f64.
pub fn l2_norm(v: &DenseVector) -> f32 {
    libm::sqrt(sum_of_squares(v.as_slice())) as f32
}

pub fn elementwise_square(v: &DenseVector) -> DenseVector {
    DenseVector::from_vec_unchecked(v.as_slice().iter().map(|&x| x * x).collect())
}

#[inline]
pub(crate) fn denominator(v: f32, eta: f32, mode: EtaMode) -> f32 {
    match mode {
        EtaMode::Inside => libm::sqrtf(v + eta),
        EtaMode::Outside => libm::sqrtf(v) + eta,
    }
}

/// `m / sqrt(v + eta)` or `m / (sqrt(v) + eta)`, element-wise.
pub fn precondition(m: &DenseVector, v: &DenseVector, eta: f32, mode: EtaMode) -> Result<DenseVector> {
    m.check_dim(v.dim())?;
    let mut out = Vec::with_capacity(m.dim());
    for (index, (&mi, &vi)) in m.as_slice().iter().zip(v.as_slice()).enumerate() {
        if vi < 0.0 {
            return Err(Error::NegativeVariance { index, value: vi });
        }
        let q = mi / denominator(vi, eta, mode);
        if !q.is_finite() {
            return Err(Error::NonFinite { index });
        }
        out.push(q);
    }
    Ok(DenseVector::from_vec_unchecked(out))
}

/// Deterministic random stream.
///
/// Backed by ChaCha8 (rand_chacha 0.9). The keystream is specified by the
/// algorithm, so identical `(seed, stream)` pairs produce identical draws on
/// every platform. Each worker owns its own instance.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    draws: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::for_stream(seed, 0)
    }

    /// Independent stream derived from the same seed, e.g. one per worker.
    pub fn for_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            draws: 0,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u64 {
        self.draws
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.draws += 1;
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.draws += 2;
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.draws += dst.len().div_ceil(4) as u64;
        self.inner.fill_bytes(dst)
    }
}
