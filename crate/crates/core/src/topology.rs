//! Chunk ownership for the distributed server role.
//!
//! Worker `i` owns coordinates `[i * c, min((i + 1) * c, d))` with
//! `c = ceil(d / n)`. When `d < n` the trailing workers own nothing.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::compression::{CompressedTensor, ErrorBuffer};
use crate::error::{Error, Result};
use crate::numerics::DenseVector;
use crate::optimizer::server_aggregate;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    workers: usize,
    dim: usize,
}

impl Topology {
    pub fn new(workers: usize, dim: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Topology("need at least one worker"));
        }
        if dim == 0 {
            return Err(Error::Topology("model dimension must be positive"));
        }
        Ok(Self { workers, dim })
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn chunk_len(&self) -> usize {
        self.dim.div_ceil(self.workers)
    }

    /// Coordinates owned by `worker`; empty when the worker owns nothing.
    pub fn chunk(&self, worker: usize) -> Range<usize> {
        let c = self.chunk_len();
        let start = (worker * c).min(self.dim);
        let end = ((worker + 1) * c).min(self.dim);
        start..end
    }

    pub fn owns_any(&self, worker: usize) -> bool {
        !self.chunk(worker).is_empty()
    }

    pub fn owner_of(&self, coord: usize) -> usize {
        coord / self.chunk_len()
    }

    /// Workers that own a non-empty chunk, in id order.
    pub fn owners(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.workers).filter(|&w| self.owns_any(w))
    }
}

/// The reassembled output of a compressed allreduce: one compressed chunk
/// per owning worker, each with its own scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedTensor {
    topology: Topology,
    chunks: Vec<CompressedTensor>,
}

impl ChunkedTensor {
    /// `chunks` must be given in owner order with the lengths the topology assigns.
    pub fn new(topology: Topology, chunks: Vec<CompressedTensor>) -> Result<Self> {
        let owners: Vec<usize> = topology.owners().collect();
        if owners.len() != chunks.len() {
            return Err(Error::DimMismatch {
                expected: owners.len(),
                got: chunks.len(),
            });
        }
        for (&w, c) in owners.iter().zip(&chunks) {
            let want = topology.chunk(w).len();
            if c.dim() != want {
                return Err(Error::DimMismatch {
                    expected: want,
                    got: c.dim(),
                });
            }
        }
        Ok(Self { topology, chunks })
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn chunks(&self) -> &[CompressedTensor] {
        &self.chunks
    }

    pub fn decompress(&self) -> DenseVector {
        let mut out = vec![0.0; self.topology.dim()];
        for (w, c) in self.topology.owners().zip(&self.chunks) {
            c.decompress_into(&mut out[self.topology.chunk(w)]);
        }
        DenseVector::from_vec_unchecked(out)
    }

    /// Single-chunk view, available when one worker owns everything.
    pub fn as_single(&self) -> Option<&CompressedTensor> {
        match self.chunks.as_slice() {
            [only] => Some(only),
            _ => None,
        }
    }
}

/// What the distributed collective must produce, computed in one place:
/// slice every worker's tensor per chunk and aggregate each chunk with its
/// owner's residual. `server_errors[w]` has length `topology.chunk(w).len()`
/// and is ignored (may be any length) for workers that own nothing.
pub fn aggregate_by_chunk(
    topology: Topology,
    inputs: &[CompressedTensor],
    server_errors: &mut [ErrorBuffer],
) -> Result<ChunkedTensor> {
    if inputs.len() != topology.workers() || server_errors.len() != topology.workers() {
        return Err(Error::Topology("one input and one residual per worker required"));
    }
    if let Some(bad) = inputs.iter().find(|t| t.dim() != topology.dim()) {
        return Err(Error::DimMismatch {
            expected: topology.dim(),
            got: bad.dim(),
        });
    }
    let mut chunks = Vec::new();
    for w in topology.owners().collect::<Vec<_>>() {
        let range = topology.chunk(w);
        let fragments = inputs
            .iter()
            .map(|t| t.slice(range.clone()))
            .collect::<Result<Vec<_>>>()?;
        chunks.push(server_aggregate(&fragments, &mut server_errors[w])?);
    }
    ChunkedTensor::new(topology, chunks)
}

/// Mean of dense inputs, accumulated in f64 in worker order.
pub fn dense_average(inputs: &[&[f32]]) -> Vec<f32> {
    let dim = inputs.first().map_or(0, |v| v.len());
    let mut acc = vec![0f64; dim];
    for v in inputs {
        for (a, &x) in acc.iter_mut().zip(v.iter()) {
            *a += f64::from(x);
        }
    }
    let n = inputs.len() as f64;
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::{onebit_compress, BufferRole};

    #[test]
    fn chunks_cover_and_are_disjoint() {
        for n in 1..=9 {
            for d in [1, 2, 5, 7, 8, 9, 1000, 1001] {
                let t = Topology::new(n, d).unwrap();
                let mut covered = vec![0u8; d];
                for w in 0..n {
                    for i in t.chunk(w) {
                        covered[i] += 1;
                        assert_eq!(t.owner_of(i), w);
                    }
                }
                assert!(covered.iter().all(|&c| c == 1), "n={n} d={d}");
            }
        }
    }

    #[test]
    fn uneven_chunks() {
        let t = Topology::new(3, 5).unwrap();
        assert_eq!(t.chunk(0), 0..2);
        assert_eq!(t.chunk(1), 2..4);
        assert_eq!(t.chunk(2), 4..5);
        let t = Topology::new(8, 5).unwrap();
        assert_eq!(t.owners().count(), 5);
        assert!(t.chunk(6).is_empty());
        assert!(Topology::new(0, 3).is_err());
        assert!(Topology::new(3, 0).is_err());
    }

    #[test]
    fn single_worker_aggregation_is_server_aggregate() {
        let t = Topology::new(1, 3).unwrap();
        let input = onebit_compress(&DenseVector::from_slice(&[0.5, -0.2, 0.1]).unwrap());
        let mut errs = vec![ErrorBuffer::new(3, BufferRole::Server)];
        let out = aggregate_by_chunk(t, &[input.clone()], &mut errs).unwrap();
        let mut e = ErrorBuffer::new(3, BufferRole::Server);
        assert_eq!(out.as_single().unwrap(), &server_aggregate(&[input], &mut e).unwrap());
        assert_eq!(errs[0], e);
    }

    #[test]
    fn two_workers_two_coords() {
        let t = Topology::new(2, 2).unwrap();
        let a = CompressedTensor::from_signs(&[true, false], 1.0).unwrap();
        let b = CompressedTensor::from_signs(&[true, true], 1.0).unwrap();
        let mut errs = vec![ErrorBuffer::new(1, BufferRole::Server), ErrorBuffer::new(1, BufferRole::Server)];
        let out = aggregate_by_chunk(t, &[a, b], &mut errs).unwrap();
        // chunk 0 averages to 1, chunk 1 to 0
        assert_eq!(out.decompress().as_slice(), &[1.0, 0.0]);
        assert!(errs.iter().all(|e| e.delta().is_zero()));
    }

    #[test]
    fn dense_average_examples() {
        assert_eq!(dense_average(&[&[2.0], &[4.0]]), vec![3.0]);
        assert_eq!(dense_average(&[&[1.5, -1.0]]), vec![1.5, -1.0]);
    }
}
