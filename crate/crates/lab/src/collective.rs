//! Chunked allreduce over a [`Transport`], in three phases:
//!
//! 1. gather: every worker sends chunk `j` of its tensor to worker `j`;
//! 2. average: each owner reduces its chunk (for compressed input: average
//!    the decompressed chunks, then compress again with its residual);
//! 3. scatter: each owner sends its reduced chunk to every other worker.
//!
//! Chunks destined for oneself never touch the wire, and workers that own no
//! coordinates neither receive gathers nor send scatters.

use onebit_core::optimizer::server_aggregate_slice;
use onebit_core::topology::dense_average;
use onebit_core::wire::{MessageKind, WireMessage};
use onebit_core::{ChunkedTensor, CompressedTensor, DenseVector, FpAccounting, Phase, Topology, VolumeMeter};

use crate::error::{LabError, Result};
use crate::transport::Transport;

pub struct Collective<T: Transport> {
    transport: T,
    topology: Topology,
    meter: VolumeMeter,
    step: u64,
}

impl<T: Transport> Collective<T> {
    pub fn new(transport: T, dim: usize, accounting: FpAccounting) -> Result<Self> {
        let topology = Topology::new(transport.size(), dim)?;
        let meter = VolumeMeter::new(transport.rank(), accounting);
        Ok(Self {
            transport,
            topology,
            meter,
            step: 0,
        })
    }

    pub fn rank(&self) -> usize {
        self.transport.rank()
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn meter(&self) -> &VolumeMeter {
        &self.meter
    }

    pub fn into_parts(self) -> (T, VolumeMeter) {
        (self.transport, self.meter)
    }

    /// Close the current step and return the bytes this worker sent in it.
    pub fn end_step(&mut self, phase: Phase) -> u64 {
        self.step += 1;
        self.meter.end_step(phase)
    }

    fn check_step(&self, step: u64) -> Result<()> {
        if step != self.step {
            return Err(LabError::Protocol {
                step,
                what: format!("collective is at step {}", self.step),
            });
        }
        Ok(())
    }

    fn send(&mut self, phase: Phase, peer: usize, msg: WireMessage) -> Result<()> {
        self.meter.record_sent(phase, &msg);
        self.transport.send(peer, msg.encode())?;
        Ok(())
    }

    fn recv(&mut self, phase: Phase, peer: usize, kind: MessageKind, dim: usize) -> Result<WireMessage> {
        let bytes = self.transport.recv(peer)?;
        let msg = WireMessage::decode(&bytes).map_err(|e| LabError::Protocol {
            step: self.step,
            what: format!("undecodable message from rank {peer}: {e}"),
        })?;
        if msg.kind() != kind || msg.dim() != dim {
            return Err(LabError::Protocol {
                step: self.step,
                what: format!(
                    "expected {kind:?} of dim {dim} from rank {peer}, got {:?} of dim {}",
                    msg.kind(),
                    msg.dim()
                ),
            });
        }
        self.meter.record_received(phase, &msg);
        Ok(msg)
    }

    /// Compressed allreduce of `local` (this worker's compensated momentum).
    /// `owned_residual` is the server residual for this worker's chunk.
    pub fn compressed_allreduce(
        &mut self,
        step: u64,
        phase: Phase,
        local: &CompressedTensor,
        owned_residual: &mut [f32],
    ) -> Result<ChunkedTensor> {
        self.check_step(step)?;
        let topo = self.topology;
        let me = self.rank();
        if local.dim() != topo.dim() {
            return Err(onebit_core::Error::DimMismatch {
                expected: topo.dim(),
                got: local.dim(),
            }
            .into());
        }
        let owners: Vec<usize> = topo.owners().collect();

        for &j in owners.iter().filter(|&&j| j != me) {
            let msg = WireMessage::Gather(local.slice(topo.chunk(j))?);
            self.send(phase, j, msg)?;
        }

        let mut reduced = None;
        if topo.owns_any(me) {
            let range = topo.chunk(me);
            let mut fragments = Vec::with_capacity(topo.workers());
            for peer in 0..topo.workers() {
                if peer == me {
                    fragments.push(local.slice(range.clone())?);
                } else {
                    match self.recv(phase, peer, MessageKind::Gather, range.len())? {
                        WireMessage::Gather(t) => fragments.push(t),
                        _ => unreachable!("kind checked in recv"),
                    }
                }
            }
            let chunk = server_aggregate_slice(&fragments, owned_residual)?;
            for peer in (0..topo.workers()).filter(|&p| p != me) {
                self.send(phase, peer, WireMessage::Scatter(chunk.clone()))?;
            }
            reduced = Some(chunk);
        }

        let mut chunks = Vec::with_capacity(owners.len());
        for &j in &owners {
            if j == me {
                chunks.push(reduced.take().expect("owner reduced its chunk"));
            } else {
                match self.recv(phase, j, MessageKind::Scatter, topo.chunk(j).len())? {
                    WireMessage::Scatter(t) => chunks.push(t),
                    _ => unreachable!("kind checked in recv"),
                }
            }
        }
        Ok(ChunkedTensor::new(topo, chunks)?)
    }

    /// Uncompressed allreduce (mean) with the same three-phase pattern,
    /// averaging in f64 in worker order.
    pub fn fp_allreduce(&mut self, step: u64, phase: Phase, local: &DenseVector) -> Result<DenseVector> {
        self.check_step(step)?;
        let topo = self.topology;
        let me = self.rank();
        if local.dim() != topo.dim() {
            return Err(onebit_core::Error::DimMismatch {
                expected: topo.dim(),
                got: local.dim(),
            }
            .into());
        }
        let owners: Vec<usize> = topo.owners().collect();

        for &j in owners.iter().filter(|&&j| j != me) {
            let msg = WireMessage::FpRaw(local.slice(topo.chunk(j))?);
            self.send(phase, j, msg)?;
        }

        let mut out = vec![0f32; topo.dim()];
        if topo.owns_any(me) {
            let range = topo.chunk(me);
            let mut parts: Vec<Vec<f32>> = Vec::with_capacity(topo.workers());
            for peer in 0..topo.workers() {
                if peer == me {
                    parts.push(local.as_slice()[range.clone()].to_vec());
                } else {
                    match self.recv(phase, peer, MessageKind::FpRaw, range.len())? {
                        WireMessage::FpRaw(v) => parts.push(v.into_vec()),
                        _ => unreachable!("kind checked in recv"),
                    }
                }
            }
            let refs: Vec<&[f32]> = parts.iter().map(Vec::as_slice).collect();
            let avg = dense_average(&refs);
            let avg_vec = DenseVector::new(avg)?;
            for peer in (0..topo.workers()).filter(|&p| p != me) {
                self.send(phase, peer, WireMessage::FpRaw(avg_vec.clone()))?;
            }
            out[range].copy_from_slice(avg_vec.as_slice());
        }

        for &j in owners.iter().filter(|&&j| j != me) {
            let range = topo.chunk(j);
            match self.recv(phase, j, MessageKind::FpRaw, range.len())? {
                WireMessage::FpRaw(v) => out[range].copy_from_slice(v.as_slice()),
                _ => unreachable!("kind checked in recv"),
            }
        }
        Ok(DenseVector::new(out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::InProcTransport;
    use onebit_core::compression::onebit_compress;
    use onebit_core::topology::aggregate_by_chunk;
    use onebit_core::{BufferRole, ErrorBuffer, SeededRng};
    use rand::Rng;
    use std::thread;

    fn uniform_vec(rng: &mut SeededRng, d: usize) -> Vec<f32> {
        (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
    }

    fn run_allreduce(n: usize, d: usize, steps: usize) {
        let mut rng = SeededRng::new((n * 1000 + d) as u64);
        let inputs: Vec<Vec<CompressedTensor>> = (0..steps)
            .map(|_| {
                (0..n)
                    .map(|_| onebit_compress(&DenseVector::new(uniform_vec(&mut rng, d)).unwrap()))
                    .collect()
            })
            .collect();

        let topo = Topology::new(n, d).unwrap();
        let mut oracle_err: Vec<ErrorBuffer> = (0..n)
            .map(|w| ErrorBuffer::new(topo.chunk(w).len().max(1), BufferRole::Server))
            .collect();
        let expected: Vec<ChunkedTensor> = inputs
            .iter()
            .map(|step| aggregate_by_chunk(topo, step, &mut oracle_err).unwrap())
            .collect();

        let handles: Vec<_> = InProcTransport::mesh(n)
            .into_iter()
            .map(|t| {
                let inputs = inputs.clone();
                thread::spawn(move || {
                    let me = t.rank();
                    let mut c = Collective::new(t, d, FpAccounting::Fp32).unwrap();
                    let mut residual = vec![0f32; c.topology().chunk(me).len()];
                    (0..inputs.len())
                        .map(|s| {
                            let out = c
                                .compressed_allreduce(s as u64, Phase::Compression, &inputs[s][me], &mut residual)
                                .unwrap();
                            c.end_step(Phase::Compression);
                            out
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), expected, "n={n} d={d}");
        }
    }

    #[test]
    fn matches_chunk_oracle() {
        for n in [1, 2, 3, 4, 8] {
            for d in [1, 5, 8, 1000] {
                run_allreduce(n, d, 3);
            }
        }
    }
}
