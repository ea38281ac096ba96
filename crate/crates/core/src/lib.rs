//! Error-compensated 1-bit Adam, without IO.
//!
//! Everything in this crate is `no_std` + `alloc`: dense vector arithmetic,
//! 1-bit compression with error feedback, the two-phase optimizer state,
//! the wire and checkpoint codecs, chunk ownership for the compressed
//! allreduce, communication-volume arithmetic, synthetic optimization
//! problems and the diagnostic probes. Transports, the training loop and the
//! CLI live in the `onebit-lab` crate.

#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod checkpoint;
pub mod compression;
pub mod error;
pub mod numerics;
pub mod optimizer;
pub mod probe;
pub mod problem;
pub mod topology;
pub mod volume;
pub mod wire;

pub use compression::{
    compress_with_error_feedback, decompress, naive_compress, onebit_compress, BufferRole, CompressedTensor,
    ErrorBuffer,
};
pub use error::{Error, Result};
pub use numerics::{elementwise_square, l2_norm, precondition, DenseVector, EtaMode, SeededRng};
pub use optimizer::{
    momentum_sgd_step, server_aggregate, AdamHyper, LrSchedule, OneBitAdamState, Phase, TheoryParams,
};
pub use probe::{speedup_probe, variance_stability_trace, SpeedupTable};
pub use problem::{Problem, ProblemKind, ProblemSpec};
pub use topology::{ChunkedTensor, Topology};
pub use volume::{FpAccounting, PhaseCounters, Ratio, VolumeMeter, VolumeReport};
pub use wire::WireMessage;
