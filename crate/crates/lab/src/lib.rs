//! Experiment harness for error-compensated 1-bit Adam: transports, the
//! chunked allreduce, the distributed training loop, metrics output, presets
//! and the verification suites behind the `onebit` binary.

pub mod collective;
pub mod config;
pub mod error;
pub mod harness;
pub mod launch;
pub mod output;
pub mod presets;
pub mod transport;
pub mod verify;

pub use config::{OptimizerKind, Overrides, RunConfig, TransportKind};
pub use error::{LabError, Result};
pub use harness::{run_training, RunRecord, StepRow};
