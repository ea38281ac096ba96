use std::io;

use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_TRANSPORT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer {peer} disconnected")]
    Disconnected { peer: usize },
    #[error("timed out waiting for peer {peer}")]
    Timeout { peer: usize },
    #[error("peer {0} is outside the mesh")]
    BadPeer(usize),
    #[error("empty payloads cannot be framed")]
    EmptyPayload,
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid configuration:\n{0}")]
    Config(String),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("protocol violation at step {step}: {what}")]
    Protocol { step: u64, what: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Core(onebit_core::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("worker process failed: {0}")]
    Worker(String),
}

impl From<onebit_core::Error> for LabError {
    fn from(e: onebit_core::Error) -> Self {
        match e {
            onebit_core::Error::NonFinite { .. } | onebit_core::Error::NegativeVariance { .. } => {
                LabError::Numeric(e.to_string())
            }
            other => LabError::Core(other),
        }
    }
}

impl LabError {
    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        LabError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => EXIT_CONFIG,
            LabError::Transport(_) | LabError::Protocol { .. } | LabError::Worker(_) => EXIT_TRANSPORT,
            LabError::Numeric(_) => EXIT_NUMERIC,
            LabError::Core(_) | LabError::Io { .. } => 1,
        }
    }

    /// Whether this error is only a consequence of another worker failing.
    pub fn is_secondary(&self) -> bool {
        matches!(
            self,
            LabError::Transport(TransportError::Disconnected { .. } | TransportError::Timeout { .. })
        )
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
