use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("malformed {what} at line {line}: {msg}")]
    Format { what: &'static str, line: usize, msg: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}

/// Failures on the framed serial link between driver and device.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("reserved opcode in frame {0:#06x}")]
    ReservedOpcode(u16),
    #[error("nonzero bits [13:10] in frame {0:#06x}")]
    NonzeroPadding(u16),
    #[error("control frame {0:#06x} carries a payload")]
    UnexpectedPayload(u16),
    #[error("event channel {0} out of range")]
    ChannelOutOfRange(u16),
    #[error("unexpected message tag {0:#04x}")]
    BadTag(u8),
    #[error("checksum mismatch: message says {stated:#06x}, computed {computed:#06x}")]
    Checksum { stated: u16, computed: u16 },
    #[error("message length {got}, expected {expected}")]
    Length { got: usize, expected: usize },
    #[error("timed out waiting for result")]
    Timeout,
    #[error("transport: {0}")]
    Transport(String),
}
