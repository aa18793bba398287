use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An index, length or size is outside the domain an operation accepts.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    /// The working set of one DPU's tasklets does not fit its scratchpad.
    #[error("WRAM budget exceeded on DPU {dpu}: {needed} bytes needed, {available} available")]
    WramBudget { dpu: usize, needed: u64, available: u64 },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// An operation was called in the wrong lifecycle state.
    #[error("state error: {0}")]
    State(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    /// The two servers disagree on the database they serve.
    #[error("consistency error: {0}")]
    Consistency(String),

    /// A server worker failed while answering.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("unknown query id {0}")]
    Lookup(u64),

    /// The remote end answered with an ERROR frame.
    #[error("remote error {code}: {msg}")]
    Remote { code: u16, msg: String },

    #[error("transport error: {0}")]
    Transport(#[from] io::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
