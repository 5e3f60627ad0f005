use std::io;

use crate::{FileId, VertexId};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("corrupt segment {fid}: {reason}")]
    CorruptSegment { fid: FileId, reason: String },

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("corrupt vertex log: {0}")]
    CorruptVertexLog(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("not found")]
    NotFound,

    #[error("vertex {0} is not live")]
    DeadVertex(VertexId),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("record of {0} bytes can never fit in a MemGraph")]
    RecordTooLarge(usize),

    #[error("edge {src}->{dst} has negative weight {weight}")]
    NegativeWeight { src: VertexId, dst: VertexId, weight: f64 },

    #[error("edge {src}->{dst} has a {len}-byte property, expected an 8-byte weight")]
    InvalidWeight { src: VertexId, dst: VertexId, len: usize },

    #[error("engine is shut down")]
    Closed,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn corrupt(fid: FileId, reason: impl Into<String>) -> Self {
        Error::CorruptSegment {
            fid,
            reason: reason.into(),
        }
    }
}
