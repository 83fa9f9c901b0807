//! Bit-exact OPC UA binary (UA-TCP) codec for the service subset the rest
//! of the toolkit needs: connection handshake, secure-channel chunks, and
//! the Discovery / SecureChannel / Session / Attribute service bodies.
//!
//! All operations are pure functions over byte slices and are safe for
//! unrestricted concurrent use.

mod builtin;
mod chunk;
mod header;
pub mod service;

pub use builtin::{
    decode_builtin, encode_builtin, DecodeKind, LocalizedText, NodeId, UaByteString, UaString,
    Value, ValueKind,
};
pub(crate) use builtin::{write_localized_text, write_node_id, Reader};
pub use chunk::{
    encode_chunks, encode_chunks_limit, parse_chunk, reassemble, symmetric_chunk_capacity,
    ChunkChannel, HeaderKind, ParsedChunk, DEFAULT_CHUNK_SIZE, DEFAULT_MAX_CHUNK_COUNT,
    MIN_CHUNK_SIZE, PROTECTION_RESERVE,
};
pub use header::{
    AsymmetricSecurityHeader, ChunkFlag, MessageHeader, MessageType, SequenceHeader,
    SymmetricSecurityHeader, MESSAGE_HEADER_SIZE, SYMMETRIC_HEADER_SIZE,
};
pub use service::{SecurityMode, ServiceBody, UserTokenType};

use thiserror::Error;

/// Decode-time cap on array element counts, bounding hostile-input memory.
pub const MAX_ARRAY_LEN: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("truncated input: need {need} more bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: &'static str },
    #[error("unknown message type tag {0:?}")]
    UnknownMessageType([u8; 3]),
    #[error("unsupported built-in kind tag {tag}")]
    UnsupportedKind { tag: u8 },
    #[error("declared message size {declared} does not match chunk length {actual}")]
    SizeMismatch { declared: u32, actual: usize },
    #[error("{count} trailing bytes after body")]
    TrailingBytes { count: usize },
    #[error("array of {len} elements exceeds cap {max}")]
    ArrayTooLarge { len: usize, max: usize },
    #[error("body needs {chunks} chunks, limit is {max}")]
    BodyTooLarge { chunks: usize, max: usize },
    #[error("sequence gap: expected {expected}, got {got}")]
    SequenceGap { expected: u32, got: u32 },
    #[error("mixed request ids in one message: {first} then {other}")]
    MixedRequestIds { first: u32, other: u32 },
    #[error("abort chunk received")]
    AbortReceived,
    #[error("chunk list ended without a final chunk")]
    MissingFinalChunk,
    #[error("body {body} cannot be carried under this header kind")]
    HeaderKindMismatch { body: &'static str },
    #[error("chunk size {size} below minimum {min}")]
    ChunkSizeTooSmall { size: u32, min: u32 },
    #[error("operation requires channel state")]
    ChannelRequired,
}
