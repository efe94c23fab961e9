//! Client and server state machines for the learn-then-merge cycle, the
//! binary wire format, and a TCP service around the server.
//!
//! A mission on the client embeds each class's new examples, folds the
//! resulting centroids into its local store and emits a [`MissionReport`].
//! The server applies reports one at a time with the online mean update,
//! deduplicating on `(client_id, mission_idx)`, and answers sync requests
//! with a [`Broadcast`] of its whole store, which replaces the client's.

mod client;
mod message;
mod net;
mod server;

use thiserror::Error;

use crate::embedder::EmbedError;
use crate::proto::{ClassId, ProtoError};

pub use client::{client_learn, ClientState};
pub use message::{
    decode_header, decode_message, decode_message_with_limit, encode_message, read_message, write_message, Broadcast,
    DecodeError, ErrorCode, ErrorReply, Hello, MergeSummary, Message, MessageType, MissionReport, ReadError,
    DEFAULT_MAX_FRAME_LEN, HEADER_LEN, MAGIC, PROTOCOL_VERSION,
};
pub use net::{run_client_session, serve, Connection, ServeConfig, ServerHandle};
pub use server::{server_merge, BankReport, MergeEvent, ServerState};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error(transparent)]
    Proto(#[from] ProtoError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("class {0} has no examples")]
    EmptyClass(ClassId),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("client is not in embedding-bank mode")]
    NoBank,
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error("server replied with {}: {message}", code.describe())]
    Remote { code: ErrorCode, message: String },
    #[error("unexpected {0:?} message")]
    Unexpected(MessageType),
    #[error(transparent)]
    Read(#[from] ReadError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl FederationError {
    /// Code used when this error is reported back over the wire.
    pub fn wire_code(&self) -> ErrorCode {
        match self {
            FederationError::DimensionMismatch { .. }
            | FederationError::Proto(ProtoError::DimensionMismatch { .. }) => ErrorCode::DimensionMismatch,
            _ => ErrorCode::Malformed,
        }
    }
}

pub type Result<T> = std::result::Result<T, FederationError>;
