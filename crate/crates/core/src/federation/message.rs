//! Frame format: `"FRP1"`, one type byte, a little-endian `u32` payload
//! length, then the payload. The fourth magic byte is the protocol version.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::codec::{Reader, Truncated, Writer};
use crate::proto::{ClassId, ClassUpdate, Prototype};

pub const MAGIC: [u8; 4] = *b"FRP1";
pub const PROTOCOL_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 9;
pub const DEFAULT_MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageType {
    Hello = 0,
    Report = 1,
    SyncRequest = 2,
    Broadcast = 3,
    Ack = 4,
    Error = 5,
}

impl TryFrom<u8> for MessageType {
    type Error = DecodeError;

    fn try_from(v: u8) -> Result<Self, DecodeError> {
        Ok(match v {
            0 => MessageType::Hello,
            1 => MessageType::Report,
            2 => MessageType::SyncRequest,
            3 => MessageType::Broadcast,
            4 => MessageType::Ack,
            5 => MessageType::Error,
            other => return Err(DecodeError::UnknownType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub protocol_version: u32,
    pub client_id: u32,
    pub dim: u32,
}

/// Prototype deltas learned by one client in one mission.
#[derive(Debug, Clone, PartialEq)]
pub struct MissionReport {
    pub client_id: u32,
    pub mission_idx: u32,
    pub updates: Vec<ClassUpdate>,
}

/// Full server store at send time.
#[derive(Debug, Clone, PartialEq)]
pub struct Broadcast {
    pub mission_counter: u64,
    pub dim: u32,
    pub prototypes: Vec<Prototype>,
}

/// Server's answer to a report.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeSummary {
    pub client_id: u32,
    pub mission_idx: u32,
    /// The report had already been applied and was ignored.
    pub duplicate: bool,
    pub inserted: u32,
    pub updated: u32,
    pub reported_count: u64,
    /// Euclidean distance between each incoming centroid and the server's
    /// prior mean, for classes the server already knew.
    pub divergence: Vec<(ClassId, f32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    VersionMismatch,
    DimensionMismatch,
    FrameTooLarge,
    Malformed,
    UnexpectedMessage,
    Other(u16),
}

impl ErrorCode {
    pub fn code(self) -> u16 {
        match self {
            ErrorCode::VersionMismatch => 1,
            ErrorCode::DimensionMismatch => 2,
            ErrorCode::FrameTooLarge => 3,
            ErrorCode::Malformed => 4,
            ErrorCode::UnexpectedMessage => 5,
            ErrorCode::Other(c) => c,
        }
    }

    pub fn from_code(c: u16) -> Self {
        match c {
            1 => ErrorCode::VersionMismatch,
            2 => ErrorCode::DimensionMismatch,
            3 => ErrorCode::FrameTooLarge,
            4 => ErrorCode::Malformed,
            5 => ErrorCode::UnexpectedMessage,
            other => ErrorCode::Other(other),
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            ErrorCode::VersionMismatch => "version mismatch",
            ErrorCode::DimensionMismatch => "dimension mismatch",
            ErrorCode::FrameTooLarge => "frame too large",
            ErrorCode::Malformed => "malformed message",
            ErrorCode::UnexpectedMessage => "unexpected message",
            ErrorCode::Other(_) => "error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorReply {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    Report(MissionReport),
    SyncRequest { client_id: u32 },
    Broadcast(Broadcast),
    Ack(MergeSummary),
    Error(ErrorReply),
}

impl Message {
    pub fn message_type(&self) -> MessageType {
        match self {
            Message::Hello(_) => MessageType::Hello,
            Message::Report(_) => MessageType::Report,
            Message::SyncRequest { .. } => MessageType::SyncRequest,
            Message::Broadcast(_) => MessageType::Broadcast,
            Message::Ack(_) => MessageType::Ack,
            Message::Error(_) => MessageType::Error,
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Message::Error(ErrorReply {
            code,
            message: message.into(),
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("bad magic")]
    BadMagic,
    #[error("unknown protocol version {0:#04x}")]
    UnknownVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("truncated frame")]
    Truncated,
    #[error("frame length {len} exceeds limit {max}")]
    TooLarge { len: usize, max: usize },
    #[error("malformed payload: {0}")]
    Malformed(&'static str),
}

impl DecodeError {
    /// Stable short reason code.
    pub fn reason_code(&self) -> &'static str {
        match self {
            DecodeError::BadMagic => "bad_magic",
            DecodeError::UnknownVersion(_) => "unknown_version",
            DecodeError::UnknownType(_) => "unknown_type",
            DecodeError::Truncated => "truncated",
            DecodeError::TooLarge { .. } => "too_large",
            DecodeError::Malformed(_) => "malformed",
        }
    }
}

impl From<Truncated> for DecodeError {
    fn from(_: Truncated) -> Self {
        DecodeError::Truncated
    }
}

fn put_class_entry(w: &mut Writer, class_id: ClassId, count: u64, values: &[f32]) {
    w.u32(class_id);
    w.u64(count);
    w.u32(values.len() as u32);
    w.f32_slice(values);
}

fn get_class_entry(r: &mut Reader<'_>) -> Result<(ClassId, u64, Vec<f32>), DecodeError> {
    let class_id = r.u32()?;
    let count = r.u64()?;
    let dim = r.u32()? as usize;
    let values = r.f32_vec(dim)?;
    if count == 0 {
        return Err(DecodeError::Malformed("zero count"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(DecodeError::Malformed("non-finite value"));
    }
    Ok((class_id, count, values))
}

fn encode_payload(msg: &Message) -> Vec<u8> {
    let mut w = Writer::default();
    match msg {
        Message::Hello(h) => {
            w.u32(h.protocol_version);
            w.u32(h.client_id);
            w.u32(h.dim);
        }
        Message::Report(r) => {
            w.u32(r.client_id);
            w.u32(r.mission_idx);
            w.u32(r.updates.len() as u32);
            for u in &r.updates {
                put_class_entry(&mut w, u.class_id, u.count, &u.centroid);
            }
        }
        Message::SyncRequest { client_id } => w.u32(*client_id),
        Message::Broadcast(b) => {
            w.u64(b.mission_counter);
            w.u32(b.dim);
            w.u32(b.prototypes.len() as u32);
            for p in &b.prototypes {
                put_class_entry(&mut w, p.class_id(), p.count(), p.mean());
            }
        }
        Message::Ack(s) => {
            w.u32(s.client_id);
            w.u32(s.mission_idx);
            w.u8(u8::from(s.duplicate));
            w.u32(s.inserted);
            w.u32(s.updated);
            w.u64(s.reported_count);
            w.u32(s.divergence.len() as u32);
            for (id, d) in &s.divergence {
                w.u32(*id);
                w.f32(*d);
            }
        }
        Message::Error(e) => {
            w.u16(e.code.code());
            w.u32(e.message.len() as u32);
            w.bytes(e.message.as_bytes());
        }
    }
    w.buf
}

// Element counts must fit in the bytes that remain; checked before any
// allocation so a hostile count cannot trigger a huge reservation.
fn bounded_count(r: &mut Reader<'_>, min_entry_bytes: usize) -> Result<usize, DecodeError> {
    let n = r.u32()? as usize;
    if n > r.remaining() / min_entry_bytes {
        return Err(DecodeError::Truncated);
    }
    Ok(n)
}

fn decode_payload(kind: MessageType, payload: &[u8]) -> Result<Message, DecodeError> {
    let mut r = Reader::new(payload);
    let msg = match kind {
        MessageType::Hello => Message::Hello(Hello {
            protocol_version: r.u32()?,
            client_id: r.u32()?,
            dim: r.u32()?,
        }),
        MessageType::Report => {
            let client_id = r.u32()?;
            let mission_idx = r.u32()?;
            let n = bounded_count(&mut r, 16)?;
            let mut updates = Vec::with_capacity(n);
            for _ in 0..n {
                let (class_id, count, centroid) = get_class_entry(&mut r)?;
                updates.push(ClassUpdate {
                    class_id,
                    centroid,
                    count,
                });
            }
            Message::Report(MissionReport {
                client_id,
                mission_idx,
                updates,
            })
        }
        MessageType::SyncRequest => Message::SyncRequest { client_id: r.u32()? },
        MessageType::Broadcast => {
            let mission_counter = r.u64()?;
            let dim = r.u32()?;
            let n = bounded_count(&mut r, 16)?;
            let mut prototypes = Vec::with_capacity(n);
            for _ in 0..n {
                let (class_id, count, mean) = get_class_entry(&mut r)?;
                if mean.len() != dim as usize {
                    return Err(DecodeError::Malformed("prototype dimension differs from broadcast"));
                }
                prototypes
                    .push(Prototype::new(class_id, mean, count).map_err(|_| DecodeError::Malformed("prototype"))?);
            }
            Message::Broadcast(Broadcast {
                mission_counter,
                dim,
                prototypes,
            })
        }
        MessageType::Ack => {
            let client_id = r.u32()?;
            let mission_idx = r.u32()?;
            let duplicate = match r.u8()? {
                0 => false,
                1 => true,
                _ => return Err(DecodeError::Malformed("duplicate flag")),
            };
            let inserted = r.u32()?;
            let updated = r.u32()?;
            let reported_count = r.u64()?;
            let n = bounded_count(&mut r, 8)?;
            let divergence = (0..n)
                .map(|_| Ok((r.u32()?, r.f32()?)))
                .collect::<Result<Vec<_>, DecodeError>>()?;
            Message::Ack(MergeSummary {
                client_id,
                mission_idx,
                duplicate,
                inserted,
                updated,
                reported_count,
                divergence,
            })
        }
        MessageType::Error => {
            let code = ErrorCode::from_code(r.u16()?);
            let len = r.u32()? as usize;
            let bytes = r.take(len)?;
            let message =
                String::from_utf8(bytes.to_vec()).map_err(|_| DecodeError::Malformed("error text is not utf-8"))?;
            Message::Error(ErrorReply { code, message })
        }
    };
    if r.remaining() != 0 {
        return Err(DecodeError::Malformed("trailing bytes"));
    }
    Ok(msg)
}

pub fn encode_message(msg: &Message) -> Vec<u8> {
    let payload = encode_payload(msg);
    let len = u32::try_from(payload.len()).expect("payload fits in a u32 length");
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(msg.message_type() as u8);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Parses a header, returning the message type and payload length.
pub fn decode_header(header: &[u8; HEADER_LEN], max_frame_len: usize) -> Result<(MessageType, usize), DecodeError> {
    if header[..3] != MAGIC[..3] {
        return Err(DecodeError::BadMagic);
    }
    if header[3] != MAGIC[3] {
        return Err(DecodeError::UnknownVersion(header[3]));
    }
    let kind = MessageType::try_from(header[4])?;
    let len = u32::from_le_bytes(header[5..9].try_into().expect("4 bytes")) as usize;
    if len > max_frame_len {
        return Err(DecodeError::TooLarge {
            len,
            max: max_frame_len,
        });
    }
    Ok((kind, len))
}

/// Decodes exactly one complete frame.
pub fn decode_message(bytes: &[u8]) -> Result<Message, DecodeError> {
    decode_message_with_limit(bytes, DEFAULT_MAX_FRAME_LEN)
}

pub fn decode_message_with_limit(bytes: &[u8], max_frame_len: usize) -> Result<Message, DecodeError> {
    let header: &[u8; HEADER_LEN] = bytes
        .get(..HEADER_LEN)
        .ok_or(DecodeError::Truncated)?
        .try_into()
        .expect("slice of header length");
    let (kind, len) = decode_header(header, max_frame_len)?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < len {
        return Err(DecodeError::Truncated);
    }
    if body.len() > len {
        return Err(DecodeError::Malformed("bytes after frame"));
    }
    decode_payload(kind, body)
}

#[derive(Debug, Error)]
pub enum ReadError {
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Reads one frame from a stream. The length is checked against the limit
/// before the payload is read. A clean end of stream before any header byte
/// is [`ReadError::Closed`].
pub fn read_message<R: Read>(reader: &mut R, max_frame_len: usize) -> Result<Message, ReadError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match reader.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Err(ReadError::Closed),
            Ok(0) => return Err(DecodeError::Truncated.into()),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (kind, len) = decode_header(&header, max_frame_len)?;
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ReadError::Decode(DecodeError::Truncated),
        _ => ReadError::Io(e),
    })?;
    Ok(decode_payload(kind, &payload)?)
}

pub fn write_message<W: Write>(writer: &mut W, msg: &Message) -> io::Result<()> {
    writer.write_all(&encode_message(msg))?;
    writer.flush()
}
