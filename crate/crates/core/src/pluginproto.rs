//! Harness/plugin wire protocol.
//!
//! Every message is `[length: u32 LE][type: u8][payload: length bytes]`.
//! Payload layouts are fixed per type (all integers little-endian):
//!
//! | type | name    | payload                                                              |
//! |------|---------|----------------------------------------------------------------------|
//! | 1    | HELLO   | version u16, task u8, reserved u8 (0), name [64] zero-padded UTF-8   |
//! | 2    | WELCOME | consumer_id u32, slot_count u32, slot_capacity u64, consumer_count u32 |
//! | 3    | FRAME   | frame_id u64, preset_id u16, region [64], slot_index u32, generation u64, meta [64] |
//! | 4    | RESULT  | frame_id u64, exec_time_ns u64, count u16, count x detection [20], blob_len u32, blob |
//! | 5    | RELEASE | frame_id u64, slot_index u32, generation u64                         |
//! | 6    | BYE     | empty                                                                |
//! | 7    | ERROR   | code u16, msg_len u16, msg UTF-8                                     |
//!
//! A detection is `class u16, x u32, y u32, w u32, h u32, score u16` where
//! the score is fixed point over 65535.

use std::collections::HashSet;
use std::io::{self, Read, Write};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::framebus::{FrameMeta, SlotHandle, META_LEN};
use crate::presets::PixelBox;

pub const PROTOCOL_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 5;
/// Upper bound on a single payload.
pub const MAX_PAYLOAD_LEN: u32 = 1 << 20;
pub const NAME_LEN: usize = 64;
pub const REGION_NAME_LEN: usize = 64;
pub const DETECTION_LEN: usize = 20;

const HELLO_LEN: usize = 4 + NAME_LEN;
const WELCOME_LEN: usize = 20;
const FRAME_LEN: usize = 8 + 2 + REGION_NAME_LEN + 4 + 8 + META_LEN;
const RESULT_MIN_LEN: usize = 8 + 8 + 2 + 4;
const RELEASE_LEN: usize = 20;
const ERROR_MIN_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Detection,
    Odometry,
    Segmentation,
}

impl TaskKind {
    pub fn code(self) -> u8 {
        match self {
            TaskKind::Detection => 1,
            TaskKind::Odometry => 2,
            TaskKind::Segmentation => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(TaskKind::Detection),
            2 => Some(TaskKind::Odometry),
            3 => Some(TaskKind::Segmentation),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Detection => "detection",
            TaskKind::Odometry => "odometry",
            TaskKind::Segmentation => "segmentation",
        }
    }

    pub fn parse(text: &str) -> Option<Self> {
        [TaskKind::Detection, TaskKind::Odometry, TaskKind::Segmentation]
            .into_iter()
            .find(|t| t.name() == text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub protocol_version: u16,
    /// Raw task code; validated during the handshake, not by the codec.
    pub task: u8,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Welcome {
    pub consumer_id: u32,
    pub slot_count: u32,
    pub slot_capacity: u64,
    pub consumer_count: u32,
}

/// The handle a plugin receives instead of pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameDescriptor {
    pub frame_id: u64,
    pub preset_id: u16,
    pub region: String,
    pub slot_index: u32,
    pub generation: u64,
    pub meta: FrameMeta,
}

impl FrameDescriptor {
    pub fn handle(&self) -> SlotHandle {
        SlotHandle {
            slot_index: self.slot_index,
            generation: self.generation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub class: u16,
    pub bbox: PixelBox,
    /// Confidence as fixed point over 65535.
    pub score: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultPayload {
    pub frame_id: u64,
    pub exec_time_ns: u64,
    pub detections: Vec<Detection>,
    /// Task-specific output for non-detection tasks.
    pub blob: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Release {
    pub frame_id: u64,
    pub slot_index: u32,
    pub generation: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ErrorCode {
    UnsupportedVersion = 1,
    DuplicateAlgorithm = 2,
    UnsupportedTask = 3,
    ProtocolViolation = 4,
    Malformed = 5,
    Internal = 6,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        Some(match v {
            1 => ErrorCode::UnsupportedVersion,
            2 => ErrorCode::DuplicateAlgorithm,
            3 => ErrorCode::UnsupportedTask,
            4 => ErrorCode::ProtocolViolation,
            5 => ErrorCode::Malformed,
            6 => ErrorCode::Internal,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMessage {
    pub code: u16,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Hello(Hello),
    Welcome(Welcome),
    Frame(FrameDescriptor),
    Result(ResultPayload),
    Release(Release),
    Bye,
    Error(ErrorMessage),
}

impl Message {
    pub fn type_code(&self) -> u8 {
        match self {
            Message::Hello(_) => 1,
            Message::Welcome(_) => 2,
            Message::Frame(_) => 3,
            Message::Result(_) => 4,
            Message::Release(_) => 5,
            Message::Bye => 6,
            Message::Error(_) => 7,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Hello(_) => "HELLO",
            Message::Welcome(_) => "WELCOME",
            Message::Frame(_) => "FRAME",
            Message::Result(_) => "RESULT",
            Message::Release(_) => "RELEASE",
            Message::Bye => "BYE",
            Message::Error(_) => "ERROR",
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Message::Error(ErrorMessage {
            code: code as u16,
            message: message.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeErrorKind {
    #[error("truncated message")]
    Truncated,
    #[error("payload length {0} exceeds limit")]
    TooLarge(u32),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("bad payload length {len} for type {ty}")]
    BadLength { ty: u8, len: u32 },
    #[error("invalid utf-8 in text field")]
    BadUtf8,
    #[error("non-zero padding")]
    BadPadding,
}

/// A malformed message at byte `offset` of a stream.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} at offset {offset}")]
pub struct DecodeError {
    pub offset: usize,
    pub kind: DecodeErrorKind,
}

fn put_fixed_str(out: &mut Vec<u8>, s: &str, len: usize) {
    let bytes = s.as_bytes();
    let n = bytes.len().min(len);
    out.extend_from_slice(&bytes[..n]);
    out.resize(out.len() + (len - n), 0);
}

fn get_fixed_str(bytes: &[u8]) -> Result<String, DecodeErrorKind> {
    let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
    if bytes[end..].iter().any(|&b| b != 0) {
        return Err(DecodeErrorKind::BadPadding);
    }
    std::str::from_utf8(&bytes[..end])
        .map(str::to_owned)
        .map_err(|_| DecodeErrorKind::BadUtf8)
}

/// Little-endian field reader over a payload whose length was checked.
struct Fields<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Fields<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Fields { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u8(&mut self) -> u8 {
        self.take(1)[0]
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take(2).try_into().unwrap())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take(8).try_into().unwrap())
    }
}

fn encode_payload(msg: &Message, out: &mut Vec<u8>) {
    match msg {
        Message::Hello(h) => {
            out.extend_from_slice(&h.protocol_version.to_le_bytes());
            out.push(h.task);
            out.push(0);
            put_fixed_str(out, &h.name, NAME_LEN);
        }
        Message::Welcome(w) => {
            out.extend_from_slice(&w.consumer_id.to_le_bytes());
            out.extend_from_slice(&w.slot_count.to_le_bytes());
            out.extend_from_slice(&w.slot_capacity.to_le_bytes());
            out.extend_from_slice(&w.consumer_count.to_le_bytes());
        }
        Message::Frame(f) => {
            out.extend_from_slice(&f.frame_id.to_le_bytes());
            out.extend_from_slice(&f.preset_id.to_le_bytes());
            put_fixed_str(out, &f.region, REGION_NAME_LEN);
            out.extend_from_slice(&f.slot_index.to_le_bytes());
            out.extend_from_slice(&f.generation.to_le_bytes());
            out.extend_from_slice(&f.meta.encode());
        }
        Message::Result(r) => {
            out.extend_from_slice(&r.frame_id.to_le_bytes());
            out.extend_from_slice(&r.exec_time_ns.to_le_bytes());
            out.extend_from_slice(&(r.detections.len() as u16).to_le_bytes());
            for d in &r.detections {
                out.extend_from_slice(&d.class.to_le_bytes());
                out.extend_from_slice(&d.bbox.x.to_le_bytes());
                out.extend_from_slice(&d.bbox.y.to_le_bytes());
                out.extend_from_slice(&d.bbox.w.to_le_bytes());
                out.extend_from_slice(&d.bbox.h.to_le_bytes());
                out.extend_from_slice(&d.score.to_le_bytes());
            }
            out.extend_from_slice(&(r.blob.len() as u32).to_le_bytes());
            out.extend_from_slice(&r.blob);
        }
        Message::Release(r) => {
            out.extend_from_slice(&r.frame_id.to_le_bytes());
            out.extend_from_slice(&r.slot_index.to_le_bytes());
            out.extend_from_slice(&r.generation.to_le_bytes());
        }
        Message::Bye => {}
        Message::Error(e) => {
            let bytes = e.message.as_bytes();
            let n = bytes.len().min(u16::MAX as usize);
            out.extend_from_slice(&e.code.to_le_bytes());
            out.extend_from_slice(&(n as u16).to_le_bytes());
            out.extend_from_slice(&bytes[..n]);
        }
    }
}

/// Encodes one message with its length prefix.
///
/// Names and region strings longer than their fixed fields are truncated;
/// callers that need round-trip fidelity keep them within bounds.
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut out = vec![0u8; HEADER_LEN];
    encode_payload(msg, &mut out);
    let len = (out.len() - HEADER_LEN) as u32;
    out[..4].copy_from_slice(&len.to_le_bytes());
    out[4] = msg.type_code();
    out
}

fn decode_payload(ty: u8, payload: &[u8]) -> Result<Message, DecodeErrorKind> {
    let len = payload.len();
    let bad_len = || DecodeErrorKind::BadLength {
        ty,
        len: len as u32,
    };
    let mut f = Fields::new(payload);
    match ty {
        1 => {
            if len != HELLO_LEN {
                return Err(bad_len());
            }
            let protocol_version = f.u16();
            let task = f.u8();
            if f.u8() != 0 {
                return Err(DecodeErrorKind::BadPadding);
            }
            let name = get_fixed_str(f.take(NAME_LEN))?;
            Ok(Message::Hello(Hello {
                protocol_version,
                task,
                name,
            }))
        }
        2 => {
            if len != WELCOME_LEN {
                return Err(bad_len());
            }
            Ok(Message::Welcome(Welcome {
                consumer_id: f.u32(),
                slot_count: f.u32(),
                slot_capacity: f.u64(),
                consumer_count: f.u32(),
            }))
        }
        3 => {
            if len != FRAME_LEN {
                return Err(bad_len());
            }
            let frame_id = f.u64();
            let preset_id = f.u16();
            let region = get_fixed_str(f.take(REGION_NAME_LEN))?;
            let slot_index = f.u32();
            let generation = f.u64();
            let meta = FrameMeta::decode(f.take(META_LEN)).ok_or(DecodeErrorKind::BadPadding)?;
            Ok(Message::Frame(FrameDescriptor {
                frame_id,
                preset_id,
                region,
                slot_index,
                generation,
                meta,
            }))
        }
        4 => {
            if len < RESULT_MIN_LEN {
                return Err(bad_len());
            }
            let frame_id = f.u64();
            let exec_time_ns = f.u64();
            let count = f.u16() as usize;
            let fixed = RESULT_MIN_LEN + count * DETECTION_LEN;
            if len < fixed {
                return Err(bad_len());
            }
            let detections = (0..count)
                .map(|_| Detection {
                    class: f.u16(),
                    bbox: PixelBox {
                        x: f.u32(),
                        y: f.u32(),
                        w: f.u32(),
                        h: f.u32(),
                    },
                    score: f.u16(),
                })
                .collect();
            let blob_len = f.u32() as usize;
            if len != fixed + blob_len {
                return Err(bad_len());
            }
            Ok(Message::Result(ResultPayload {
                frame_id,
                exec_time_ns,
                detections,
                blob: f.take(blob_len).to_vec(),
            }))
        }
        5 => {
            if len != RELEASE_LEN {
                return Err(bad_len());
            }
            Ok(Message::Release(Release {
                frame_id: f.u64(),
                slot_index: f.u32(),
                generation: f.u64(),
            }))
        }
        6 => {
            if len != 0 {
                return Err(bad_len());
            }
            Ok(Message::Bye)
        }
        7 => {
            if len < ERROR_MIN_LEN {
                return Err(bad_len());
            }
            let code = f.u16();
            let msg_len = f.u16() as usize;
            if len != ERROR_MIN_LEN + msg_len {
                return Err(bad_len());
            }
            let message = std::str::from_utf8(f.take(msg_len))
                .map_err(|_| DecodeErrorKind::BadUtf8)?
                .to_owned();
            Ok(Message::Error(ErrorMessage { code, message }))
        }
        other => Err(DecodeErrorKind::UnknownType(other)),
    }
}

/// Decodes the message at the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Message, usize), DecodeErrorKind> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeErrorKind::Truncated);
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap());
    let ty = bytes[4];
    if len > MAX_PAYLOAD_LEN {
        return Err(DecodeErrorKind::TooLarge(len));
    }
    if !(1..=7).contains(&ty) {
        return Err(DecodeErrorKind::UnknownType(ty));
    }
    let end = HEADER_LEN + len as usize;
    if bytes.len() < end {
        return Err(DecodeErrorKind::Truncated);
    }
    decode_payload(ty, &bytes[HEADER_LEN..end]).map(|m| (m, end))
}

/// Decodes a whole byte stream. Messages are processed in order up to the
/// first malformed one, whose start offset is reported.
pub fn decode_stream(bytes: &[u8]) -> (Vec<Message>, Option<DecodeError>) {
    let mut messages = Vec::new();
    let mut offset = 0;
    while offset < bytes.len() {
        match decode(&bytes[offset..]) {
            Ok((msg, used)) => {
                messages.push(msg);
                offset += used;
            }
            Err(kind) => return (messages, Some(DecodeError { offset, kind })),
        }
    }
    (messages, None)
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("connection closed")]
    Closed,
    #[error("timed out")]
    Timeout,
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed message: {0}")]
    Decode(#[from] DecodeErrorKind),
}

fn map_io(e: io::Error) -> WireError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => WireError::Timeout,
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::BrokenPipe => WireError::Closed,
        _ => WireError::Io(e),
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), WireError> {
    w.write_all(&encode(msg)).map_err(map_io)?;
    w.flush().map_err(map_io)
}

/// Reads exactly one message. EOF before the first header byte is `Closed`.
pub fn read_message<R: Read>(r: &mut R) -> Result<Message, WireError> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header).map_err(map_io)?;
    let len = u32::from_le_bytes(header[..4].try_into().unwrap());
    if len > MAX_PAYLOAD_LEN {
        return Err(DecodeErrorKind::TooLarge(len).into());
    }
    if !(1..=7).contains(&header[4]) {
        return Err(DecodeErrorKind::UnknownType(header[4]).into());
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload).map_err(map_io)?;
    Ok(decode_payload(header[4], &payload)?)
}

/// Harness-side registration of plugins on one run.
#[derive(Debug)]
pub struct Registry {
    names: HashSet<String>,
    next_consumer: u32,
    bus: Welcome,
}

/// A registered plugin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registration {
    pub consumer_id: u32,
    pub name: String,
    pub task: TaskKind,
}

impl Registry {
    /// `bus` carries the bus summary echoed in every WELCOME; its
    /// `consumer_id` is ignored.
    pub fn new(bus: Welcome) -> Self {
        Registry {
            names: HashSet::new(),
            next_consumer: 0,
            bus,
        }
    }

    /// Validates a HELLO and assigns the next consumer id.
    pub fn register(&mut self, hello: &Hello) -> Result<(Registration, Welcome), ErrorMessage> {
        let reject = |code: ErrorCode, message: String| ErrorMessage {
            code: code as u16,
            message,
        };
        if hello.protocol_version != PROTOCOL_VERSION {
            return Err(reject(
                ErrorCode::UnsupportedVersion,
                format!("unsupported protocol version {}", hello.protocol_version),
            ));
        }
        let task = TaskKind::from_code(hello.task).ok_or_else(|| {
            reject(
                ErrorCode::UnsupportedTask,
                format!("unsupported task kind {}", hello.task),
            )
        })?;
        if hello.name.is_empty() {
            return Err(reject(
                ErrorCode::ProtocolViolation,
                "empty algorithm name".to_string(),
            ));
        }
        if !self.names.insert(hello.name.clone()) {
            return Err(reject(
                ErrorCode::DuplicateAlgorithm,
                format!("duplicate algorithm {:?}", hello.name),
            ));
        }
        let consumer_id = self.next_consumer;
        self.next_consumer += 1;
        Ok((
            Registration {
                consumer_id,
                name: hello.name.clone(),
                task,
            },
            Welcome {
                consumer_id,
                ..self.bus
            },
        ))
    }
}

#[derive(Debug, Error)]
pub enum HandshakeError {
    #[error("expected HELLO, got {0}")]
    Unexpected(&'static str),
    #[error("rejected: {}", .0.message)]
    Rejected(ErrorMessage),
    #[error(transparent)]
    Wire(#[from] WireError),
}

/// Reads HELLO and answers WELCOME or ERROR.
pub fn handshake<S: Read + Write>(
    stream: &mut S,
    registry: &mut Registry,
) -> Result<Registration, HandshakeError> {
    let hello = match read_message(stream)? {
        Message::Hello(h) => h,
        other => {
            let name = other.type_name();
            let _ = write_message(
                stream,
                &Message::error(ErrorCode::ProtocolViolation, format!("expected HELLO, got {name}")),
            );
            return Err(HandshakeError::Unexpected(name));
        }
    };
    match registry.register(&hello) {
        Ok((registration, welcome)) => {
            write_message(stream, &Message::Welcome(welcome))?;
            Ok(registration)
        }
        Err(err) => {
            write_message(stream, &Message::Error(err.clone()))?;
            Err(HandshakeError::Rejected(err))
        }
    }
}

#[derive(Debug, Error)]
pub enum ExchangeError {
    #[error("result for unknown frame {got} (expected {expected})")]
    UnknownFrame { expected: u64, got: u64 },
    #[error("RELEASE before RESULT for frame {0}")]
    ReleaseBeforeResult(u64),
    #[error("release does not match descriptor for frame {0}")]
    ReleaseMismatch(u64),
    #[error("plugin reported exec_time_ns = 0 for frame {0}")]
    ZeroExecTime(u64),
    #[error("unexpected {0} from plugin")]
    Unexpected(&'static str),
    #[error("plugin error {}: {}", .0.code, .0.message)]
    Plugin(ErrorMessage),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("plugin disconnected")]
    Disconnected,
    #[error(transparent)]
    Wire(WireError),
}

impl From<WireError> for ExchangeError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Closed => ExchangeError::Disconnected,
            other => ExchangeError::Wire(other),
        }
    }
}

/// Outcome of one FRAME round trip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exchange {
    pub result: ResultPayload,
    pub release: Release,
    /// Send-to-RESULT wall time measured by the harness.
    pub harness_ns: u64,
}

/// Sends FRAME and waits for RESULT then RELEASE for that frame.
///
/// `deadline` bounds the whole exchange. For sockets the caller sets the read
/// timeout to the same value; a read that times out ends the exchange, since
/// a partially read message cannot be resumed.
pub fn send_frame<S: Read + Write>(
    stream: &mut S,
    descriptor: &FrameDescriptor,
    deadline: Duration,
) -> Result<Exchange, ExchangeError> {
    let started = Instant::now();
    write_message(stream, &Message::Frame(descriptor.clone()))?;
    let mut result: Option<(ResultPayload, u64)> = None;
    loop {
        let msg = match read_message(stream) {
            Ok(m) => m,
            Err(WireError::Timeout) => return Err(ExchangeError::Timeout(deadline)),
            Err(e) => return Err(e.into()),
        };
        match msg {
            Message::Result(r) => {
                let harness_ns = started.elapsed().as_nanos().max(1) as u64;
                if r.frame_id != descriptor.frame_id || result.is_some() {
                    return Err(ExchangeError::UnknownFrame {
                        expected: descriptor.frame_id,
                        got: r.frame_id,
                    });
                }
                if r.exec_time_ns == 0 {
                    return Err(ExchangeError::ZeroExecTime(r.frame_id));
                }
                result = Some((r, harness_ns));
            }
            Message::Release(rel) => {
                let Some((result, harness_ns)) = result.take() else {
                    return Err(ExchangeError::ReleaseBeforeResult(rel.frame_id));
                };
                if rel.frame_id != descriptor.frame_id
                    || rel.slot_index != descriptor.slot_index
                    || rel.generation != descriptor.generation
                {
                    return Err(ExchangeError::ReleaseMismatch(rel.frame_id));
                }
                return Ok(Exchange {
                    result,
                    release: rel,
                    harness_ns,
                });
            }
            Message::Error(e) => return Err(ExchangeError::Plugin(e)),
            Message::Bye => return Err(ExchangeError::Disconnected),
            other => return Err(ExchangeError::Unexpected(other.type_name())),
        }
        if started.elapsed() >= deadline {
            return Err(ExchangeError::Timeout(deadline));
        }
    }
}
