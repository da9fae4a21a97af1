//! Message vocabulary and binary framing for master/worker traffic.
//!
//! Every frame is a fixed 15-byte header followed by the payload:
//!
//! ```text
//! offset size field
//! 0      4    magic "GHUB"
//! 4      2    format version, u16 LE (1 = f32 tensor values, 2 = f64)
//! 6      1    message type
//! 7      8    payload length, u64 LE
//! 15     n    payload
//! ```
//!
//! Tensor blocks are `count: u32`, then per tensor `rank: u8`,
//! `dims: u32 × rank`, values row-major. See `docs/protocol.md` for the
//! per-message payload layouts.

use thiserror::Error;

use crate::nn::{checked_numel, Gradient, Tensor, WeightSet};
use crate::Rank;

pub const MAGIC: [u8; 4] = *b"GHUB";
pub const HEADER_LEN: usize = 15;
/// Frames declaring a longer payload are refused before any allocation.
pub const MAX_PAYLOAD: u64 = 1 << 30;

pub const TYPE_HELLO: u8 = 1;
pub const TYPE_WEIGHTS: u8 = 2;
pub const TYPE_GRADIENT: u8 = 3;
pub const TYPE_VALIDATE_RESULT: u8 = 4;
pub const TYPE_DONE: u8 = 5;
pub const TYPE_SHUTDOWN: u8 = 6;

/// Precision of tensor values on the wire. Values are always `f64` in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WirePrecision {
    #[default]
    F32,
    F64,
}

impl WirePrecision {
    pub fn format_version(self) -> u16 {
        match self {
            WirePrecision::F32 => 1,
            WirePrecision::F64 => 2,
        }
    }

    fn from_version(v: u16) -> Option<Self> {
        match v {
            1 => Some(WirePrecision::F32),
            2 => Some(WirePrecision::F64),
            _ => None,
        }
    }

    pub fn value_bytes(self) -> usize {
        match self {
            WirePrecision::F32 => 4,
            WirePrecision::F64 => 8,
        }
    }

    /// Value as it survives a trip over the wire.
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            WirePrecision::F32 => x as f32 as f64,
            WirePrecision::F64 => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeerRole {
    Worker,
    SubMaster,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { rank: Rank, role: PeerRole },
    /// Weights (or, under elastic averaging, the center variable) with
    /// the issuing master's version.
    Weights(WeightSet),
    /// A gradient, or under elastic averaging the worker's raw weights.
    Gradient { grad: Gradient, sample_count: u32 },
    ValidateResult { accuracy: f64, loss: f64, version: u64 },
    Done { rank: Rank },
    Shutdown,
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Hello { .. } => TYPE_HELLO,
            Message::Weights(_) => TYPE_WEIGHTS,
            Message::Gradient { .. } => TYPE_GRADIENT,
            Message::ValidateResult { .. } => TYPE_VALIDATE_RESULT,
            Message::Done { .. } => TYPE_DONE,
            Message::Shutdown => TYPE_SHUTDOWN,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "HELLO",
            Message::Weights(_) => "WEIGHTS",
            Message::Gradient { .. } => "GRADIENT",
            Message::ValidateResult { .. } => "VALIDATE_RESULT",
            Message::Done { .. } => "DONE",
            Message::Shutdown => "SHUTDOWN",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtoError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("truncated frame: needed {needed} bytes, {available} available")]
    Truncated { needed: u64, available: u64 },
    #[error("declared length {0} exceeds the frame limit")]
    LengthOverflow(u64),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

/// Size in bytes of a tensor block.
pub fn tensor_block_len(tensors: &[Tensor], precision: WirePrecision) -> usize {
    4 + tensors
        .iter()
        .map(|t| 1 + 4 * t.shape().len() + precision.value_bytes() * t.len())
        .sum::<usize>()
}

/// Payload length of `msg`, excluding the 15-byte header.
pub fn payload_len(msg: &Message, precision: WirePrecision) -> usize {
    match msg {
        Message::Hello { .. } => 5,
        Message::Weights(w) => 8 + tensor_block_len(&w.tensors, precision),
        Message::Gradient { grad, .. } => 12 + tensor_block_len(&grad.tensors, precision),
        Message::ValidateResult { .. } => 24,
        Message::Done { .. } => 4,
        Message::Shutdown => 0,
    }
}

pub fn encoded_len(msg: &Message, precision: WirePrecision) -> usize {
    HEADER_LEN + payload_len(msg, precision)
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[Tensor], precision: WirePrecision) {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match precision {
            WirePrecision::F32 => {
                for &v in t.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            WirePrecision::F64 => {
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
}

pub fn encode(msg: &Message, precision: WirePrecision) -> Vec<u8> {
    let len = payload_len(msg, precision);
    let mut out = Vec::with_capacity(HEADER_LEN + len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&precision.format_version().to_le_bytes());
    out.push(msg.type_byte());
    out.extend_from_slice(&(len as u64).to_le_bytes());
    match msg {
        Message::Hello { rank, role } => {
            out.extend_from_slice(&rank.to_le_bytes());
            out.push(match role {
                PeerRole::Worker => 0,
                PeerRole::SubMaster => 1,
            });
        }
        Message::Weights(w) => {
            out.extend_from_slice(&w.version.to_le_bytes());
            put_tensors(&mut out, &w.tensors, precision);
        }
        Message::Gradient { grad, sample_count } => {
            out.extend_from_slice(&grad.basis_version.to_le_bytes());
            out.extend_from_slice(&sample_count.to_le_bytes());
            put_tensors(&mut out, &grad.tensors, precision);
        }
        Message::ValidateResult {
            accuracy,
            loss,
            version,
        } => {
            out.extend_from_slice(&accuracy.to_le_bytes());
            out.extend_from_slice(&loss.to_le_bytes());
            out.extend_from_slice(&version.to_le_bytes());
        }
        Message::Done { rank } => out.extend_from_slice(&rank.to_le_bytes()),
        Message::Shutdown => {}
    }
    debug_assert_eq!(out.len(), HEADER_LEN + len);
    out
}

/// Parsed frame header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub precision: WirePrecision,
    pub msg_type: u8,
    pub payload_len: u64,
}

/// Validates the fixed header; `bytes` must hold at least [`HEADER_LEN`] bytes.
pub fn decode_header(bytes: &[u8]) -> Result<FrameHeader, ProtoError> {
    if bytes.len() < HEADER_LEN {
        return Err(ProtoError::Truncated {
            needed: HEADER_LEN as u64,
            available: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ProtoError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    let precision =
        WirePrecision::from_version(version).ok_or(ProtoError::UnsupportedVersion(version))?;
    let msg_type = bytes[6];
    if !(TYPE_HELLO..=TYPE_SHUTDOWN).contains(&msg_type) {
        return Err(ProtoError::UnknownType(msg_type));
    }
    let payload_len = u64::from_le_bytes(bytes[7..15].try_into().unwrap());
    if payload_len > MAX_PAYLOAD {
        return Err(ProtoError::LengthOverflow(payload_len));
    }
    Ok(FrameHeader {
        precision,
        msg_type,
        payload_len,
    })
}

/// Bounds-checked reader over a payload slice.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtoError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ProtoError::Malformed(format!(
                "payload field at offset {} overruns the declared length",
                self.pos
            )))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ProtoError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ProtoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ProtoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ProtoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn tensors(&mut self, precision: WirePrecision) -> Result<Vec<Tensor>, ProtoError> {
        let count = self.u32()? as usize;
        // each tensor needs at least its rank byte
        if count > self.remaining() {
            return Err(ProtoError::Malformed(format!(
                "tensor count {count} exceeds payload size"
            )));
        }
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = self.u8()? as usize;
            let shape = (0..rank)
                .map(|_| self.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = checked_numel(&shape).map_err(|e| ProtoError::Malformed(e.to_string()))?;
            let bytes = n
                .checked_mul(precision.value_bytes())
                .ok_or_else(|| ProtoError::Malformed(format!("shape {shape:?} overflows")))?;
            let raw = self.take(bytes)?;
            let data: Vec<f64> = match precision {
                WirePrecision::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                WirePrecision::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            out.push(Tensor::new(shape, data).map_err(|e| ProtoError::Malformed(e.to_string()))?);
        }
        Ok(out)
    }
}

fn decode_payload(header: FrameHeader, payload: &[u8]) -> Result<Message, ProtoError> {
    let mut c = Cursor {
        buf: payload,
        pos: 0,
    };
    let msg = match header.msg_type {
        TYPE_HELLO => {
            let rank = c.u32()?;
            let role = match c.u8()? {
                0 => PeerRole::Worker,
                1 => PeerRole::SubMaster,
                r => return Err(ProtoError::Malformed(format!("unknown peer role {r}"))),
            };
            Message::Hello { rank, role }
        }
        TYPE_WEIGHTS => {
            let version = c.u64()?;
            Message::Weights(WeightSet::new(c.tensors(header.precision)?, version))
        }
        TYPE_GRADIENT => {
            let basis_version = c.u64()?;
            let sample_count = c.u32()?;
            if sample_count == 0 {
                return Err(ProtoError::Malformed("gradient with zero sample count".into()));
            }
            Message::Gradient {
                grad: Gradient::new(c.tensors(header.precision)?, basis_version),
                sample_count,
            }
        }
        TYPE_VALIDATE_RESULT => {
            let accuracy = c.f64()?;
            let loss = c.f64()?;
            let version = c.u64()?;
            if !(0.0..=1.0).contains(&accuracy) || loss.is_nan() || loss < 0.0 {
                return Err(ProtoError::Malformed(format!(
                    "validation result out of range (accuracy {accuracy}, loss {loss})"
                )));
            }
            Message::ValidateResult {
                accuracy,
                loss,
                version,
            }
        }
        TYPE_DONE => Message::Done { rank: c.u32()? },
        TYPE_SHUTDOWN => Message::Shutdown,
        t => return Err(ProtoError::UnknownType(t)),
    };
    if c.remaining() != 0 {
        return Err(ProtoError::Malformed(format!(
            "{} unread payload bytes",
            c.remaining()
        )));
    }
    Ok(msg)
}

/// Decodes the first frame in `bytes`, returning it and the bytes consumed.
/// Never reads past the declared payload length.
pub fn decode_frame(bytes: &[u8]) -> Result<(Message, usize), ProtoError> {
    let header = decode_header(bytes)?;
    let available = (bytes.len() - HEADER_LEN) as u64;
    if header.payload_len > available {
        return Err(ProtoError::Truncated {
            needed: header.payload_len,
            available,
        });
    }
    let end = HEADER_LEN + header.payload_len as usize;
    let msg = decode_payload(header, &bytes[HEADER_LEN..end])?;
    Ok((msg, end))
}

/// Decodes exactly one frame; extra bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<Message, ProtoError> {
    let (msg, used) = decode_frame(bytes)?;
    if used != bytes.len() {
        return Err(ProtoError::TrailingBytes(bytes.len() - used));
    }
    Ok(msg)
}
