//! Binary framing between simulator, tracker, controller and console.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ADLK"
//! 4       1     version (1)
//! 5       1     msg_type (1 MSCAN, 2 TRACE, 3 COMMAND, 4 STATUS)
//! 6       1     flags (bit 0: refraction correction active)
//! 7       1     reserved (0)
//! 8       4     seq u32
//! 12      8     timestamp_us u64
//! 20      4     payload_len u32
//! 24      n     payload
//! 24+n    4     crc32 of bytes 0..24+n
//! ```
//!
//! All integers and floats are little-endian.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::MScan;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ADLK";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;
pub const CRC_LEN: usize = 4;
pub const MSCAN_AXIS_LEN: usize = 16;
pub const MSCAN_PAYLOAD_LEN: usize = MSCAN_AXIS_LEN + MScan::ROWS * MScan::COLS * 4;
pub const TRACE_PAYLOAD_LEN: usize = 17;
pub const COMMAND_PAYLOAD_LEN: usize = 5;
pub const STATUS_FIXED_LEN: usize = 7;
/// Largest payload accepted; anything longer is treated as corruption.
pub const MAX_PAYLOAD: usize = MSCAN_PAYLOAD_LEN;

pub const FLAG_CORRECTION: u8 = 0b0000_0001;
pub const VALID_EPI: u8 = 0b01;
pub const VALID_DM: u8 = 0b10;

pub const STEP_RANGE: (f32, f32) = (1.0, 150.0);
pub const TIME_RANGE: (f32, f32) = (1.0, 9.0);
pub const DIST_RANGE: (f32, f32) = (256.0, 3000.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum MsgType {
    MScan = 1,
    Trace = 2,
    Command = 3,
    Status = 4,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Self::MScan),
            2 => Some(Self::Trace),
            3 => Some(Self::Command),
            4 => Some(Self::Status),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum Opcode {
    StepDown = 1,
    StepUp = 2,
    RotateOn = 3,
    RotateOff = 4,
    SetTarget = 5,
    SetStep = 6,
    StartAuto = 7,
    Pause = 8,
    Retract = 9,
    SetTimeRange = 10,
    SetDistRange = 11,
    AutoRange = 12,
}

impl Opcode {
    pub const ALL: [Opcode; 12] = [
        Opcode::StepDown,
        Opcode::StepUp,
        Opcode::RotateOn,
        Opcode::RotateOff,
        Opcode::SetTarget,
        Opcode::SetStep,
        Opcode::StartAuto,
        Opcode::Pause,
        Opcode::Retract,
        Opcode::SetTimeRange,
        Opcode::SetDistRange,
        Opcode::AutoRange,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get((v as usize).wrapping_sub(1)).copied()
    }

    /// Inclusive operand range, `None` when the operand is unused (must be 0).
    pub fn operand_range(self) -> Option<(f32, f32)> {
        match self {
            Opcode::StepDown | Opcode::StepUp | Opcode::SetStep => Some(STEP_RANGE),
            Opcode::SetTimeRange => Some(TIME_RANGE),
            Opcode::SetDistRange => Some(DIST_RANGE),
            Opcode::SetTarget => Some((0.0, DIST_RANGE.1)),
            Opcode::AutoRange => Some((0.0, 1.0)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MScanMsg {
    pub dz_air: f32,
    pub n_s: f32,
    pub first_seq: u32,
    /// 1024x48 row-major.
    pub pixels: Vec<f32>,
}

impl MScanMsg {
    pub fn from_scan(scan: &MScan, dz_air: f64, n_s: f64) -> Self {
        Self { dz_air: dz_air as f32, n_s: n_s as f32, first_seq: scan.first_seq as u32, pixels: scan.pixels().to_vec() }
    }

    pub fn to_scan(&self) -> Result<MScan> {
        MScan::from_pixels(self.pixels.clone(), self.first_seq as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceMsg {
    pub epi_um: f32,
    pub dm_um: f32,
    pub needle_um: f32,
    pub validity: u8,
    pub frame_seq: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandMsg {
    pub opcode: Opcode,
    pub operand: f32,
}

impl CommandMsg {
    pub fn new(opcode: Opcode, operand: f32) -> Result<Self> {
        let cmd = Self { opcode, operand };
        cmd.validate()?;
        Ok(cmd)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.operand;
        let (min, max) = self.opcode.operand_range().unwrap_or((0.0, 0.0));
        if !(min..=max).contains(&v) {
            return Err(Error::OutOfRange { what: "command operand", value: v as f64, min: min as f64, max: max as f64 });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusMsg {
    pub phase: u8,
    pub travel_um: f32,
    pub error_code: u16,
    pub error_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    MScan(MScanMsg),
    Trace(TraceMsg),
    Command(CommandMsg),
    Status(StatusMsg),
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::MScan(_) => MsgType::MScan,
            Message::Trace(_) => MsgType::Trace,
            Message::Command(_) => MsgType::Command,
            Message::Status(_) => MsgType::Status,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub flags: u8,
    pub seq: u32,
    pub timestamp_us: u64,
    pub message: Message,
}

impl Frame {
    pub fn new(seq: u32, timestamp_us: u64, message: Message) -> Self {
        Self { flags: 0, seq, timestamp_us, message }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("need more bytes")]
    NeedMore,
    #[error("frame truncated: have {have} of {need} bytes")]
    Truncated { have: usize, need: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("crc mismatch")]
    BadCrc,
    #[error("unknown protocol version {0}")]
    UnknownVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload length {0} exceeds limit")]
    Oversize(u32),
    #[error("malformed payload: {0}")]
    Malformed(String),
}

fn payload(message: &Message) -> Result<Vec<u8>> {
    let mut p = Vec::new();
    match message {
        Message::MScan(m) => {
            if m.pixels.len() != MScan::ROWS * MScan::COLS {
                return Err(Error::Shape { expected: format!("{}", MScan::ROWS * MScan::COLS), got: format!("{}", m.pixels.len()) });
            }
            p.reserve(MSCAN_PAYLOAD_LEN);
            p.extend_from_slice(&(MScan::ROWS as u16).to_le_bytes());
            p.extend_from_slice(&(MScan::COLS as u16).to_le_bytes());
            p.extend_from_slice(&m.dz_air.to_le_bytes());
            p.extend_from_slice(&m.n_s.to_le_bytes());
            p.extend_from_slice(&m.first_seq.to_le_bytes());
            for v in &m.pixels {
                p.extend_from_slice(&v.to_le_bytes());
            }
        }
        Message::Trace(t) => {
            p.extend_from_slice(&t.epi_um.to_le_bytes());
            p.extend_from_slice(&t.dm_um.to_le_bytes());
            p.extend_from_slice(&t.needle_um.to_le_bytes());
            p.push(t.validity);
            p.extend_from_slice(&t.frame_seq.to_le_bytes());
        }
        Message::Command(c) => {
            c.validate()?;
            p.push(c.opcode as u8);
            p.extend_from_slice(&c.operand.to_le_bytes());
        }
        Message::Status(s) => {
            if STATUS_FIXED_LEN + s.error_text.len() > MAX_PAYLOAD {
                return Err(Error::contract("status text too long"));
            }
            p.push(s.phase);
            p.extend_from_slice(&s.travel_um.to_le_bytes());
            p.extend_from_slice(&s.error_code.to_le_bytes());
            p.extend_from_slice(s.error_text.as_bytes());
        }
    }
    Ok(p)
}

pub fn encode(frame: &Frame) -> Result<Vec<u8>> {
    let body = payload(&frame.message)?;
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + CRC_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.message.msg_type() as u8);
    out.push(frame.flags);
    out.push(0);
    out.extend_from_slice(&frame.seq.to_le_bytes());
    out.extend_from_slice(&frame.timestamp_us.to_le_bytes());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn le_f32(b: &[u8], at: usize) -> f32 {
    f32::from_bits(le_u32(b, at))
}

fn parse_payload(kind: MsgType, p: &[u8]) -> std::result::Result<Message, DecodeError> {
    let need = |n: usize| {
        if p.len() == n {
            Ok(())
        } else {
            Err(DecodeError::Malformed(format!("{kind:?} payload is {} bytes, expected {n}", p.len())))
        }
    };
    match kind {
        MsgType::MScan => {
            need(MSCAN_PAYLOAD_LEN)?;
            let (rows, cols) = (le_u16(p, 0) as usize, le_u16(p, 2) as usize);
            if (rows, cols) != (MScan::ROWS, MScan::COLS) {
                return Err(DecodeError::Malformed(format!("M-scan shape {rows}x{cols}")));
            }
            let pixels = p[MSCAN_AXIS_LEN..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Ok(Message::MScan(MScanMsg { dz_air: le_f32(p, 4), n_s: le_f32(p, 8), first_seq: le_u32(p, 12), pixels }))
        }
        MsgType::Trace => {
            need(TRACE_PAYLOAD_LEN)?;
            Ok(Message::Trace(TraceMsg {
                epi_um: le_f32(p, 0),
                dm_um: le_f32(p, 4),
                needle_um: le_f32(p, 8),
                validity: p[12],
                frame_seq: le_u32(p, 13),
            }))
        }
        MsgType::Command => {
            need(COMMAND_PAYLOAD_LEN)?;
            let opcode = Opcode::from_u8(p[0]).ok_or_else(|| DecodeError::Malformed(format!("unknown opcode {}", p[0])))?;
            let cmd = CommandMsg { opcode, operand: le_f32(p, 1) };
            cmd.validate().map_err(|e| DecodeError::Malformed(e.to_string()))?;
            Ok(Message::Command(cmd))
        }
        MsgType::Status => {
            if p.len() < STATUS_FIXED_LEN {
                return Err(DecodeError::Malformed("status payload too short".into()));
            }
            let text = std::str::from_utf8(&p[STATUS_FIXED_LEN..])
                .map_err(|_| DecodeError::Malformed("status text is not UTF-8".into()))?;
            Ok(Message::Status(StatusMsg {
                phase: p[0],
                travel_um: le_f32(p, 1),
                error_code: le_u16(p, 5),
                error_text: text.to_owned(),
            }))
        }
    }
}

/// Decode one frame from the start of `bytes`; returns it with the number of
/// bytes consumed.
pub fn decode(bytes: &[u8]) -> std::result::Result<(Frame, usize), DecodeError> {
    if bytes.is_empty() {
        return Err(DecodeError::NeedMore);
    }
    let magic_len = bytes.len().min(4);
    if bytes[..magic_len] != MAGIC[..magic_len] {
        return Err(DecodeError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated { have: bytes.len(), need: HEADER_LEN });
    }
    if bytes[4] != VERSION {
        return Err(DecodeError::UnknownVersion(bytes[4]));
    }
    let kind = MsgType::from_u8(bytes[5]).ok_or(DecodeError::UnknownType(bytes[5]))?;
    let len = le_u32(bytes, 20);
    if len as usize > MAX_PAYLOAD {
        return Err(DecodeError::Oversize(len));
    }
    let total = HEADER_LEN + len as usize + CRC_LEN;
    if bytes.len() < total {
        return Err(DecodeError::Truncated { have: bytes.len(), need: total });
    }
    let body_end = HEADER_LEN + len as usize;
    if crc32fast::hash(&bytes[..body_end]) != le_u32(bytes, body_end) {
        return Err(DecodeError::BadCrc);
    }
    let message = parse_payload(kind, &bytes[HEADER_LEN..body_end])?;
    let frame = Frame {
        flags: bytes[6],
        seq: le_u32(bytes, 8),
        timestamp_us: u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")),
        message,
    };
    Ok((frame, total))
}

/// A sequence number that did not follow its predecessor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeqGap {
    pub expected: u32,
    pub got: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub frame: Frame,
    pub gap: Option<SeqGap>,
}

/// Incremental decoder for a byte stream. Corrupt data is skipped up to the
/// next magic; skipped bytes and rejected frames are counted.
#[derive(Debug, Default)]
pub struct StreamDecoder {
    buf: Vec<u8>,
    start: usize,
    next_seq: Option<u32>,
    pub skipped_bytes: u64,
    pub rejected: Vec<DecodeError>,
}

impl StreamDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.start > 0 && self.start * 2 >= self.buf.len() {
            self.buf.drain(..self.start);
            self.start = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len() - self.start
    }

    fn skip(&mut self, n: usize) {
        self.start += n;
        self.skipped_bytes += n as u64;
    }

    /// Next complete frame, or `None` when more bytes are needed.
    pub fn next_frame(&mut self) -> Option<Decoded> {
        loop {
            let data = &self.buf[self.start..];
            if data.is_empty() {
                return None;
            }
            // align on the next magic candidate
            match data.windows(4).position(|w| w == MAGIC) {
                Some(0) => {}
                Some(i) => {
                    self.skip(i);
                    continue;
                }
                None => {
                    // keep a possible partial magic at the tail
                    let keep = (1..4.min(data.len() + 1))
                        .rev()
                        .find(|&k| data.len() >= k && data[data.len() - k..] == MAGIC[..k])
                        .unwrap_or(0);
                    self.skip(data.len() - keep);
                    return None;
                }
            }
            match decode(data) {
                Ok((frame, used)) => {
                    self.start += used;
                    let gap = match self.next_seq {
                        Some(expected) if expected != frame.seq => Some(SeqGap { expected, got: frame.seq }),
                        _ => None,
                    };
                    self.next_seq = Some(frame.seq.wrapping_add(1));
                    return Some(Decoded { frame, gap });
                }
                Err(DecodeError::NeedMore | DecodeError::Truncated { .. }) => return None,
                Err(e) => {
                    self.rejected.push(e);
                    self.skip(1);
                }
            }
        }
    }
}

/// Host and port of a protocol endpoint. `AUTODALK_HOST` and `AUTODALK_PORT`
/// override configured values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl Default for Endpoint {
    fn default() -> Self {
        Self { host: "127.0.0.1".into(), port: 7878 }
    }
}

impl Endpoint {
    pub fn with_env(mut self) -> Result<Self> {
        self.apply_env(std::env::var("AUTODALK_HOST").ok(), std::env::var("AUTODALK_PORT").ok())?;
        Ok(self)
    }

    fn apply_env(&mut self, host: Option<String>, port: Option<String>) -> Result<()> {
        if let Some(h) = host {
            self.host = h;
        }
        if let Some(p) = port {
            self.port = p.parse().map_err(|_| Error::config(format!("bad port {p:?}")))?;
        }
        Ok(())
    }

    pub fn addr(&self) -> Result<SocketAddr> {
        (self.host.as_str(), self.port)
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| Error::config(format!("cannot resolve {}", self.host)))
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<()> {
    w.write_all(&encode(frame)?)?;
    Ok(())
}

/// Blocking frame reader over any byte source.
pub struct FrameReader<R> {
    inner: R,
    decoder: StreamDecoder,
    chunk: Vec<u8>,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, decoder: StreamDecoder::new(), chunk: vec![0; 64 * 1024] }
    }

    pub fn decoder(&self) -> &StreamDecoder {
        &self.decoder
    }

    /// Next frame, `None` at end of stream.
    pub fn read_frame(&mut self) -> Result<Option<Decoded>> {
        loop {
            if let Some(d) = self.decoder.next_frame() {
                return Ok(Some(d));
            }
            let n = self.inner.read(&mut self.chunk)?;
            if n == 0 {
                return Ok(None);
            }
            self.decoder.push(&self.chunk[..n]);
        }
    }
}

pub fn connect(endpoint: &Endpoint) -> Result<TcpStream> {
    let stream = TcpStream::connect(endpoint.addr()?)?;
    stream.set_nodelay(true)?;
    Ok(stream)
}
