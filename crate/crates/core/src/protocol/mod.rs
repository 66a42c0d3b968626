//! Fixed-size little-endian datagrams between teacher and agents.
//!
//! Every frame is `"TNR1" | version | type | payload | crc32`, the CRC
//! (IEEE) covering all preceding bytes. Floats travel as raw IEEE-754 bits,
//! so decoding an encoded message reproduces it exactly.

mod link;
mod udp;

use std::collections::HashMap;
use std::fmt;

use nalgebra::Quaternion;
use thiserror::Error;

use crate::geometry::{Timestamp, Vec3};

pub use link::{LinkParams, LinkSim};
pub use udp::UdpTransport;

pub const MAGIC: [u8; 4] = *b"TNR1";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 6;
pub const CRC_LEN: usize = 4;
pub const FRAME_LABEL_LEN: usize = 32;

/// Out-of-band sender identity, as a datagram source address would be.
pub type SenderId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageType {
    TeacherPose = 1,
    InspectionMark = 2,
    AgentPose = 3,
    SessionAnnounce = 4,
    Estop = 5,
}

impl MessageType {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => MessageType::TeacherPose,
            2 => MessageType::InspectionMark,
            3 => MessageType::AgentPose,
            4 => MessageType::SessionAnnounce,
            5 => MessageType::Estop,
            _ => return None,
        })
    }

    /// Total encoded length, header and CRC included.
    pub fn frame_len(self) -> usize {
        let payload = match self {
            MessageType::TeacherPose => 4 + 8 + 56,
            MessageType::InspectionMark => 4 + 8 + 32,
            MessageType::AgentPose => 4 + 4 + 8 + 56,
            MessageType::SessionAnnounce => 8 + FRAME_LABEL_LEN,
            MessageType::Estop => 4,
        };
        HEADER_LEN + payload + CRC_LEN
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LabelError {
    #[error("frame label longer than {FRAME_LABEL_LEN} bytes")]
    TooLong,
    #[error("frame label contains a NUL byte")]
    Nul,
}

/// Frame identifier that fits the fixed 32-byte wire field.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FrameLabel(String);

impl FrameLabel {
    pub fn new(s: impl Into<String>) -> Result<Self, LabelError> {
        let s = s.into();
        if s.len() > FRAME_LABEL_LEN {
            return Err(LabelError::TooLong);
        }
        if s.bytes().any(|b| b == 0) {
            return Err(LabelError::Nul);
        }
        Ok(FrameLabel(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for FrameLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    TeacherPose {
        seq: u32,
        t: Timestamp,
        position: Vec3,
        orientation: Quaternion<f64>,
    },
    InspectionMark {
        seq: u32,
        t: Timestamp,
        position: Vec3,
        yaw: f64,
    },
    AgentPose {
        agent_id: u32,
        seq: u32,
        t: Timestamp,
        position: Vec3,
        orientation: Quaternion<f64>,
    },
    SessionAnnounce {
        digest: u64,
        frame_id: FrameLabel,
    },
    Estop {
        seq: u32,
    },
}

impl WireMessage {
    pub fn message_type(&self) -> MessageType {
        match self {
            WireMessage::TeacherPose { .. } => MessageType::TeacherPose,
            WireMessage::InspectionMark { .. } => MessageType::InspectionMark,
            WireMessage::AgentPose { .. } => MessageType::AgentPose,
            WireMessage::SessionAnnounce { .. } => MessageType::SessionAnnounce,
            WireMessage::Estop { .. } => MessageType::Estop,
        }
    }

    /// Sequence number, if the variant carries one.
    pub fn seq(&self) -> Option<u32> {
        match self {
            WireMessage::TeacherPose { seq, .. }
            | WireMessage::InspectionMark { seq, .. }
            | WireMessage::AgentPose { seq, .. }
            | WireMessage::Estop { seq } => Some(*seq),
            WireMessage::SessionAnnounce { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("frame of {0} bytes is shorter than the header")]
    TooShort(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("length mismatch: expected {expected} bytes, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("crc mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("invalid payload: {0}")]
    InvalidPayload(String),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn vec3(&mut self, v: &Vec3) {
        for c in v.iter() {
            self.f64(*c);
        }
    }
    fn quat(&mut self, q: &Quaternion<f64>) {
        for c in [q.w, q.i, q.j, q.k] {
            self.f64(c);
        }
    }
}

pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let ty = msg.message_type();
    let mut w = Writer(Vec::with_capacity(ty.frame_len()));
    w.0.extend_from_slice(&MAGIC);
    w.0.push(VERSION);
    w.0.push(ty as u8);
    match msg {
        WireMessage::TeacherPose {
            seq,
            t,
            position,
            orientation,
        } => {
            w.u32(*seq);
            w.u64(t.nanos());
            w.vec3(position);
            w.quat(orientation);
        }
        WireMessage::InspectionMark { seq, t, position, yaw } => {
            w.u32(*seq);
            w.u64(t.nanos());
            w.vec3(position);
            w.f64(*yaw);
        }
        WireMessage::AgentPose {
            agent_id,
            seq,
            t,
            position,
            orientation,
        } => {
            w.u32(*agent_id);
            w.u32(*seq);
            w.u64(t.nanos());
            w.vec3(position);
            w.quat(orientation);
        }
        WireMessage::SessionAnnounce { digest, frame_id } => {
            w.u64(*digest);
            let mut label = [0u8; FRAME_LABEL_LEN];
            label[..frame_id.0.len()].copy_from_slice(frame_id.0.as_bytes());
            w.0.extend_from_slice(&label);
        }
        WireMessage::Estop { seq } => w.u32(*seq),
    }
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    debug_assert_eq!(w.0.len(), ty.frame_len());
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.bytes[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        out
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
    fn vec3(&mut self) -> Vec3 {
        let x = self.f64();
        let y = self.f64();
        let z = self.f64();
        Vec3::new(x, y, z)
    }
    fn quat(&mut self) -> Quaternion<f64> {
        let w = self.f64();
        let x = self.f64();
        let y = self.f64();
        let z = self.f64();
        Quaternion::new(w, x, y, z)
    }
}

/// Total over arbitrary input: every byte string yields a message or an error.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, DecodeError> {
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::TooShort(bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(DecodeError::UnsupportedVersion(bytes[4]));
    }
    let ty = MessageType::from_byte(bytes[5]).ok_or(DecodeError::UnknownType(bytes[5]))?;
    let expected = ty.frame_len();
    if bytes.len() != expected {
        return Err(DecodeError::LengthMismatch {
            expected,
            got: bytes.len(),
        });
    }
    let body = &bytes[..expected - CRC_LEN];
    let stored = u32::from_le_bytes(bytes[expected - CRC_LEN..].try_into().expect("length checked"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(DecodeError::CrcMismatch { stored, computed });
    }
    let mut r = Reader {
        bytes: body,
        pos: HEADER_LEN,
    };
    Ok(match ty {
        MessageType::TeacherPose => WireMessage::TeacherPose {
            seq: r.u32(),
            t: Timestamp(r.u64()),
            position: r.vec3(),
            orientation: r.quat(),
        },
        MessageType::InspectionMark => WireMessage::InspectionMark {
            seq: r.u32(),
            t: Timestamp(r.u64()),
            position: r.vec3(),
            yaw: r.f64(),
        },
        MessageType::AgentPose => WireMessage::AgentPose {
            agent_id: r.u32(),
            seq: r.u32(),
            t: Timestamp(r.u64()),
            position: r.vec3(),
            orientation: r.quat(),
        },
        MessageType::SessionAnnounce => {
            let digest = r.u64();
            let raw: [u8; FRAME_LABEL_LEN] = r.take();
            let end = raw.iter().position(|&b| b == 0).unwrap_or(FRAME_LABEL_LEN);
            if raw[end..].iter().any(|&b| b != 0) {
                return Err(DecodeError::InvalidPayload("frame label has bytes after NUL".into()));
            }
            let s = std::str::from_utf8(&raw[..end])
                .map_err(|e| DecodeError::InvalidPayload(format!("frame label: {e}")))?;
            WireMessage::SessionAnnounce {
                digest,
                frame_id: FrameLabel(s.to_owned()),
            }
        }
        MessageType::Estop => WireMessage::Estop { seq: r.u32() },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Stale,
}

/// Freshest-wins filter per sender and message type.
#[derive(Debug, Clone, Default)]
pub struct ReceiverFilter {
    highest: HashMap<(SenderId, MessageType), u32>,
}

impl ReceiverFilter {
    pub fn new() -> Self {
        Self::default()
    }

    /// Accepts iff the sequence number exceeds the highest accepted so far
    /// for this sender and type. Unsequenced messages are always accepted.
    pub fn check(&mut self, sender: SenderId, msg: &WireMessage) -> Verdict {
        let Some(seq) = msg.seq() else {
            return Verdict::Accept;
        };
        let key = (sender, msg.message_type());
        match self.highest.get(&key) {
            Some(&h) if seq <= h => Verdict::Stale,
            _ => {
                self.highest.insert(key, seq);
                Verdict::Accept
            }
        }
    }
}

/// One received datagram with its out-of-band sender.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub sender: SenderId,
    pub bytes: Vec<u8>,
}

/// Shared send/poll interface of the simulated link and real sockets.
pub trait Transport {
    fn send(&mut self, now: Timestamp, datagram: Datagram) -> std::io::Result<()>;
    /// Datagrams deliverable at `now`, in delivery order.
    fn poll(&mut self, now: Timestamp) -> std::io::Result<Vec<Datagram>>;
}

/// Counters kept by a [`Receiver`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReceiveStats {
    pub accepted: u64,
    pub stale: u64,
    pub corrupt: u64,
}

/// Decodes and filters datagrams, discarding corrupt and stale ones.
#[derive(Debug, Clone, Default)]
pub struct Receiver {
    filter: ReceiverFilter,
    stats: ReceiveStats,
}

impl Receiver {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> ReceiveStats {
        self.stats
    }

    pub fn receive(&mut self, datagram: &Datagram) -> Option<WireMessage> {
        let msg = match decode(&datagram.bytes) {
            Ok(m) => m,
            Err(e) => {
                log::debug!("dropping corrupt datagram from {}: {e}", datagram.sender);
                self.stats.corrupt += 1;
                return None;
            }
        };
        match self.filter.check(datagram.sender, &msg) {
            Verdict::Accept => {
                self.stats.accepted += 1;
                Some(msg)
            }
            Verdict::Stale => {
                self.stats.stale += 1;
                None
            }
        }
    }
}
