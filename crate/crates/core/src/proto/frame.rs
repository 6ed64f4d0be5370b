//! Wire frame, big-endian:
//!
//! ```text
//! magic 0xD7 | version 0x01 | msg_type u8 | generation u32 | agent_id u32 |
//! payload_len u32 | payload
//! ```

use thiserror::Error;

pub const FRAME_MAGIC: u8 = 0xD7;
pub const FRAME_VERSION: u8 = 0x01;
pub const FRAME_HEADER_LEN: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0x00,
    CkptRequest = 0x01,
    Ack = 0x02,
    Nack = 0x03,
    Commit = 0x04,
    RestartInfo = 0x05,
}

impl MsgType {
    pub const ALL: [MsgType; 6] =
        [Self::Hello, Self::CkptRequest, Self::Ack, Self::Nack, Self::Commit, Self::RestartInfo];

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.get(b as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CkptFrame {
    pub msg_type: MsgType,
    pub generation: u32,
    pub agent_id: u32,
    pub payload: Vec<u8>,
}

impl CkptFrame {
    pub fn new(msg_type: MsgType, generation: u32, agent_id: u32) -> Self {
        Self { msg_type, generation, agent_id, payload: Vec::new() }
    }

    pub fn with_payload(mut self, payload: impl Into<Vec<u8>>) -> Self {
        self.payload = payload.into();
        self
    }

    pub fn payload_text(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }

    /// Prefix the payload with a round attempt number. CKPT_REQUEST, ACK
    /// and agent NACK frames carry one.
    pub fn with_attempt(mut self, attempt: u32, rest: &[u8]) -> Self {
        let mut p = attempt.to_be_bytes().to_vec();
        p.extend_from_slice(rest);
        self.payload = p;
        self
    }

    pub fn attempt(&self) -> Option<u32> {
        let b: [u8; 4] = self.payload.get(..4)?.try_into().ok()?;
        Some(u32::from_be_bytes(b))
    }

    /// Payload text after the attempt prefix.
    pub fn text_after_attempt(&self) -> String {
        String::from_utf8_lossy(self.payload.get(4..).unwrap_or_default()).into_owned()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("payload of {0} bytes does not fit a u32 length prefix")]
    OversizePayload(usize),
    #[error("bad magic byte {0:#04x}")]
    BadMagic(u8),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Frame { frame: CkptFrame, consumed: usize },
    NeedMoreBytes,
}

pub(crate) fn check_payload_len(len: usize) -> Result<u32, FrameError> {
    u32::try_from(len).map_err(|_| FrameError::OversizePayload(len))
}

pub fn encode_frame(f: &CkptFrame) -> Result<Vec<u8>, FrameError> {
    let len = check_payload_len(f.payload.len())?;
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + f.payload.len());
    out.push(FRAME_MAGIC);
    out.push(FRAME_VERSION);
    out.push(f.msg_type as u8);
    out.extend_from_slice(&f.generation.to_be_bytes());
    out.extend_from_slice(&f.agent_id.to_be_bytes());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&f.payload);
    Ok(out)
}

/// Decode the first frame in `b`. Header fields are checked as soon as
/// they arrive, so a corrupted peer is reported without waiting for a
/// full frame. Never reads past the first frame.
pub fn decode_frame(b: &[u8]) -> Result<Decoded, FrameError> {
    if let Some(&m) = b.first() {
        if m != FRAME_MAGIC {
            return Err(FrameError::BadMagic(m));
        }
    }
    if let Some(&v) = b.get(1) {
        if v != FRAME_VERSION {
            return Err(FrameError::BadVersion(v));
        }
    }
    let msg_type = match b.get(2) {
        Some(&t) => MsgType::from_byte(t).ok_or(FrameError::UnknownType(t))?,
        None => return Ok(Decoded::NeedMoreBytes),
    };
    if b.len() < FRAME_HEADER_LEN {
        return Ok(Decoded::NeedMoreBytes);
    }
    let generation = u32::from_be_bytes(b[3..7].try_into().unwrap());
    let agent_id = u32::from_be_bytes(b[7..11].try_into().unwrap());
    let len = u32::from_be_bytes(b[11..15].try_into().unwrap()) as usize;
    let total = FRAME_HEADER_LEN + len;
    if b.len() < total {
        return Ok(Decoded::NeedMoreBytes);
    }
    Ok(Decoded::Frame {
        frame: CkptFrame { msg_type, generation, agent_id, payload: b[FRAME_HEADER_LEN..total].to_vec() },
        consumed: total,
    })
}
