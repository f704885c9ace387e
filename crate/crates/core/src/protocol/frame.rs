//! Wire framing: `STLS` magic, version, kind, layer index, payload length,
//! payload, CRC-32 of the payload. Integers are little-endian.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"STLS";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;
pub const TRAILER_LEN: usize = 4;
pub const MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Kind {
    SpecRequest = 1,
    SpecReply = 2,
    Config = 3,
    LayerRequest = 4,
    LayerData = 5,
    JobDone = 6,
    Abort = 7,
    Error = 8,
}

impl Kind {
    pub const ALL: [Kind; 8] = [
        Kind::SpecRequest,
        Kind::SpecReply,
        Kind::Config,
        Kind::LayerRequest,
        Kind::LayerData,
        Kind::JobDone,
        Kind::Abort,
        Kind::Error,
    ];

    pub fn from_u8(b: u8) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| *k as u8 == b)
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown protocol version {0}")]
    UnknownVersion(u8),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("payload of {0} bytes exceeds the frame limit")]
    TooLarge(u64),
    #[error("crc mismatch on {kind:?}({layer}): frame says {expected:08x}, payload gives {actual:08x}")]
    BadCrc { kind: Kind, layer: u32, expected: u32, actual: u32 },
    #[error("truncated frame")]
    Truncated,
    #[error(transparent)]
    Io(io::Error),
}

impl FrameError {
    /// True when the stream is still aligned on a frame boundary, so the
    /// session could carry on.
    pub fn is_recoverable(&self) -> bool {
        matches!(self, FrameError::BadCrc { .. })
    }
}

impl From<io::Error> for FrameError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof { FrameError::Truncated } else { FrameError::Io(e) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: Kind,
    /// Meaningful for layer requests and layer data; zero otherwise.
    pub layer: u32,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(kind: Kind, layer: u32, payload: impl Into<Vec<u8>>) -> Self {
        Self { kind, layer, payload: payload.into() }
    }

    pub fn spec_request() -> Self {
        Self::new(Kind::SpecRequest, 0, [])
    }

    pub fn layer_request(n: u32) -> Self {
        Self::new(Kind::LayerRequest, n, [])
    }

    pub fn text(kind: Kind, s: &str) -> Self {
        Self::new(kind, 0, s.as_bytes())
    }

    pub fn payload_text(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }

    pub fn crc(&self) -> u32 {
        crc32fast::hash(&self.payload)
    }
}

pub fn frame_message(m: &Message) -> Result<Vec<u8>, FrameError> {
    if m.payload.len() > MAX_PAYLOAD {
        return Err(FrameError::TooLarge(m.payload.len() as u64));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + m.payload.len() + TRAILER_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(m.kind as u8);
    out.extend_from_slice(&m.layer.to_le_bytes());
    out.extend_from_slice(&(m.payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&m.payload);
    out.extend_from_slice(&m.crc().to_le_bytes());
    Ok(out)
}

struct Header {
    kind: Kind,
    layer: u32,
    len: usize,
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header, FrameError> {
    let magic: [u8; 4] = h[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FrameError::BadMagic(magic));
    }
    if h[4] != VERSION {
        return Err(FrameError::UnknownVersion(h[4]));
    }
    let kind = Kind::from_u8(h[5]).ok_or(FrameError::UnknownKind(h[5]))?;
    let layer = u32::from_le_bytes(h[6..10].try_into().unwrap());
    let len = u32::from_le_bytes(h[10..14].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(FrameError::TooLarge(len as u64));
    }
    Ok(Header { kind, layer, len })
}

fn check(h: Header, payload: Vec<u8>, crc: [u8; 4]) -> Result<Message, FrameError> {
    let m = Message { kind: h.kind, layer: h.layer, payload };
    let expected = u32::from_le_bytes(crc);
    let actual = m.crc();
    if expected != actual {
        return Err(FrameError::BadCrc { kind: m.kind, layer: m.layer, expected, actual });
    }
    Ok(m)
}

/// Decode one frame from the front of `bytes`; returns the message and the
/// number of bytes consumed.
pub fn parse_frame(bytes: &[u8]) -> Result<(Message, usize), FrameError> {
    let h: &[u8; HEADER_LEN] = bytes.get(..HEADER_LEN).ok_or(FrameError::Truncated)?.try_into().unwrap();
    let h = parse_header(h)?;
    let end = HEADER_LEN + h.len;
    let payload = bytes.get(HEADER_LEN..end).ok_or(FrameError::Truncated)?.to_vec();
    let crc: [u8; 4] = bytes.get(end..end + TRAILER_LEN).ok_or(FrameError::Truncated)?.try_into().unwrap();
    Ok((check(h, payload, crc)?, end + TRAILER_LEN))
}

/// Read one frame. The length is checked before the payload is allocated.
pub fn read_message<R: Read>(r: &mut R) -> Result<Message, FrameError> {
    let mut h = [0u8; HEADER_LEN];
    r.read_exact(&mut h)?;
    let h = parse_header(&h)?;
    let mut payload = vec![0u8; h.len];
    r.read_exact(&mut payload)?;
    let mut crc = [0u8; 4];
    r.read_exact(&mut crc)?;
    check(h, payload, crc)
}

pub fn write_message<W: Write>(w: &mut W, m: &Message) -> Result<usize, FrameError> {
    let bytes = frame_message(m)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}
