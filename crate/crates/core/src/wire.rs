//! Binary phasor frame codec.
//!
//! All integers little-endian.
//!
//! ```text
//! "AAMF" | version u8 = 1 | stream_id u16 | timestamp_us u64 | nchan u16
//!        | nchan × (angle f64 degrees | quality u8) | crc32 u32
//! ```
//!
//! The CRC covers every byte before it. On a byte stream each frame is
//! preceded by its length as a `u32`.

use std::fmt;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"AAMF";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 2 + 8 + 2;
const CHANNEL_LEN: usize = 8 + 1;
const CRC_LEN: usize = 4;
/// Largest frame a reader will accept (u16::MAX channels).
pub const MAX_FRAME_LEN: usize = HEADER_LEN + u16::MAX as usize * CHANNEL_LEN + CRC_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum Quality {
    Good = 0,
    Suspect = 1,
    Bad = 2,
    Missing = 3,
}

impl Quality {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => Self::Good,
            1 => Self::Suspect,
            2 => Self::Bad,
            3 => Self::Missing,
            _ => return None,
        })
    }

    /// GOOD and SUSPECT samples are used; BAD and MISSING are not.
    pub fn is_usable(self) -> bool {
        matches!(self, Self::Good | Self::Suspect)
    }
}

impl fmt::Display for Quality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Good => "GOOD",
            Self::Suspect => "SUSPECT",
            Self::Bad => "BAD",
            Self::Missing => "MISSING",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSample {
    /// Degrees. Some channels carry magnitudes instead; see the channel map.
    pub angle: f64,
    pub quality: Quality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasorFrame {
    pub stream_id: u16,
    pub timestamp_us: u64,
    pub channels: Vec<ChannelSample>,
}

impl PhasorFrame {
    /// Bitwise equality, so NaN payloads compare equal to themselves.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.stream_id == other.stream_id
            && self.timestamp_us == other.timestamp_us
            && self.channels.len() == other.channels.len()
            && self
                .channels
                .iter()
                .zip(&other.channels)
                .all(|(a, b)| a.angle.to_bits() == b.angle.to_bits() && a.quality == b.quality)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("frame truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("crc mismatch")]
    CrcMismatch,
    #[error("invalid quality code {0}")]
    BadQuality(u8),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("too many channels: {0}")]
    TooManyChannels(usize),
}

pub fn encode_frame(frame: &PhasorFrame) -> Result<Vec<u8>, WireError> {
    let n = frame.channels.len();
    if n > u16::MAX as usize {
        return Err(WireError::TooManyChannels(n));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + n * CHANNEL_LEN + CRC_LEN);
    buf.extend_from_slice(&MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&frame.stream_id.to_le_bytes());
    buf.extend_from_slice(&frame.timestamp_us.to_le_bytes());
    buf.extend_from_slice(&(n as u16).to_le_bytes());
    for c in &frame.channels {
        buf.extend_from_slice(&c.angle.to_le_bytes());
        buf.push(c.quality as u8);
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode_frame(bytes: &[u8]) -> Result<PhasorFrame, WireError> {
    let have = bytes.len();
    if have < HEADER_LEN + CRC_LEN {
        return Err(WireError::Truncated {
            need: HEADER_LEN + CRC_LEN,
            have,
        });
    }
    if bytes[0..4] != MAGIC {
        return Err(WireError::BadMagic);
    }
    let nchan = u16::from_le_bytes([bytes[15], bytes[16]]) as usize;
    let need = HEADER_LEN + nchan * CHANNEL_LEN + CRC_LEN;
    if have < need {
        return Err(WireError::Truncated { need, have });
    }
    if have > need {
        return Err(WireError::TrailingBytes(have - need));
    }
    let body = &bytes[..need - CRC_LEN];
    let crc = u32::from_le_bytes(bytes[need - CRC_LEN..].try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return Err(WireError::CrcMismatch);
    }
    if bytes[4] != VERSION {
        return Err(WireError::BadVersion(bytes[4]));
    }
    let stream_id = u16::from_le_bytes([bytes[5], bytes[6]]);
    let timestamp_us = u64::from_le_bytes(bytes[7..15].try_into().unwrap());
    let channels = body[HEADER_LEN..]
        .chunks_exact(CHANNEL_LEN)
        .map(|c| {
            let angle = f64::from_le_bytes(c[..8].try_into().unwrap());
            let quality = Quality::from_u8(c[8]).ok_or(WireError::BadQuality(c[8]))?;
            Ok(ChannelSample { angle, quality })
        })
        .collect::<Result<_, _>>()?;
    Ok(PhasorFrame {
        stream_id,
        timestamp_us,
        channels,
    })
}

/// Writes one length-prefixed message.
pub fn write_message<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    w.write_all(&(payload.len() as u32).to_le_bytes())?;
    w.write_all(payload)
}

/// Reads one length-prefixed message; `Ok(None)` on a clean end of stream.
pub fn read_message<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("message length {len} exceeds limit"),
        ));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

/// Decodes length-prefixed frames from a reader, counting rejects.
pub struct FrameReader<R> {
    inner: R,
    pub rejected: u64,
    pub last_error: Option<WireError>,
}

impl<R: Read> FrameReader<R> {
    pub fn new(inner: R) -> Self {
        Self {
            inner,
            rejected: 0,
            last_error: None,
        }
    }

    /// Next valid frame; corrupt messages are skipped and counted.
    pub fn next_frame(&mut self) -> io::Result<Option<PhasorFrame>> {
        while let Some(msg) = read_message(&mut self.inner)? {
            match decode_frame(&msg) {
                Ok(f) => return Ok(Some(f)),
                Err(e) => {
                    self.rejected += 1;
                    self.last_error = Some(e);
                }
            }
        }
        Ok(None)
    }
}
