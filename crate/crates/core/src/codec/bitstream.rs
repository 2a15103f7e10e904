//! Container format. All integers little-endian.
//!
//! ```text
//! "SDPB" u8 version
//! config: u8 mode, u8 m, u8 model_id, u8 inter, u8 scheme, u8 bit_depth, [u8; 32] weight hash
//! u32 frame count
//! frame: u32 index, u8 type, u32 point_count, u8 n, u32 counts[n],
//!        u32 geometry_len, u32 latent_len, geometry bytes, latent bytes
//! u32 CRC32 of everything before it
//! ```

use std::path::Path;

use crate::codec::{EncodeConfig, InterScheme, Mode};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDPB";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameType {
    Intra,
    Predicted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub index: u32,
    pub frame_type: FrameType,
    pub point_count: u32,
    /// Occupied counts of the lossy scales `m + 1 ..= N` (empty when lossless).
    pub scale_counts: Vec<u32>,
    pub geometry_len: u32,
    pub latent_len: u32,
}

impl FrameHeader {
    /// Serialized size of this header.
    pub fn size(&self) -> usize {
        4 + 1 + 4 + 1 + 4 * self.scale_counts.len() + 4 + 4
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedFrame {
    pub header: FrameHeader,
    pub geometry: Vec<u8>,
    pub latent: Vec<u8>,
}

impl EncodedFrame {
    /// Payload bytes (both sub-streams, headers excluded).
    pub fn payload_len(&self) -> usize {
        self.geometry.len() + self.latent.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub config: EncodeConfig,
    pub weight_hash: [u8; 32],
    pub frames: Vec<EncodedFrame>,
}

/// Stream header bytes before the first frame.
pub const STREAM_HEADER_LEN: usize = 4 + 1 + 6 + 32 + 4;
const TRAILER_LEN: usize = 4;

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let c = &self.config;
        out.push(match c.mode {
            Mode::Lossless => 0,
            Mode::Lossy => 1,
        });
        out.push(c.m);
        out.push(c.model_id);
        out.push(c.inter_enabled as u8);
        out.push(match c.scheme {
            InterScheme::Conditional => 0,
            InterScheme::Residual => 1,
        });
        out.push(c.bit_depth);
        out.extend_from_slice(&self.weight_hash);
        out.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        for f in &self.frames {
            let h = &f.header;
            out.extend_from_slice(&h.index.to_le_bytes());
            out.push(match h.frame_type {
                FrameType::Intra => 0,
                FrameType::Predicted => 1,
            });
            out.extend_from_slice(&h.point_count.to_le_bytes());
            out.push(h.scale_counts.len() as u8);
            for k in &h.scale_counts {
                out.extend_from_slice(&k.to_le_bytes());
            }
            out.extend_from_slice(&(f.geometry.len() as u32).to_le_bytes());
            out.extend_from_slice(&(f.latent.len() as u32).to_le_bytes());
            out.extend_from_slice(&f.geometry);
            out.extend_from_slice(&f.latent);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < STREAM_HEADER_LEN + TRAILER_LEN || &bytes[..4] != MAGIC {
            return Err(Error::Format("not an SDPB bitstream".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Version { found: bytes[4] as u32, expected: VERSION as u32 });
        }
        let body = &bytes[..bytes.len() - TRAILER_LEN];
        let stored = u32::from_le_bytes(bytes[bytes.len() - TRAILER_LEN..].try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("bitstream checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 5 };
        let mode = match r.u8()? {
            0 => Mode::Lossless,
            1 => Mode::Lossy,
            v => return Err(Error::Format(format!("unknown coding mode {v}"))),
        };
        let m = r.u8()?;
        let model_id = r.u8()?;
        let inter_enabled = match r.u8()? {
            0 => false,
            1 => true,
            v => return Err(Error::Format(format!("bad inter flag {v}"))),
        };
        let scheme = match r.u8()? {
            0 => InterScheme::Conditional,
            1 => InterScheme::Residual,
            v => return Err(Error::Format(format!("unknown inter scheme {v}"))),
        };
        let bit_depth = r.u8()?;
        let config = EncodeConfig { mode, m, model_id, inter_enabled, scheme, bit_depth };
        config.validate().map_err(|e| Error::Format(format!("invalid stream config: {e}")))?;
        let weight_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let n = r.u32()? as usize;
        let mut frames = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let index = r.u32()?;
            let frame_type = match r.u8()? {
                0 => FrameType::Intra,
                1 => FrameType::Predicted,
                v => return Err(Error::Format(format!("unknown frame type {v}"))),
            };
            let point_count = r.u32()?;
            let nc = r.u8()? as usize;
            let scale_counts = (0..nc).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let geometry_len = r.u32()?;
            let latent_len = r.u32()?;
            let geometry = r.take(geometry_len as usize)?.to_vec();
            let latent = r.take(latent_len as usize)?.to_vec();
            frames.push(EncodedFrame {
                header: FrameHeader {
                    index,
                    frame_type,
                    point_count,
                    scale_counts,
                    geometry_len,
                    latent_len,
                },
                geometry,
                latent,
            });
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes after the last frame", body.len() - r.pos)));
        }
        Ok(Self { config, weight_hash, frames })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Bytes spent on stream header, frame headers and trailer.
    pub fn overhead_len(&self) -> usize {
        STREAM_HEADER_LEN + TRAILER_LEN + self.frames.iter().map(|f| f.header.size()).sum::<usize>()
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() - self.pos {
            return Err(Error::Format("bitstream truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
