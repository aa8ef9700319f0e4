//! Chunk framing: a fixed 24-byte little-endian header followed by tuples.

use thiserror::Error;

pub const MAGIC: u32 = 0x5552_5348;
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;

/// The last chunk a sender puts on a connection.
pub const FLAG_EOS: u16 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic {0:#010x}")]
    BadMagic(u32),
    #[error("unsupported wire version {0}")]
    BadVersion(u16),
    #[error("payload checksum {found:#010x} does not match header {expected:#010x}")]
    CrcMismatch { expected: u32, found: u32 },
    #[error("frame truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("payload of {payload_len} bytes is not {tuple_count} tuples of {tuple_width} bytes")]
    BadLength {
        payload_len: u32,
        tuple_count: u32,
        tuple_width: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChunkMeta {
    pub flags: u16,
    pub source_node: u16,
    pub partition: u16,
    pub tuple_count: u32,
}

impl ChunkMeta {
    pub fn is_eos(&self) -> bool {
        self.flags & FLAG_EOS != 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub meta: ChunkMeta,
    pub payload_len: u32,
    pub crc: u32,
}

impl Header {
    pub fn write(&self, out: &mut [u8]) {
        out[0..4].copy_from_slice(&MAGIC.to_le_bytes());
        out[4..6].copy_from_slice(&VERSION.to_le_bytes());
        out[6..8].copy_from_slice(&self.meta.flags.to_le_bytes());
        out[8..10].copy_from_slice(&self.meta.source_node.to_le_bytes());
        out[10..12].copy_from_slice(&self.meta.partition.to_le_bytes());
        out[12..16].copy_from_slice(&self.meta.tuple_count.to_le_bytes());
        out[16..20].copy_from_slice(&self.payload_len.to_le_bytes());
        out[20..24].copy_from_slice(&self.crc.to_le_bytes());
    }

    /// Parses a header without looking at the payload.
    pub fn parse(b: &[u8]) -> Result<Header, WireError> {
        if b.len() < HEADER_LEN {
            return Err(WireError::Truncated {
                need: HEADER_LEN,
                have: b.len(),
            });
        }
        let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let magic = u32_at(0);
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        let version = u16_at(4);
        if version != VERSION {
            return Err(WireError::BadVersion(version));
        }
        Ok(Header {
            meta: ChunkMeta {
                flags: u16_at(6),
                source_node: u16_at(8),
                partition: u16_at(10),
                tuple_count: u32_at(12),
            },
            payload_len: u32_at(16),
            crc: u32_at(20),
        })
    }

    pub fn frame_len(&self) -> usize {
        HEADER_LEN + self.payload_len as usize
    }
}

/// Frames `tuples` (a concatenation of `tuple_width`-byte tuples).
pub fn encode_chunk(tuples: &[u8], tuple_width: usize, meta: ChunkMeta) -> Vec<u8> {
    assert!(tuple_width > 0 && tuples.len() % tuple_width == 0);
    let mut out = vec![0u8; HEADER_LEN + tuples.len()];
    out[HEADER_LEN..].copy_from_slice(tuples);
    let meta = ChunkMeta {
        tuple_count: (tuples.len() / tuple_width) as u32,
        ..meta
    };
    seal(&mut out, meta);
    out
}

/// Writes the header for a frame whose payload is already in `frame[HEADER_LEN..]`.
pub fn seal(frame: &mut [u8], meta: ChunkMeta) {
    let (head, payload) = frame.split_at_mut(HEADER_LEN);
    Header {
        meta,
        payload_len: payload.len() as u32,
        crc: crc32c::crc32c(payload),
    }
    .write(head);
}

/// Validates one complete frame and returns its metadata and payload.
pub fn decode_chunk(bytes: &[u8], tuple_width: usize) -> Result<(ChunkMeta, &[u8]), WireError> {
    let h = Header::parse(bytes)?;
    if h.payload_len as u64 != h.meta.tuple_count as u64 * tuple_width as u64 {
        return Err(WireError::BadLength {
            payload_len: h.payload_len,
            tuple_count: h.meta.tuple_count,
            tuple_width,
        });
    }
    if bytes.len() < h.frame_len() {
        return Err(WireError::Truncated {
            need: h.frame_len(),
            have: bytes.len(),
        });
    }
    let payload = &bytes[HEADER_LEN..h.frame_len()];
    let found = crc32c::crc32c(payload);
    if found != h.crc {
        return Err(WireError::CrcMismatch {
            expected: h.crc,
            found,
        });
    }
    Ok((h.meta, payload))
}
