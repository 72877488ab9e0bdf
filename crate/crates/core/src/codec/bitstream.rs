//! `.sptk` container: a fixed 28-byte little-endian header followed by the
//! codes packed frame by frame, stage by stage, `ceil(log2(size))` bits
//! each, most significant bit first.
//!
//! ```text
//! offset size field
//!      0    4 magic "SPTK"
//!      4    1 version (1)
//!      5    4 sample_rate
//!      9    1 n_stages
//!     10    4 codebook_size
//!     14    2 frame_rate
//!     16    4 n_frames
//!     20    8 config_hash
//!     28    . payload, ceil(n_frames * n_stages * bits / 8) bytes
//! ```

use crate::error::{Error, Result};
use crate::quantizer::{bits_per_code, CodeSequence};

pub const MAGIC: [u8; 4] = *b"SPTK";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub sample_rate: u32,
    pub n_stages: u8,
    pub codebook_size: u32,
    pub frame_rate: u16,
    pub n_frames: u32,
    pub config_hash: u64,
}

impl Header {
    pub fn bits_per_code(&self) -> u32 {
        bits_per_code(self.codebook_size as usize)
    }

    pub fn payload_len(&self) -> usize {
        let bits = self.n_frames as u64 * self.n_stages as u64 * self.bits_per_code() as u64;
        bits.div_ceil(8) as usize
    }

    pub fn kbps(&self) -> f64 {
        (self.n_stages as u64 * self.bits_per_code() as u64 * self.frame_rate as u64) as f64
            / 1000.0
    }

    pub fn seconds(&self) -> f64 {
        if self.frame_rate == 0 {
            0.0
        } else {
            self.n_frames as f64 / self.frame_rate as f64
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.sample_rate.to_le_bytes());
        out.push(self.n_stages);
        out.extend_from_slice(&self.codebook_size.to_le_bytes());
        out.extend_from_slice(&self.frame_rate.to_le_bytes());
        out.extend_from_slice(&self.n_frames.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
    }

    /// Parses and checks the header at the start of `bytes`.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Bitstream(format!(
                "{} bytes is shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Bitstream(format!("bad magic {:02x?}", &bytes[..4])));
        }
        if bytes[4] != VERSION {
            return Err(Error::Bitstream(format!(
                "unsupported version {}",
                bytes[4]
            )));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let h = Self {
            sample_rate: u32_at(5),
            n_stages: bytes[9],
            codebook_size: u32_at(10),
            frame_rate: u16::from_le_bytes([bytes[14], bytes[15]]),
            n_frames: u32_at(16),
            config_hash: u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")),
        };
        if h.n_stages == 0 || h.codebook_size < 2 {
            return Err(Error::Bitstream(format!(
                "header declares {} stages of {} entries",
                h.n_stages, h.codebook_size
            )));
        }
        Ok(h)
    }
}

/// Serializes `codes` with the given stream metadata.
pub fn pack(codes: &CodeSequence, sample_rate: u32, config_hash: u64) -> Result<Vec<u8>> {
    let field = |name: &str, v: usize, max: u64| -> Result<u64> {
        if v as u64 > max {
            Err(Error::Bitstream(format!(
                "{name} {v} does not fit its header field"
            )))
        } else {
            Ok(v as u64)
        }
    };
    let header = Header {
        sample_rate,
        n_stages: field("n_stages", codes.n_stages(), u8::MAX as u64)? as u8,
        codebook_size: field("codebook_size", codes.codebook_size(), u32::MAX as u64)? as u32,
        frame_rate: field("frame_rate", codes.frame_rate(), u16::MAX as u64)? as u16,
        n_frames: field("n_frames", codes.frames(), u32::MAX as u64)? as u32,
        config_hash,
    };
    let bits = header.bits_per_code();
    let mut out = Vec::with_capacity(HEADER_LEN + header.payload_len());
    header.write(&mut out);

    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &c in codes.as_slice() {
        acc = (acc << bits) | c as u64;
        filled += bits;
        while filled >= 8 {
            filled -= 8;
            out.push((acc >> filled) as u8);
        }
        acc &= (1u64 << filled) - 1;
    }
    if filled > 0 {
        out.push((acc << (8 - filled)) as u8);
    }
    debug_assert_eq!(out.len(), HEADER_LEN + header.payload_len());
    Ok(out)
}

/// Parses a whole stream. The byte count must match the header exactly.
pub fn unpack(bytes: &[u8]) -> Result<(Header, CodeSequence)> {
    let header = Header::parse(bytes)?;
    let payload = &bytes[HEADER_LEN..];
    let need = header.payload_len();
    if payload.len() != need {
        return Err(Error::Bitstream(format!(
            "payload is {} bytes, header implies {need}",
            payload.len()
        )));
    }
    let bits = header.bits_per_code();
    let total = header.n_frames as usize * header.n_stages as usize;
    let mut codes = Vec::with_capacity(total);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut bytes_iter = payload.iter();
    let mask = (1u64 << bits) - 1;
    while codes.len() < total {
        while filled < bits {
            let b = *bytes_iter.next().expect("length checked");
            acc = (acc << 8) | b as u64;
            filled += 8;
        }
        filled -= bits;
        codes.push(((acc >> filled) & mask) as u32);
        acc &= (1u64 << filled) - 1;
    }
    let seq = CodeSequence::new(
        codes,
        header.n_stages as usize,
        header.codebook_size as usize,
        header.frame_rate as usize,
    )
    .map_err(|e| Error::Bitstream(e.to_string()))?;
    Ok((header, seq))
}
