//! Bitstream container: a 17-byte global header followed by entropy-coded
//! frames in coding order. Little-endian throughout; extension ".bcf".

use crate::entropy::CodedChunk;
use crate::error::{Error, Result};
use crate::gop::FrameKind;

pub const MAGIC: &[u8; 4] = b"BCNF";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamHeader {
    pub width: u16,
    pub height: u16,
    pub gop_size: u8,
    pub intra_period: u16,
    pub frame_count: u32,
    pub lambda_index: u8,
}

impl StreamHeader {
    pub const BYTES: usize = 17;

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.gop_size);
        out.extend_from_slice(&self.intra_period.to_le_bytes());
        out.extend_from_slice(&self.frame_count.to_le_bytes());
        out.push(self.lambda_index);
    }

    fn read_from(buf: &[u8], pos: &mut usize) -> Result<Self> {
        if buf.len() < *pos + Self::BYTES {
            return Err(Error::Bitstream("truncated stream header".into()));
        }
        let b = &buf[*pos..];
        if &b[0..4] != MAGIC {
            return Err(Error::Bitstream("bad stream magic".into()));
        }
        if b[4] != VERSION {
            return Err(Error::Bitstream(format!("unsupported stream version {}", b[4])));
        }
        let h = StreamHeader {
            width: u16::from_le_bytes([b[5], b[6]]),
            height: u16::from_le_bytes([b[7], b[8]]),
            gop_size: b[9],
            intra_period: u16::from_le_bytes([b[10], b[11]]),
            frame_count: u32::from_le_bytes([b[12], b[13], b[14], b[15]]),
            lambda_index: b[16],
        };
        *pos += Self::BYTES;
        Ok(h)
    }
}

const CHECKSUM_FLAG: u8 = 0x80;

/// One coded frame: I-frames carry [hyper, latent]; B and B* frames carry
/// [motion_hyper, motion_latent, inter_hyper, inter_latent].
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedFrame {
    pub display_index: u32,
    pub kind: FrameKind,
    /// Debug checksum of the reconstruction, when enabled at encode time.
    pub checksum: Option<u32>,
    pub chunks: Vec<CodedChunk>,
}

impl EncodedFrame {
    pub fn expected_chunks(kind: FrameKind) -> usize {
        match kind {
            FrameKind::I => 2,
            _ => 4,
        }
    }

    /// Entropy-coded payload bits (chunk payloads only, excluding headers).
    pub fn payload_bits(&self) -> u64 {
        self.chunks.iter().map(|c| c.payload_bits()).sum()
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.display_index.to_le_bytes());
        let mut ty = self.kind.code();
        if self.checksum.is_some() {
            ty |= CHECKSUM_FLAG;
        }
        out.push(ty);
        if let Some(cs) = self.checksum {
            out.extend_from_slice(&cs.to_le_bytes());
        }
        for c in &self.chunks {
            c.write_to(out);
        }
    }

    fn read_from(buf: &[u8], pos: &mut usize) -> Result<Self> {
        if buf.len() < *pos + 5 {
            return Err(Error::Bitstream("truncated frame header".into()));
        }
        let display_index =
            u32::from_le_bytes([buf[*pos], buf[*pos + 1], buf[*pos + 2], buf[*pos + 3]]);
        let ty = buf[*pos + 4];
        *pos += 5;
        let kind = FrameKind::from_code(ty & !CHECKSUM_FLAG)?;
        let checksum = if ty & CHECKSUM_FLAG != 0 {
            if buf.len() < *pos + 4 {
                return Err(Error::Bitstream("truncated frame checksum".into()));
            }
            let cs =
                u32::from_le_bytes([buf[*pos], buf[*pos + 1], buf[*pos + 2], buf[*pos + 3]]);
            *pos += 4;
            Some(cs)
        } else {
            None
        };
        let mut chunks = Vec::new();
        for _ in 0..Self::expected_chunks(kind) {
            chunks.push(CodedChunk::read_from(buf, pos)?);
        }
        Ok(EncodedFrame { display_index, kind, checksum, chunks })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub header: StreamHeader,
    /// Frames in coding order: references always precede dependents.
    pub frames: Vec<EncodedFrame>,
}

impl Bitstream {
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.header.write_to(&mut out);
        for f in &self.frames {
            f.write_to(&mut out);
        }
        out
    }

    pub fn deserialize(buf: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let header = StreamHeader::read_from(buf, &mut pos)?;
        let mut frames = Vec::with_capacity(header.frame_count as usize);
        for _ in 0..header.frame_count {
            frames.push(EncodedFrame::read_from(buf, &mut pos)?);
        }
        if pos != buf.len() {
            return Err(Error::Bitstream(format!(
                "{} trailing bytes after the last frame",
                buf.len() - pos
            )));
        }
        Ok(Bitstream { header, frames })
    }

    /// Total entropy-coded payload bits across all frames.
    pub fn payload_bits(&self) -> u64 {
        self.frames.iter().map(|f| f.payload_bits()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_stream() -> Bitstream {
        Bitstream {
            header: StreamHeader {
                width: 64,
                height: 64,
                gop_size: 16,
                intra_period: 32,
                frame_count: 2,
                lambda_index: 3,
            },
            frames: vec![
                EncodedFrame {
                    display_index: 0,
                    kind: FrameKind::I,
                    checksum: None,
                    chunks: vec![
                        CodedChunk { symbol_min: -1, symbol_max: 2, payload: vec![1, 2, 3] },
                        CodedChunk { symbol_min: 0, symbol_max: 0, payload: vec![9] },
                    ],
                },
                EncodedFrame {
                    display_index: 1,
                    kind: FrameKind::BStar,
                    checksum: Some(0xdeadbeef),
                    chunks: vec![
                        CodedChunk { symbol_min: 0, symbol_max: 1, payload: vec![4] },
                        CodedChunk { symbol_min: -3, symbol_max: 3, payload: vec![5, 6] },
                        CodedChunk { symbol_min: 0, symbol_max: 0, payload: vec![] },
                        CodedChunk { symbol_min: -1, symbol_max: 1, payload: vec![7, 8, 9, 10] },
                    ],
                },
            ],
        }
    }

    #[test]
    fn header_is_exactly_17_bytes() {
        let s = Bitstream { header: sample_stream().header, frames: vec![] };
        let mut h = s.header.clone();
        h.frame_count = 0;
        let bytes = Bitstream { header: h, frames: vec![] }.serialize();
        assert_eq!(bytes.len(), StreamHeader::BYTES);
    }

    #[test]
    fn serialize_deserialize_roundtrip() {
        let s = sample_stream();
        let bytes = s.serialize();
        let back = Bitstream::deserialize(&bytes).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn flipped_magic_is_rejected() {
        let mut bytes = sample_stream().serialize();
        bytes[0] ^= 0xFF;
        assert!(Bitstream::deserialize(&bytes).is_err());
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample_stream().serialize();
        assert!(Bitstream::deserialize(&bytes[..bytes.len() - 1]).is_err());
        assert!(Bitstream::deserialize(&bytes[..10]).is_err());
    }

    #[test]
    fn payload_bits_counts_only_payloads() {
        let s = sample_stream();
        assert_eq!(s.payload_bits(), 8 * (3 + 1 + 1 + 2 + 0 + 4));
    }
}
