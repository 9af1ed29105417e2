//! Feedback bitstream framing.
//!
//! Wire layout: magic `CSIQ`, `u8` quantizer id, `u16` codeword length `L`
//! (little-endian), `u8` bits per index `B`, `u16` embedding length `D`
//! (0 when unused), then the indices bit-packed MSB-first and zero-padded
//! to a byte boundary.

use crate::error::{Error, Result};

pub const BITSTREAM_MAGIC: [u8; 4] = *b"CSIQ";
pub const HEADER_LEN: usize = 10;
pub const MAX_BITS: u8 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum QuantizerId {
    SvqVae = 0,
    Uniform = 1,
    MuLaw = 2,
    BaseVv = 3,
}

impl QuantizerId {
    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => QuantizerId::SvqVae,
            1 => QuantizerId::Uniform,
            2 => QuantizerId::MuLaw,
            3 => QuantizerId::BaseVv,
            other => return Err(Error::CorruptStream(format!("unknown quantizer id {other}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BitstreamHeader {
    pub quantizer: QuantizerId,
    pub codeword_len: u16,
    pub bits: u8,
    pub embedding_dim: u16,
}

impl BitstreamHeader {
    /// Number of packed indices this header implies.
    pub fn index_count(&self) -> usize {
        match self.quantizer {
            QuantizerId::BaseVv => self.codeword_len as usize / self.embedding_dim as usize,
            _ => self.codeword_len as usize,
        }
    }

    pub fn payload_bits(&self) -> usize {
        self.index_count() * self.bits as usize
    }

    pub fn payload_bytes(&self) -> usize {
        self.payload_bits().div_ceil(8)
    }

    fn validate(&self) -> Result<()> {
        if self.codeword_len == 0 {
            return Err(Error::CorruptStream("zero codeword length".into()));
        }
        if self.bits == 0 || self.bits > MAX_BITS {
            return Err(Error::CorruptStream(format!("unsupported bit width {}", self.bits)));
        }
        let d = self.embedding_dim;
        match self.quantizer {
            QuantizerId::SvqVae if d == 0 => {
                Err(Error::CorruptStream("SVQ-VAE stream without embedding length".into()))
            }
            QuantizerId::BaseVv if d == 0 || self.codeword_len % d != 0 => Err(Error::CorruptStream(
                format!("embedding length {d} does not tile codeword length {}", self.codeword_len),
            )),
            QuantizerId::Uniform | QuantizerId::MuLaw if d != 0 => {
                Err(Error::CorruptStream("scalar quantizer stream with embedding length".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: BitstreamHeader,
    payload: Vec<u8>,
}

impl Bitstream {
    /// Packs `indices` under `header`; every index must fit in `header.bits`.
    pub fn pack(header: BitstreamHeader, indices: &[u32]) -> Result<Self> {
        header.validate()?;
        if indices.len() != header.index_count() {
            return Err(Error::dim(format!(
                "header implies {} indices, got {}",
                header.index_count(),
                indices.len()
            )));
        }
        let b = header.bits as u32;
        if let Some(bad) = indices.iter().find(|&&i| i >> b != 0) {
            return Err(Error::dim(format!("index {bad} does not fit in {b} bits")));
        }
        Ok(Self { header, payload: pack_bits(indices, b) })
    }

    pub fn unpack(&self) -> Vec<u32> {
        unpack_bits(&self.payload, self.header.bits as u32, self.header.index_count())
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn payload_bits(&self) -> usize {
        self.header.payload_bits()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&BITSTREAM_MAGIC);
        out.push(h.quantizer as u8);
        out.extend_from_slice(&h.codeword_len.to_le_bytes());
        out.push(h.bits);
        out.extend_from_slice(&h.embedding_dim.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated { expected: HEADER_LEN, found: bytes.len() });
        }
        if bytes[..4] != BITSTREAM_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(Error::BadMagic { expected: BITSTREAM_MAGIC, found });
        }
        let header = BitstreamHeader {
            quantizer: QuantizerId::from_u8(bytes[4])?,
            codeword_len: u16::from_le_bytes([bytes[5], bytes[6]]),
            bits: bytes[7],
            embedding_dim: u16::from_le_bytes([bytes[8], bytes[9]]),
        };
        header.validate()?;
        let payload = &bytes[HEADER_LEN..];
        let expected = header.payload_bytes();
        if payload.len() != expected {
            return Err(Error::Truncated { expected, found: payload.len() });
        }
        let used = header.payload_bits() % 8;
        if used != 0 && payload[expected - 1] & (0xff >> used) != 0 {
            return Err(Error::CorruptStream("non-zero padding bits".into()));
        }
        Ok(Self { header, payload: payload.to_vec() })
    }
}

/// MSB-first packing of `bits`-wide values.
pub fn pack_bits(values: &[u32], bits: u32) -> Vec<u8> {
    let total = values.len() * bits as usize;
    let mut out = vec![0u8; total.div_ceil(8)];
    let mut pos = 0usize;
    for &v in values {
        for b in (0..bits).rev() {
            if (v >> b) & 1 == 1 {
                out[pos / 8] |= 0x80 >> (pos % 8);
            }
            pos += 1;
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], bits: u32, count: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(count);
    let mut pos = 0usize;
    for _ in 0..count {
        let mut v = 0u32;
        for _ in 0..bits {
            let bit = (bytes[pos / 8] >> (7 - pos % 8)) & 1;
            v = (v << 1) | bit as u32;
            pos += 1;
        }
        out.push(v);
    }
    out
}
