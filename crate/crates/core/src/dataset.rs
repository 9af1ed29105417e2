//! `CSID` dataset files and the headerless raw importer.
//!
//! Layout (little-endian): magic `CSID`, `u16` version (1), `u32` sample
//! count, `u16 n_a`, `u16 n_t`, `f64` scale, then every sample as a
//! row-major `n_a x 2n_t` block of `f32`.

use std::fs;
use std::path::Path;

use crate::channel::{self, AngularDelayCsi, ChannelConfig, RealCsi};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"CSID";
pub const DATASET_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 2 + 2 + 8;

/// Normalized samples sharing one scale and shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_a: usize,
    pub n_t: usize,
    pub scale: f64,
    /// Each entry is `n_a x 2n_t`.
    pub samples: Vec<Tensor>,
}

impl Dataset {
    pub fn new(n_a: usize, n_t: usize, scale: f64, samples: Vec<Tensor>) -> Result<Self> {
        for s in &samples {
            if s.shape() != [n_a, 2 * n_t] {
                return Err(Error::dim(format!(
                    "sample shape {:?}, expected [{n_a}, {}]",
                    s.shape(),
                    2 * n_t
                )));
            }
        }
        Ok(Self { n_a, n_t, scale, samples })
    }

    pub fn from_real(samples: &[RealCsi]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| Error::config("empty dataset"))?;
        let (n_a, cols) = first.matrix.dims2()?;
        if samples.iter().any(|s| s.scale != first.scale) {
            return Err(Error::config("samples use different normalization scales"));
        }
        let tensors = samples.iter().map(|s| s.matrix.clone()).collect();
        Self::new(n_a, cols / 2, first.scale, tensors)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn real(&self, i: usize) -> RealCsi {
        RealCsi { matrix: self.samples[i].clone(), scale: self.scale }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            n_a: self.n_a,
            n_t: self.n_t,
            scale: self.scale,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dim16 = |v: usize, what: &str| {
            u16::try_from(v).map_err(|_| Error::config(format!("{what} = {v} exceeds u16")))
        };
        let count = u32::try_from(self.samples.len())
            .map_err(|_| Error::config("too many samples for u32 count"))?;
        let block = self.n_a * 2 * self.n_t;
        let mut out = Vec::with_capacity(HEADER_LEN + self.samples.len() * block * 4);
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&dim16(self.n_a, "n_a")?.to_le_bytes());
        out.extend_from_slice(&dim16(self.n_t, "n_t")?.to_le_bytes());
        out.extend_from_slice(&self.scale.to_le_bytes());
        for s in &self.samples {
            for v in s.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != DATASET_MAGIC {
                return Err(bad_magic(bytes));
            }
            return Err(Error::Truncated { expected: HEADER_LEN, found: bytes.len() });
        }
        if bytes[..4] != DATASET_MAGIC {
            return Err(bad_magic(bytes));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != DATASET_VERSION {
            return Err(Error::Version { expected: DATASET_VERSION, found: version });
        }
        let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let n_a = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
        let n_t = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
        let scale = f64::from_le_bytes(bytes[14..22].try_into().unwrap());
        if n_a == 0 || n_t == 0 {
            return Err(Error::dim("dataset header declares a zero dimension"));
        }
        let block = n_a * 2 * n_t;
        let payload = &bytes[HEADER_LEN..];
        let expected = count * block * 4;
        if payload.len() != expected {
            return Err(Error::Truncated { expected, found: payload.len() });
        }
        let samples = payload
            .chunks_exact(block * 4)
            .map(|chunk| {
                let data = chunk
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                    .collect();
                Tensor::matrix(n_a, 2 * n_t, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { n_a, n_t, scale, samples })
    }
}

fn bad_magic(bytes: &[u8]) -> Error {
    let mut found = [0u8; 4];
    let n = bytes.len().min(4);
    found[..n].copy_from_slice(&bytes[..n]);
    Error::BadMagic { expected: DATASET_MAGIC, found }
}

/// Truncated angular-delay samples from generator streams `first..first + count`.
pub fn synthetic_angular_delay(
    cfg: &ChannelConfig,
    first: u64,
    count: usize,
) -> Result<Vec<AngularDelayCsi>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::config("sample count must be at least 1"));
    }
    (first..first + count as u64)
        .map(|i| channel::truncate(&channel::dft_forward(&channel::synthetic_sample(cfg, i)), cfg.n_a))
        .collect()
}

/// Maps samples into `[0, 1]` with a shared `scale`, rounding every value
/// to `f32` so the result equals what a saved file reads back.
pub fn normalize(samples: &[AngularDelayCsi], scale: f64) -> Result<Dataset> {
    let real = samples
        .iter()
        .map(|s| {
            let mut r = channel::to_real(s, scale)?;
            r.matrix.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::from_real(&real)
}

/// Streams `first..first + count`, normalized by their own max-abs.
pub fn synthetic_dataset(cfg: &ChannelConfig, first: u64, count: usize) -> Result<Dataset> {
    let ad = synthetic_angular_delay(cfg, first, count)?;
    normalize(&ad, channel::max_abs(&ad))
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    fs::write(path, ds.to_bytes()?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}

/// Element order of a headerless raw export.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RawLayout {
    /// `[2][n_a][n_t]` per sample: a real plane then an imaginary plane.
    ChannelFirst,
    /// `[n_a][2 n_t]` per sample, already in network layout.
    Concatenated,
}

/// Reads little-endian `f32` samples already normalized to `[0, 1]` with
/// the caller-declared `scale`.
pub fn import_raw(
    bytes: &[u8],
    n_a: usize,
    n_t: usize,
    layout: RawLayout,
    scale: f64,
) -> Result<Dataset> {
    let block = n_a * 2 * n_t;
    if block == 0 {
        return Err(Error::config("raw import dims must be positive"));
    }
    if bytes.len() % (block * 4) != 0 || bytes.is_empty() {
        return Err(Error::Truncated {
            expected: (bytes.len() / (block * 4) + 1) * block * 4,
            found: bytes.len(),
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let samples = values
        .chunks_exact(block)
        .map(|s| {
            let data = match layout {
                RawLayout::Concatenated => s.to_vec(),
                RawLayout::ChannelFirst => {
                    let plane = n_a * n_t;
                    let mut d = Vec::with_capacity(block);
                    for r in 0..n_a {
                        d.extend_from_slice(&s[r * n_t..(r + 1) * n_t]);
                        d.extend_from_slice(&s[plane + r * n_t..plane + (r + 1) * n_t]);
                    }
                    d
                }
            };
            Tensor::matrix(n_a, 2 * n_t, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(n_a, n_t, scale, samples)
}
