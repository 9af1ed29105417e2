//! Codeword quantizers and their training-time surrogates.
//!
//! * SVQ-VAE: a 1x1 up-channel convolution lifts every codeword element to
//!   a `D`-vector, each vector is replaced by its nearest codebook row, and
//!   a 1x1 down-channel convolution maps the rows back to scalars.
//! * base-VV: contiguous `D`-element blocks of the codeword are matched
//!   against the codebook directly.
//! * Uniform and mu-law: element-wise scalar quantizers trained with a
//!   constant-one gradient.

pub mod bitstream;
pub mod scalar;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub use bitstream::{Bitstream, BitstreamHeader, QuantizerId};
pub use scalar::{
    mulaw_compand, mulaw_dequantize, mulaw_expand, mulaw_quantize, uniform_dequantize,
    uniform_quantize, ScalarQuantizer,
};

pub const DEFAULT_BETA: f64 = 0.25;
pub const DEFAULT_MU: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerKind {
    Svqvae,
    Uniform,
    Mulaw,
    BaseVv,
}

impl QuantizerKind {
    pub const ALL: [QuantizerKind; 4] =
        [QuantizerKind::Uniform, QuantizerKind::Mulaw, QuantizerKind::BaseVv, QuantizerKind::Svqvae];

    pub fn id(self) -> QuantizerId {
        match self {
            QuantizerKind::Svqvae => QuantizerId::SvqVae,
            QuantizerKind::Uniform => QuantizerId::Uniform,
            QuantizerKind::Mulaw => QuantizerId::MuLaw,
            QuantizerKind::BaseVv => QuantizerId::BaseVv,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantizerKind::Svqvae => "svqvae",
            QuantizerKind::Uniform => "uniform",
            QuantizerKind::Mulaw => "mulaw",
            QuantizerKind::BaseVv => "base_vv",
        }
    }
}

impl std::str::FromStr for QuantizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svqvae" | "svq-vae" => Ok(QuantizerKind::Svqvae),
            "uniform" => Ok(QuantizerKind::Uniform),
            "mulaw" | "mu-law" => Ok(QuantizerKind::Mulaw),
            "base_vv" | "base-vv" | "basevv" => Ok(QuantizerKind::BaseVv),
            other => Err(Error::config(format!("unknown quantizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    pub kind: QuantizerKind,
    /// Bits per index; the codebook size is `2^bits`.
    pub bits: u8,
    /// Codebook row length `D` (vector quantizers only).
    #[serde(default = "default_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Clamp range of the scalar quantizers, fitted to encoder outputs.
    #[serde(default)]
    pub range: Option<(f64, f64)>,
}

fn default_dim() -> usize {
    32
}

fn default_mu() -> f64 {
    DEFAULT_MU
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl QuantizerConfig {
    pub fn new(kind: QuantizerKind, bits: u8) -> Self {
        Self { kind, bits, embedding_dim: default_dim(), mu: DEFAULT_MU, beta: DEFAULT_BETA, range: None }
    }
}

/// `K x D` embedding table, `K = 2^bits`.
#[derive(Clone, Debug)]
pub struct Codebook {
    pub embeddings: ParamId,
    pub size: usize,
    pub dim: usize,
}

impl Codebook {
    /// Rows drawn from `U(-1/K, 1/K)`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        size: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if size == 0 || dim == 0 || !size.is_power_of_two() {
            return Err(Error::config(format!(
                "codebook needs a power-of-two size and positive dim, got {size}x{dim}"
            )));
        }
        let embeddings = store.add_range(name, &[size, dim], 1.0 / size as f64, rng)?;
        Ok(Self { embeddings, size, dim })
    }

    pub fn bits(&self) -> u8 {
        self.size.trailing_zeros() as u8
    }

    pub fn param_count(&self) -> usize {
        self.size * self.dim
    }

    pub fn nearest(&self, store: &ParamStore, v: &[f64]) -> Result<usize> {
        nearest_neighbor(v, store.value(self.embeddings))
    }
}

/// Index of the row of `table: [K, D]` closest to `v` in Euclidean
/// distance; ties go to the lowest index.
pub fn nearest_neighbor(v: &[f64], table: &Tensor) -> Result<usize> {
    let (k, d) = table.dims2()?;
    if k == 0 {
        return Err(Error::config("empty codebook"));
    }
    if v.len() != d {
        return Err(Error::dim(format!("vector of length {} for codebook dim {d}", v.len())));
    }
    let mut best = (0, f64::INFINITY);
    for (i, row) in table.data().chunks(d).enumerate() {
        let dist: f64 = row.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best.1 {
            best = (i, dist);
        }
    }
    Ok(best.0)
}

fn nearest_rows(store: &ParamStore, cb: &Codebook, rows: &Tensor) -> Result<Vec<usize>> {
    let table = store.value(cb.embeddings);
    rows.data().chunks(cb.dim).map(|r| nearest_neighbor(r, table)).collect()
}

/// Codebook and commitment terms of the vector-quantizer objective.
#[derive(Clone, Copy, Debug)]
pub struct VqLoss {
    /// `||sg[q_s] - e||^2`, gradient to the codebook only.
    pub codebook: Var,
    /// `beta ||q_s - sg[e]||^2`, gradient to the encoder side only.
    pub commitment: Var,
    pub total: Var,
}

/// Both terms are summed over all positions. `q_r` must carry the
/// selected codebook rows.
pub fn vq_loss(tape: &mut Tape<'_>, q_s: Var, q_r: Var, beta: f64) -> Result<VqLoss> {
    if tape.value(q_s).shape() != tape.value(q_r).shape() {
        return Err(Error::dim(format!(
            "vq_loss shapes {:?} and {:?} differ",
            tape.value(q_s).shape(),
            tape.value(q_r).shape()
        )));
    }
    let qs_stop = tape.detach(q_s);
    let diff = tape.sub(qs_stop, q_r)?;
    let codebook = tape.sum_squares(diff);
    let qr_stop = tape.detach(q_r);
    let diff = tape.sub(q_s, qr_stop)?;
    let commit = tape.sum_squares(diff);
    let commitment = tape.scale(commit, beta);
    let total = tape.add(codebook, commitment)?;
    Ok(VqLoss { codebook, commitment, total })
}

/// Forward value `q_r`, identity Jacobian to `q_s`.
pub fn straight_through(tape: &mut Tape<'_>, q_s: Var, q_r: Var) -> Result<Var> {
    tape.straight_through(q_s, q_r)
}

/// Sandwiched vector quantizer: up-channel conv, codebook, down-channel conv.
#[derive(Clone, Debug)]
pub struct SvqVae {
    pub codebook: Codebook,
    pub up_weight: ParamId,
    pub up_bias: ParamId,
    pub down_weight: ParamId,
    pub down_bias: ParamId,
    pub codeword_len: usize,
    pub beta: f64,
}

impl SvqVae {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        codeword_len: usize,
        bits: u8,
        dim: usize,
        beta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        check_bits(bits)?;
        let codebook = Codebook::new(store, &format!("{prefix}.codebook"), 1 << bits, dim, rng)?;
        let up_weight = store.add_uniform(format!("{prefix}.up.weight"), &[1, dim], 1, rng)?;
        let up_bias = store.add(format!("{prefix}.up.bias"), Tensor::zeros(&[dim]))?;
        let down_weight = store.add_uniform(format!("{prefix}.down.weight"), &[dim, 1], dim, rng)?;
        let down_bias = store.add(format!("{prefix}.down.bias"), Tensor::zeros(&[1]))?;
        Ok(Self { codebook, up_weight, up_bias, down_weight, down_bias, codeword_len, beta })
    }

    fn header(&self) -> BitstreamHeader {
        BitstreamHeader {
            quantizer: QuantizerId::SvqVae,
            codeword_len: self.codeword_len as u16,
            bits: self.codebook.bits(),
            embedding_dim: self.codebook.dim as u16,
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.codeword_len {
            return Err(Error::dim(format!("codeword length {len}, expected {}", self.codeword_len)));
        }
        Ok(())
    }

    /// `[L]` to `q_s: [L, D]`.
    pub fn up<'a>(&self, store: &'a ParamStore, tape: &mut Tape<'a>, cw: Var) -> Result<Var> {
        self.check_len(tape.value(cw).len())?;
        let col = tape.reshape(cw, &[self.codeword_len, 1])?;
        let w = tape.param(store, self.up_weight);
        let b = tape.param(store, self.up_bias);
        let lifted = tape.matmul(col, w)?;
        tape.add_bias(lifted, b)
    }

    /// `[L, D]` to `[L]`.
    pub fn down<'a>(&self, store: &'a ParamStore, tape: &mut Tape<'a>, rows: Var) -> Result<Var> {
        let w = tape.param(store, self.down_weight);
        let b = tape.param(store, self.down_bias);
        let col = tape.matmul(rows, w)?;
        let col = tape.add_bias(col, b)?;
        tape.reshape(col, &[self.codeword_len])
    }

    /// Indices and the lifted representation `q_s`.
    pub fn quantize(&self, store: &ParamStore, cw: &Tensor) -> Result<(Bitstream, Tensor)> {
        let mut tape = Tape::new();
        let c = tape.constant(cw.clone());
        let qs = self.up(store, &mut tape, c)?;
        let qs = tape.value(qs).clone();
        let idx = nearest_rows(store, &self.codebook, &qs)?;
        let idx: Vec<u32> = idx.into_iter().map(|i| i as u32).collect();
        Ok((Bitstream::pack(self.header(), &idx)?, qs))
    }

    pub fn dequantize(&self, store: &ParamStore, bs: &Bitstream) -> Result<Tensor> {
        let rows = self.dequantize_rows(store, bs)?;
        let mut tape = Tape::new();
        let r = tape.constant(rows);
        let out = self.down(store, &mut tape, r)?;
        Ok(tape.value(out).clone())
    }

    /// Codebook rows `q_r` selected by the stream, `[L, D]`.
    pub fn dequantize_rows(&self, store: &ParamStore, bs: &Bitstream) -> Result<Tensor> {
        check_header(&bs.header, &self.header())?;
        gather(store.value(self.codebook.embeddings), &bs.unpack())
    }
}

/// Vector quantizer over contiguous `D`-blocks of the codeword.
#[derive(Clone, Debug)]
pub struct BaseVv {
    pub codebook: Codebook,
    pub codeword_len: usize,
    pub beta: f64,
}

impl BaseVv {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        codeword_len: usize,
        bits: u8,
        dim: usize,
        beta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        check_bits(bits)?;
        if dim == 0 || codeword_len % dim != 0 {
            return Err(Error::config(format!(
                "embedding length {dim} does not divide codeword length {codeword_len}"
            )));
        }
        let codebook = Codebook::new(store, &format!("{prefix}.codebook"), 1 << bits, dim, rng)?;
        Ok(Self { codebook, codeword_len, beta })
    }

    fn header(&self) -> BitstreamHeader {
        BitstreamHeader {
            quantizer: QuantizerId::BaseVv,
            codeword_len: self.codeword_len as u16,
            bits: self.codebook.bits(),
            embedding_dim: self.codebook.dim as u16,
        }
    }

    pub fn blocks(&self) -> usize {
        self.codeword_len / self.codebook.dim
    }

    pub fn quantize(&self, store: &ParamStore, cw: &Tensor) -> Result<Bitstream> {
        if cw.len() != self.codeword_len {
            return Err(Error::dim(format!("codeword length {}, expected {}", cw.len(), self.codeword_len)));
        }
        let blocks = cw.clone().reshape(&[self.blocks(), self.codebook.dim])?;
        let idx = nearest_rows(store, &self.codebook, &blocks)?;
        let idx: Vec<u32> = idx.into_iter().map(|i| i as u32).collect();
        Bitstream::pack(self.header(), &idx)
    }

    pub fn dequantize(&self, store: &ParamStore, bs: &Bitstream) -> Result<Tensor> {
        check_header(&bs.header, &self.header())?;
        gather(store.value(self.codebook.embeddings), &bs.unpack())?.reshape(&[self.codeword_len])
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if bits == 0 || bits > bitstream::MAX_BITS {
        return Err(Error::config(format!("unsupported bit width {bits}")));
    }
    Ok(())
}

fn check_header(got: &BitstreamHeader, want: &BitstreamHeader) -> Result<()> {
    if got != want {
        return Err(Error::CorruptStream(format!(
            "stream header {got:?} does not match quantizer {want:?}"
        )));
    }
    Ok(())
}

fn gather(table: &Tensor, idx: &[u32]) -> Result<Tensor> {
    let (k, d) = table.dims2()?;
    let mut out = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        let i = i as usize;
        if i >= k {
            return Err(Error::CorruptStream(format!("index {i} outside codebook of {k}")));
        }
        out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
    }
    Tensor::matrix(idx.len(), d, out)
}

#[derive(Clone, Debug)]
pub enum Quantizer {
    Svq(SvqVae),
    BaseVv(BaseVv),
    Uniform(ScalarQuantizer),
    MuLaw(ScalarQuantizer),
}

/// Training-time quantizer output.
pub struct QuantOutput {
    /// Dequantized codeword carrying straight-through gradients.
    pub codeword: Var,
    pub vq: Option<VqLoss>,
}

impl Quantizer {
    pub fn new(
        cfg: &QuantizerConfig,
        codeword_len: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if codeword_len == 0 || codeword_len > u16::MAX as usize {
            return Err(Error::config(format!("codeword length {codeword_len} out of range")));
        }
        let (lo, hi) = cfg.range.unwrap_or((-1.0, 1.0));
        Ok(match cfg.kind {
            QuantizerKind::Svqvae => Quantizer::Svq(SvqVae::new(
                store,
                "quant",
                codeword_len,
                cfg.bits,
                cfg.embedding_dim,
                cfg.beta,
                rng,
            )?),
            QuantizerKind::BaseVv => Quantizer::BaseVv(BaseVv::new(
                store,
                "quant",
                codeword_len,
                cfg.bits,
                cfg.embedding_dim,
                cfg.beta,
                rng,
            )?),
            QuantizerKind::Uniform => Quantizer::Uniform(ScalarQuantizer::new(cfg.bits, lo, hi, None)?),
            QuantizerKind::Mulaw => {
                Quantizer::MuLaw(ScalarQuantizer::new(cfg.bits, lo, hi, Some(cfg.mu))?)
            }
        })
    }

    pub fn kind(&self) -> QuantizerKind {
        match self {
            Quantizer::Svq(_) => QuantizerKind::Svqvae,
            Quantizer::BaseVv(_) => QuantizerKind::BaseVv,
            Quantizer::Uniform(_) => QuantizerKind::Uniform,
            Quantizer::MuLaw(_) => QuantizerKind::Mulaw,
        }
    }

    pub fn bits(&self) -> u8 {
        match self {
            Quantizer::Svq(q) => q.codebook.bits(),
            Quantizer::BaseVv(q) => q.codebook.bits(),
            Quantizer::Uniform(q) | Quantizer::MuLaw(q) => q.bits,
        }
    }

    /// Feedback payload size for one CSI sample.
    pub fn bits_per_csi(&self, codeword_len: usize) -> usize {
        match self {
            Quantizer::BaseVv(q) => q.blocks() * q.codebook.bits() as usize,
            _ => codeword_len * self.bits() as usize,
        }
    }

    /// Config that rebuilds this quantizer (range included).
    pub fn config(&self) -> QuantizerConfig {
        let mut c = QuantizerConfig::new(self.kind(), self.bits());
        match self {
            Quantizer::Svq(q) => {
                c.embedding_dim = q.codebook.dim;
                c.beta = q.beta;
            }
            Quantizer::BaseVv(q) => {
                c.embedding_dim = q.codebook.dim;
                c.beta = q.beta;
            }
            Quantizer::Uniform(q) => c.range = Some((q.lo, q.hi)),
            Quantizer::MuLaw(q) => {
                c.range = Some((q.lo, q.hi));
                c.mu = q.mu.unwrap_or(DEFAULT_MU);
            }
        }
        c
    }

    pub fn scalar_mut(&mut self) -> Option<&mut ScalarQuantizer> {
        match self {
            Quantizer::Uniform(q) | Quantizer::MuLaw(q) => Some(q),
            _ => None,
        }
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        match self {
            Quantizer::Svq(q) => Some(&q.codebook),
            Quantizer::BaseVv(q) => Some(&q.codebook),
            _ => None,
        }
    }

    pub fn quantize(&self, store: &ParamStore, cw: &Tensor) -> Result<Bitstream> {
        match self {
            Quantizer::Svq(q) => Ok(q.quantize(store, cw)?.0),
            Quantizer::BaseVv(q) => q.quantize(store, cw),
            Quantizer::Uniform(q) | Quantizer::MuLaw(q) => {
                let header = BitstreamHeader {
                    quantizer: self.kind().id(),
                    codeword_len: cw.len() as u16,
                    bits: q.bits,
                    embedding_dim: 0,
                };
                let idx: Vec<u32> = cw.data().iter().map(|&x| q.quantize(x)).collect();
                Bitstream::pack(header, &idx)
            }
        }
    }

    pub fn dequantize(&self, store: &ParamStore, bs: &Bitstream) -> Result<Tensor> {
        match self {
            Quantizer::Svq(q) => q.dequantize(store, bs),
            Quantizer::BaseVv(q) => q.dequantize(store, bs),
            Quantizer::Uniform(q) | Quantizer::MuLaw(q) => {
                if bs.header.quantizer != self.kind().id() || bs.header.bits != q.bits {
                    return Err(Error::CorruptStream(format!(
                        "stream header {:?} does not match {} quantizer",
                        bs.header,
                        self.kind().name()
                    )));
                }
                Ok(Tensor::vector(bs.unpack().into_iter().map(|l| q.dequantize(l)).collect()))
            }
        }
    }

    /// Differentiable stand-in used during end-to-end training.
    pub fn forward_train<'a>(
        &self,
        store: &'a ParamStore,
        tape: &mut Tape<'a>,
        cw: Var,
    ) -> Result<QuantOutput> {
        match self {
            Quantizer::Svq(q) => {
                let qs = q.up(store, tape, cw)?;
                let idx = nearest_rows(store, &q.codebook, tape.value(qs))?;
                let table = tape.param(store, q.codebook.embeddings);
                let qr = tape.gather_rows(table, &idx)?;
                let vq = vq_loss(tape, qs, qr, q.beta)?;
                let st = straight_through(tape, qs, qr)?;
                let codeword = q.down(store, tape, st)?;
                Ok(QuantOutput { codeword, vq: Some(vq) })
            }
            Quantizer::BaseVv(q) => {
                let len = tape.value(cw).len();
                if len != q.codeword_len {
                    return Err(Error::dim(format!("codeword length {len}, expected {}", q.codeword_len)));
                }
                let qs = tape.reshape(cw, &[q.blocks(), q.codebook.dim])?;
                let idx = nearest_rows(store, &q.codebook, tape.value(qs))?;
                let table = tape.param(store, q.codebook.embeddings);
                let qr = tape.gather_rows(table, &idx)?;
                let vq = vq_loss(tape, qs, qr, q.beta)?;
                let st = straight_through(tape, qs, qr)?;
                let codeword = tape.reshape(st, &[q.codeword_len])?;
                Ok(QuantOutput { codeword, vq: Some(vq) })
            }
            Quantizer::Uniform(q) | Quantizer::MuLaw(q) => {
                let values = tape.value(cw).data().iter().map(|&x| q.reconstruct(x)).collect();
                let target = tape.constant(Tensor::vector(values));
                let codeword = straight_through(tape, cw, target)?;
                Ok(QuantOutput { codeword, vq: None })
            }
        }
    }
}
