//! Conformer encoder/decoder.
//!
//! Tokens are the `seq_len` delay rows of the real-valued CSI matrix and
//! features are its `d_model = 2 n_t` columns. The encoder runs the
//! conformer stack, flattens, and compresses with one FC layer; the decoder
//! mirrors it. No positional encoding is used anywhere.
//!
//! Linear weights are stored `[in, out]` so a layer is `x * W + b`. The
//! pointwise convolutions of the convolution module are the same thing:
//! a 1x1 convolution over the channel axis is a matmul on `[seq, channels]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::quant::{Quantizer, QuantizerConfig};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Initial bias of the decoder's output projection: the centre of the
/// normalized `[0, 1]` range. Its weights start at zero, so an untrained
/// model predicts this constant.
pub const OUTPUT_BIAS: f64 = 0.5;

/// Compression ratios the architecture is evaluated at.
pub const COMPRESSION_RATIOS: [usize; 5] = [4, 8, 16, 32, 64];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConformerConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub seq_len: usize,
    pub n_heads: usize,
    pub ff_expansion: usize,
    pub conv_expansion: usize,
    pub conv_kernel: usize,
    pub dropout_rate: f64,
    pub conv_module_enabled: bool,
    pub cr: usize,
}

impl Default for ConformerConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            seq_len: 32,
            n_heads: 8,
            ff_expansion: 4,
            conv_expansion: 2,
            conv_kernel: 31,
            dropout_rate: 0.1,
            conv_module_enabled: true,
            cr: 4,
        }
    }
}

/// Named architecture variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Baseline,
    /// Convolution module removed from every layer.
    NoneConv,
    /// Three layers with feed-forward expansion 6.
    ConformerII,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" | "none" => Ok(Ablation::Baseline),
            "none_conv" => Ok(Ablation::NoneConv),
            "conformer_ii" | "csiconformer_ii" => Ok(Ablation::ConformerII),
            other => Err(Error::config(format!("unknown ablation {other:?}"))),
        }
    }
}

impl ConformerConfig {
    pub fn with_cr(cr: usize) -> Self {
        Self { cr, ..Self::default() }
    }

    pub fn ablation(self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::Baseline => self,
            Ablation::NoneConv => Self { conv_module_enabled: false, ..self },
            Ablation::ConformerII => Self { n_layers: 3, ff_expansion: 6, ..self },
        }
    }

    /// Length of the flattened input, `seq_len * d_model`.
    pub fn input_len(&self) -> usize {
        self.seq_len * self.d_model
    }

    /// Codeword length `seq_len * d_model / cr`.
    pub fn codeword_len(&self) -> usize {
        self.input_len() / self.cr
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ff_hidden(&self) -> usize {
        self.ff_expansion * self.d_model
    }

    /// Channels entering the pointwise expansion's GLU.
    pub fn conv_hidden(&self) -> usize {
        self.conv_expansion * self.d_model
    }

    /// Channels seen by the depthwise convolution (after the GLU halves them).
    pub fn conv_channels(&self) -> usize {
        self.conv_hidden() / 2
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("seq_len", self.seq_len),
            ("n_heads", self.n_heads),
            ("ff_expansion", self.ff_expansion),
            ("conv_expansion", self.conv_expansion),
            ("conv_kernel", self.conv_kernel),
            ("cr", self.cr),
        ];
        if let Some((name, _)) = pos.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::config(format!("conv_kernel {} must be odd", self.conv_kernel)));
        }
        if self.conv_hidden() % 2 != 0 {
            return Err(Error::config("conv_expansion * d_model must be even for the GLU"));
        }
        if self.input_len() % self.cr != 0 {
            return Err(Error::config(format!(
                "cr {} does not divide seq_len * d_model = {}",
                self.cr,
                self.input_len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Dropout state for one forward pass: active only with an RNG stream.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: ChaCha8Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Var {
        tape.dropout(x, self.rate, self.rng.as_mut())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward<'a>(&self, store: &'a ParamStore, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[d]))?;
        Ok(Self { gamma, beta })
    }

    pub fn forward<'a>(&self, store: &'a ParamStore, tape: &mut Tape<'a>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: Norm,
    pub expand: Linear,
    pub project: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, cfg: &ConformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, h) = (cfg.d_model, cfg.ff_hidden());
        Ok(Self {
            norm: Norm::new(store, &format!("{name}.norm"), d)?,
            expand: Linear::new(store, &format!("{name}.expand"), d, h, rng)?,
            project: Linear::new(store, &format!("{name}.project"), h, d, rng)?,
        })
    }

    /// layer_norm, expand, swish, dropout, project, dropout. Residual is the caller's.
    pub fn forward<'a>(
        &self,
        store: &'a ParamStore,
        tape: &mut Tape<'a>,
        x: Var,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let h = self.norm.forward(store, tape, x)?;
        let h = self.expand.forward(store, tape, h)?;
        let h = tape.swish(h);
        let h = drop.apply(tape, h);
        let h = self.project.forward(store, tape, h)?;
        Ok(drop.apply(tape, h))
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub norm: Norm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
}

impl SelfAttention {
    fn new(store: &mut ParamStore, name: &str, cfg: &ConformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            norm: Norm::new(store, &format!("{name}.norm"), d)?,
            query: Linear::new(store, &format!("{name}.query"), d, d, rng)?,
            key: Linear::new(store, &format!("{name}.key"), d, d, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d, d, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d, d, rng)?,
            n_heads: cfg.n_heads,
        })
    }

    pub fn forward<'a>(
        &self,
        store: &'a ParamStore,
        tape: &mut Tape<'a>,
        x: Var,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let d = tape.value(x).last_dim();
        if d % self.n_heads != 0 {
            return Err(Error::config(format!("d_model {d} not divisible by {} heads", self.n_heads)));
        }
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let h = self.norm.forward(store, tape, x)?;
        let q = self.query.forward(store, tape, h)?;
        let k = self.key.forward(store, tape, h)?;
        let v = self.value.forward(store, tape, h)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        for i in 0..self.n_heads {
            let qh = tape.slice_cols(q, i * dh, dh)?;
            let kh = tape.slice_cols(k, i * dh, dh)?;
            let vh = tape.slice_cols(v, i * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let weights = tape.softmax(scores);
            let weights = drop.apply(tape, weights);
            heads.push(tape.matmul(weights, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        self.output.forward(store, tape, merged)
    }
}

#[derive(Clone, Debug)]
pub struct ConvModule {
    pub norm: Norm,
    pub pointwise_in: Linear,
    pub depthwise_kernel: ParamId,
    pub depthwise_bias: ParamId,
    pub pointwise_out: Linear,
}

impl ConvModule {
    fn new(store: &mut ParamStore, name: &str, cfg: &ConformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d, c, k) = (cfg.d_model, cfg.conv_channels(), cfg.conv_kernel);
        Ok(Self {
            norm: Norm::new(store, &format!("{name}.norm"), d)?,
            pointwise_in: Linear::new(store, &format!("{name}.pointwise_in"), d, cfg.conv_hidden(), rng)?,
            depthwise_kernel: store.add_uniform(format!("{name}.depthwise.weight"), &[c, k], k, rng)?,
            depthwise_bias: store.add(format!("{name}.depthwise.bias"), Tensor::zeros(&[c]))?,
            pointwise_out: Linear::new(store, &format!("{name}.pointwise_out"), c, d, rng)?,
        })
    }

    /// layer_norm, pointwise expansion, GLU, depthwise conv along the token
    /// axis, swish, pointwise projection, dropout.
    pub fn forward<'a>(
        &self,
        store: &'a ParamStore,
        tape: &mut Tape<'a>,
        x: Var,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let h = self.norm.forward(store, tape, x)?;
        let h = self.pointwise_in.forward(store, tape, h)?;
        let h = tape.glu(h)?;
        let ht = tape.transpose(h)?;
        let kernel = tape.param(store, self.depthwise_kernel);
        let ht = tape.depthwise_conv1d(ht, kernel)?;
        let h = tape.transpose(ht)?;
        let bias = tape.param(store, self.depthwise_bias);
        let h = tape.add_bias(h, bias)?;
        let h = tape.swish(h);
        let h = self.pointwise_out.forward(store, tape, h)?;
        Ok(drop.apply(tape, h))
    }
}

#[derive(Clone, Debug)]
pub struct ConformerLayer {
    pub ff1: FeedForward,
    pub attention: SelfAttention,
    pub conv: Option<ConvModule>,
    pub ff2: FeedForward,
    pub final_norm: Norm,
}

impl ConformerLayer {
    fn new(store: &mut ParamStore, name: &str, cfg: &ConformerConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            ff1: FeedForward::new(store, &format!("{name}.ff1"), cfg, rng)?,
            attention: SelfAttention::new(store, &format!("{name}.attention"), cfg, rng)?,
            conv: if cfg.conv_module_enabled {
                Some(ConvModule::new(store, &format!("{name}.conv"), cfg, rng)?)
            } else {
                None
            },
            ff2: FeedForward::new(store, &format!("{name}.ff2"), cfg, rng)?,
            final_norm: Norm::new(store, &format!("{name}.final_norm"), cfg.d_model)?,
        })
    }

    /// `x + ff1/2`, `+ mhsa`, `+ conv`, `+ ff2/2`, then layer_norm.
    pub fn forward<'a>(
        &self,
        store: &'a ParamStore,
        tape: &mut Tape<'a>,
        x: Var,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let f = self.ff1.forward(store, tape, x, drop)?;
        let f = tape.scale(f, 0.5);
        let y = tape.add(x, f)?;
        let a = self.attention.forward(store, tape, y, drop)?;
        let mut y = tape.add(y, a)?;
        if let Some(conv) = &self.conv {
            let c = conv.forward(store, tape, y, drop)?;
            y = tape.add(y, c)?;
        }
        let f = self.ff2.forward(store, tape, y, drop)?;
        let f = tape.scale(f, 0.5);
        let y = tape.add(y, f)?;
        self.final_norm.forward(store, tape, y)
    }
}

/// Encoder, decoder, and (optionally) a quantizer, all sharing one
/// parameter store.
#[derive(Clone, Debug)]
pub struct ConformerModel {
    pub config: ConformerConfig,
    pub params: ParamStore,
    pub encoder_layers: Vec<ConformerLayer>,
    pub encoder_fc: Linear,
    pub decoder_fc: Linear,
    pub decoder_layers: Vec<ConformerLayer>,
    /// Per-token projection applied after the decoder stack.
    pub output: Linear,
    pub quantizer: Option<Quantizer>,
}

impl ConformerModel {
    pub fn new(config: ConformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder_layers = (0..config.n_layers)
            .map(|i| ConformerLayer::new(&mut params, &format!("encoder.layers.{i}"), &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (n, l) = (config.input_len(), config.codeword_len());
        let encoder_fc = Linear::new(&mut params, "encoder.fc", n, l, &mut rng)?;
        let decoder_fc = Linear::new(&mut params, "decoder.fc", l, n, &mut rng)?;
        let decoder_layers = (0..config.n_layers)
            .map(|i| ConformerLayer::new(&mut params, &format!("decoder.layers.{i}"), &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let output = Linear::new(&mut params, "decoder.output", config.d_model, config.d_model, &mut rng)?;
        params.get_mut(output.weight).value = Tensor::zeros(&[config.d_model, config.d_model]);
        params.get_mut(output.bias).value = Tensor::full(&[config.d_model], OUTPUT_BIAS);
        Ok(Self { config, params, encoder_layers, encoder_fc, decoder_fc, decoder_layers, output, quantizer: None })
    }

    /// Adds a quantizer whose parameters join this model's store.
    pub fn attach_quantizer(&mut self, cfg: &QuantizerConfig, seed: u64) -> Result<()> {
        if self.quantizer.is_some() {
            return Err(Error::Usage("a quantizer is already attached".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = Quantizer::new(cfg, self.config.codeword_len(), &mut self.params, &mut rng)?;
        self.quantizer = Some(q);
        Ok(())
    }

    /// Removes the quantizer from the feedback path. Its parameters stay in
    /// the store but no longer take part in forward or backward passes.
    pub fn detach_quantizer(&mut self) -> Option<Quantizer> {
        self.quantizer.take()
    }

    /// Total scalar parameter count, quantizer included.
    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Parameters belonging to the quantizer (names under `quant.`).
    pub fn quantizer_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.name.starts_with("quant."))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn check_input(&self, h: &Tensor) -> Result<()> {
        let want = [self.config.seq_len, self.config.d_model];
        if h.shape() != want {
            return Err(Error::dim(format!("input shape {:?}, expected {want:?}", h.shape())));
        }
        Ok(())
    }

    /// `[seq_len, d_model]` to a codeword of length `codeword_len`.
    pub fn encode<'a>(&'a self, tape: &mut Tape<'a>, x: Var, drop: &mut Dropout) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let mut h = x;
        for layer in &self.encoder_layers {
            h = layer.forward(&self.params, tape, h, drop)?;
        }
        let flat = tape.reshape(h, &[1, self.config.input_len()])?;
        let cw = self.encoder_fc.forward(&self.params, tape, flat)?;
        tape.reshape(cw, &[self.config.codeword_len()])
    }

    pub fn decode<'a>(&'a self, tape: &mut Tape<'a>, cw: Var, drop: &mut Dropout) -> Result<Var> {
        let l = self.config.codeword_len();
        if tape.value(cw).len() != l {
            return Err(Error::dim(format!(
                "codeword length {}, expected {l}",
                tape.value(cw).len()
            )));
        }
        let row = tape.reshape(cw, &[1, l])?;
        let h = self.decoder_fc.forward(&self.params, tape, row)?;
        let mut h = tape.reshape(h, &[self.config.seq_len, self.config.d_model])?;
        for layer in &self.decoder_layers {
            h = layer.forward(&self.params, tape, h, drop)?;
        }
        self.output.forward(&self.params, tape, h)
    }

    /// Eval-mode codeword for one input matrix.
    pub fn encode_tensor(&self, h: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(h.clone());
        let cw = self.encode(&mut tape, x, &mut Dropout::eval())?;
        Ok(tape.value(cw).clone())
    }

    /// Eval-mode reconstruction from a codeword.
    pub fn decode_tensor(&self, cw: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let c = tape.constant(cw.clone());
        let out = self.decode(&mut tape, c, &mut Dropout::eval())?;
        Ok(tape.value(out).clone())
    }
}
