//! Complexity accounting: parameter totals and per-layer multiply-accumulate
//! counts for one encode plus decode pass. One MAC counts as one FLOP and
//! element-wise work (norms, activations, softmax, residual adds) is not
//! counted.

use serde::{Deserialize, Serialize};

use crate::conformer::ConformerConfig;
use crate::quant::{QuantizerConfig, QuantizerKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopsCategory {
    FeedForward,
    /// Query, key, value and output projections.
    AttentionProjection,
    /// `Q K^T` scores and the weighted sum over values.
    AttentionProduct,
    Convolution,
    FullyConnected,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsItem {
    pub layer: String,
    pub category: FlopsCategory,
    pub macs: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub items: Vec<FlopsItem>,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.items.iter().map(|i| i.macs).sum()
    }

    pub fn category_total(&self, category: FlopsCategory) -> u64 {
        self.items.iter().filter(|i| i.category == category).map(|i| i.macs).sum()
    }

    /// Total with the listed categories left out.
    pub fn total_excluding(&self, excluded: &[FlopsCategory]) -> u64 {
        self.items.iter().filter(|i| !excluded.contains(&i.category)).map(|i| i.macs).sum()
    }

    fn push(&mut self, layer: String, category: FlopsCategory, macs: usize) {
        self.items.push(FlopsItem { layer, category, macs: macs as u64 });
    }
}

fn conformer_layer(out: &mut FlopsBreakdown, name: &str, cfg: &ConformerConfig) {
    let (t, d, h) = (cfg.seq_len, cfg.d_model, cfg.ff_hidden());
    use FlopsCategory::*;
    out.push(format!("{name}.ff1"), FeedForward, 2 * t * d * h);
    out.push(format!("{name}.attention.projections"), AttentionProjection, 4 * t * d * d);
    out.push(format!("{name}.attention.products"), AttentionProduct, 2 * t * t * d);
    if cfg.conv_module_enabled {
        let c = cfg.conv_channels();
        out.push(format!("{name}.conv.pointwise_in"), Convolution, t * d * cfg.conv_hidden());
        out.push(format!("{name}.conv.depthwise"), Convolution, t * c * cfg.conv_kernel);
        out.push(format!("{name}.conv.pointwise_out"), Convolution, t * c * d);
    }
    out.push(format!("{name}.ff2"), FeedForward, 2 * t * d * h);
}

/// Itemized MACs of one encode plus decode pass, quantizer excluded.
pub fn flops_breakdown(cfg: &ConformerConfig) -> FlopsBreakdown {
    let mut out = FlopsBreakdown::default();
    let fc = cfg.input_len() * cfg.codeword_len();
    for i in 0..cfg.n_layers {
        conformer_layer(&mut out, &format!("encoder.layers.{i}"), cfg);
    }
    out.push("encoder.fc".into(), FlopsCategory::FullyConnected, fc);
    out.push("decoder.fc".into(), FlopsCategory::FullyConnected, fc);
    for i in 0..cfg.n_layers {
        conformer_layer(&mut out, &format!("decoder.layers.{i}"), cfg);
    }
    let d = cfg.d_model;
    out.push("decoder.output".into(), FlopsCategory::FullyConnected, cfg.seq_len * d * d);
    out
}

pub fn flops_count(cfg: &ConformerConfig) -> u64 {
    flops_breakdown(cfg).total()
}

/// MACs added by a quantizer on a codeword of length `codeword_len`: the
/// two 1x1 channel convolutions of SVQ-VAE. Nearest-neighbor search is a
/// comparison workload and is not counted.
pub fn quantizer_flops(q: &QuantizerConfig, codeword_len: usize) -> u64 {
    match q.kind {
        QuantizerKind::Svqvae => (2 * codeword_len * q.embedding_dim) as u64,
        _ => 0,
    }
}

/// Closed-form parameter total of the encoder and decoder.
pub fn param_count(cfg: &ConformerConfig) -> usize {
    let (d, h) = (cfg.d_model, cfg.ff_hidden());
    let norm = 2 * d;
    let ff = norm + d * h + h + h * d + d;
    let attention = norm + 4 * (d * d + d);
    let conv = if cfg.conv_module_enabled {
        let (ch, c, k) = (cfg.conv_hidden(), cfg.conv_channels(), cfg.conv_kernel);
        norm + d * ch + ch + c * k + c + c * d + d
    } else {
        0
    };
    let layer = 2 * ff + attention + conv + norm;
    let (n, l) = (cfg.input_len(), cfg.codeword_len());
    2 * cfg.n_layers * layer + (n * l + l) + (l * n + n) + (d * d + d)
}

/// Closed-form parameter total of a quantizer.
pub fn quantizer_param_count(q: &QuantizerConfig) -> usize {
    let k = 1usize << q.bits;
    match q.kind {
        QuantizerKind::Svqvae => k * q.embedding_dim + 3 * q.embedding_dim + 1,
        QuantizerKind::BaseVv => k * q.embedding_dim,
        QuantizerKind::Uniform | QuantizerKind::Mulaw => 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformer::{Ablation, ConformerModel, COMPRESSION_RATIOS};

    #[test]
    fn fc_pair_arithmetic() {
        let b = flops_breakdown(&ConformerConfig::with_cr(4));
        let pair = b.total_excluding(&[]) - b.total_excluding(&[FlopsCategory::FullyConnected]);
        let fc: u64 = b.items.iter().filter(|i| i.layer.ends_with(".fc")).map(|i| i.macs).sum();
        assert_eq!(fc, 2_097_152);
        assert_eq!(pair, fc + 32 * 64 * 64);
    }

    #[test]
    fn decreasing_in_cr() {
        let totals: Vec<u64> =
            COMPRESSION_RATIOS.iter().map(|&cr| flops_count(&ConformerConfig::with_cr(cr))).collect();
        assert!(totals.windows(2).all(|w| w[0] > w[1]), "{totals:?}");
    }

    #[test]
    fn layer_terms_by_hand() {
        let b = flops_breakdown(&ConformerConfig::default());
        let first: u64 = b.items.iter().filter(|i| i.layer.starts_with("encoder.layers.0.")).map(|i| i.macs).sum();
        // ff: 2 * 2*32*64*256, attention: 4*32*64*64 + 2*32*32*64,
        // conv: 32*64*128 + 32*64*31 + 32*64*64.
        assert_eq!(first, 2_097_152 + 655_360 + 456_704);
    }

    #[test]
    fn none_conv_drops_conv_terms() {
        let b = flops_breakdown(&ConformerConfig::default().ablation(Ablation::NoneConv));
        assert_eq!(b.category_total(FlopsCategory::Convolution), 0);
    }

    #[test]
    fn closed_form_matches_built_models() {
        let toy = ConformerConfig { n_layers: 2, d_model: 8, seq_len: 4, n_heads: 2, conv_kernel: 3, cr: 2, ..Default::default() };
        for cfg in [toy.clone(), toy.clone().ablation(Ablation::NoneConv), toy.ablation(Ablation::ConformerII)] {
            let m = ConformerModel::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.param_count(), param_count(&cfg));
        }
    }

    #[test]
    fn svq_overhead() {
        let q = QuantizerConfig::new(QuantizerKind::Svqvae, 5);
        assert_eq!(quantizer_flops(&q, 512), 32_768);
        assert_eq!(quantizer_param_count(&q), 1024 + 97);
    }
}
