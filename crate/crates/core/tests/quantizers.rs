mod common;

use csikit::autodiff::Tape;
use csikit::conformer::{ConformerConfig, ConformerModel};
use csikit::dataset::Dataset;
use csikit::quant::bitstream::HEADER_LEN;
use csikit::quant::scalar::{mulaw_compand, ScalarQuantizer};
use csikit::quant::{straight_through, Bitstream, Quantizer, QuantizerConfig, QuantizerKind};
use csikit::train::{train, TrainConfig};
use csikit::{ParamStore, Tensor};
use proptest::prelude::*;

#[test]
fn straight_through_has_identity_jacobian() {
    let r = &mut common::rng(1);
    let (qs, qr) = (common::random(&[5, 4], r), common::random(&[5, 4], r));
    let mut tape = Tape::new();
    let s = tape.input(qs);
    let target = tape.constant(qr.clone());
    let y = straight_through(&mut tape, s, target).unwrap();
    assert_eq!(tape.value(y), &qr);
    let loss = common::weighted_sum(&mut tape, y);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(s).unwrap(), grads.get(y).unwrap());
    assert!(grads.get(target).is_none());
}

fn svq(len: usize, bits: u8) -> (ParamStore, Quantizer) {
    let mut store = ParamStore::new();
    let q = Quantizer::new(&QuantizerConfig::new(QuantizerKind::Svqvae, bits), len, &mut store, &mut common::rng(2))
        .unwrap();
    (store, q)
}

#[test]
fn codebook_gradient_touches_only_selected_rows() {
    let (store, q) = svq(12, 5);
    let Quantizer::Svq(svq) = &q else { unreachable!() };
    let cw = common::random(&[12], &mut common::rng(3));
    let (bs, _) = svq.quantize(&store, &cw).unwrap();
    let used: Vec<usize> = bs.unpack().into_iter().map(|i| i as usize).collect();

    let mut tape = Tape::new();
    let c = tape.input(cw);
    let out = q.forward_train(&store, &mut tape, c).unwrap();
    let rec = common::weighted_sum(&mut tape, out.codeword);
    let loss = tape.add(rec, out.vq.unwrap().total).unwrap();
    let grads = tape.backward(loss).unwrap().into_params();
    let g = grads.get(svq.codebook.embeddings).unwrap();
    let dim = svq.codebook.dim;
    for (row, chunk) in g.chunks(dim).enumerate() {
        let nonzero = chunk.iter().any(|v| *v != 0.0);
        assert_eq!(nonzero, used.contains(&row), "row {row}");
    }
}

#[test]
fn payload_is_codeword_length_times_bits() {
    for cr in [4usize, 8, 16, 32, 64] {
        let len = 2048 / cr;
        for bits in [3u8, 4, 5] {
            let (store, q) = svq(len, bits);
            let cw = common::random(&[len], &mut common::rng(cr as u64));
            let bs = q.quantize(&store, &cw).unwrap();
            assert_eq!(bs.payload_bits(), len * bits as usize);
            assert_eq!(q.bits_per_csi(len), len * bits as usize);
            assert_eq!(bs.to_bytes().len(), HEADER_LEN + (len * bits as usize).div_ceil(8));
            let back = q.dequantize(&store, &Bitstream::from_bytes(&bs.to_bytes()).unwrap());
            assert_eq!(back.unwrap(), q.dequantize(&store, &bs).unwrap());
        }
    }
}

#[test]
fn default_codebook_has_1024_parameters() {
    let (store, q) = svq(512, 5);
    let cb = q.codebook().unwrap();
    assert_eq!(cb.param_count(), 1024);
    assert_eq!(store.value(cb.embeddings).shape(), &[32, 32]);
}

#[test]
fn mulaw_reference_value() {
    assert!((mulaw_compand(0.1, 255.0) - 0.590_990_056_820_4).abs() < 1e-12);
}

#[test]
fn training_moves_the_codebook() {
    let cfg = ConformerConfig { n_layers: 1, d_model: 8, seq_len: 4, n_heads: 2, conv_kernel: 3, cr: 2, ..Default::default() };
    let mut model = ConformerModel::new(cfg, 1).unwrap();
    let qcfg = QuantizerConfig { embedding_dim: 4, ..QuantizerConfig::new(QuantizerKind::Svqvae, 3) };
    model.attach_quantizer(&qcfg, 2).unwrap();
    let r = &mut common::rng(4);
    let samples = (0..6)
        .map(|_| Tensor::from_fn(&[4, 8], |_| 0.5 + 0.1 * rand::Rng::random_range(r, -1.0..1.0)))
        .collect();
    let data = Dataset::new(4, 4, 1.0, samples).unwrap();
    let before = model.params.value(model.quantizer.as_ref().unwrap().codebook().unwrap().embeddings).clone();
    let tcfg = TrainConfig { epochs: 1, batch_size: 3, warmup_epochs: 0, ..Default::default() };
    train(&mut model, &data, &data, &tcfg, None).unwrap();
    let after = model.params.value(model.quantizer.as_ref().unwrap().codebook().unwrap().embeddings);
    assert_ne!(&before, after);
}

proptest! {
    #[test]
    fn uniform_error_within_half_bin(bits in 3u8..=5, lo in -4.0f64..0.0, width in 0.1f64..8.0, t in 0.0f64..=1.0) {
        let hi = lo + width;
        let q = ScalarQuantizer::new(bits, lo, hi, None).unwrap();
        let x = lo + t * width;
        let half = width / (1u32 << (bits + 1)) as f64;
        prop_assert!((q.reconstruct(x) - x).abs() <= half * (1.0 + 1e-12));
    }

    #[test]
    fn mulaw_error_within_half_bin_when_companded(bits in 3u8..=5, lo in -4.0f64..0.0, width in 0.1f64..8.0, t in 0.0f64..=1.0) {
        let hi = lo + width;
        let q = ScalarQuantizer::new(bits, lo, hi, Some(255.0)).unwrap();
        let x = lo + t * width;
        let unit = |v: f64| (2.0 * (v - lo) / width - 1.0).clamp(-1.0, 1.0);
        let y = mulaw_compand(unit(x), 255.0);
        let y_hat = mulaw_compand(unit(q.reconstruct(x)), 255.0);
        let half = 1.0 / (1u32 << bits) as f64;
        prop_assert!((y - y_hat).abs() <= half + 1e-9);
    }

    #[test]
    fn svq_stream_round_trips(seed in any::<u64>(), bits in 1u8..=6) {
        let (store, q) = svq(16, bits);
        let cw = common::random(&[16], &mut common::rng(seed));
        let bs = q.quantize(&store, &cw).unwrap();
        let parsed = Bitstream::from_bytes(&bs.to_bytes()).unwrap();
        prop_assert_eq!(parsed.unpack(), bs.unpack());
        let again = q.quantize(&store, &q.dequantize(&store, &bs).unwrap());
        prop_assert!(again.is_ok());
    }
}
