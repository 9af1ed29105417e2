use csikit::conformer::{Ablation, ConformerConfig};
use csikit::flops::{flops_breakdown, flops_count, FlopsCategory};

fn without_attention(cfg: &ConformerConfig) -> u64 {
    let b = flops_breakdown(cfg);
    b.total() - b.category_total(FlopsCategory::AttentionProjection) - b.category_total(FlopsCategory::AttentionProduct)
}

#[test]
fn conformer_ii_lands_near_its_reference_totals() {
    for (cr, reference) in [(16usize, 22.39e6), (32, 22.12e6)] {
        let f = flops_count(&ConformerConfig::with_cr(cr).ablation(Ablation::ConformerII)) as f64;
        assert!((f / reference - 1.0).abs() <= 0.25, "cr{cr}: {f}");
    }
}

#[test]
fn conformer_ii_spends_more_outside_attention() {
    for cr in [16usize, 32] {
        let base = ConformerConfig::with_cr(cr);
        let two = base.clone().ablation(Ablation::ConformerII);
        assert!(without_attention(&two) > without_attention(&base));
        let (t, b) = (flops_count(&two) as f64, flops_count(&base) as f64);
        assert!((t / b - 1.0).abs() < 0.01, "{t} vs {b}");
    }
}

#[test]
fn none_conv_drops_all_eight_conv_modules() {
    let base = flops_count(&ConformerConfig::with_cr(16));
    let none = flops_count(&ConformerConfig::with_cr(16).ablation(Ablation::NoneConv));
    assert_eq!(base - none, 8 * 456_704);
}
