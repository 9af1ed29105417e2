//! Element-wise uniform and mu-law quantizers.

use crate::error::{Error, Result};

/// Level of `x` among `2^bits` equal bins over `[lo, hi]`; out-of-range
/// values clamp to the end bins.
pub fn uniform_quantize(x: f64, bits: u8, lo: f64, hi: f64) -> u32 {
    let levels = 1u64 << bits;
    let t = ((x - lo) / (hi - lo)).clamp(0.0, 1.0);
    ((t * levels as f64).floor() as u64).min(levels - 1) as u32
}

/// Center of bin `level`.
pub fn uniform_dequantize(level: u32, bits: u8, lo: f64, hi: f64) -> f64 {
    let levels = (1u64 << bits) as f64;
    lo + (level as f64 + 0.5) / levels * (hi - lo)
}

/// `sign(u) ln(1 + mu |u|) / ln(1 + mu)` for `u` in `[-1, 1]`.
pub fn mulaw_compand(u: f64, mu: f64) -> f64 {
    u.signum() * (mu * u.abs()).ln_1p() / mu.ln_1p()
}

/// Inverse of [`mulaw_compand`].
pub fn mulaw_expand(y: f64, mu: f64) -> f64 {
    y.signum() * ((y.abs() * mu.ln_1p()).exp() - 1.0) / mu
}

fn to_unit(x: f64, lo: f64, hi: f64) -> f64 {
    (2.0 * (x - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
}

pub fn mulaw_quantize(x: f64, bits: u8, mu: f64, lo: f64, hi: f64) -> u32 {
    uniform_quantize(mulaw_compand(to_unit(x, lo, hi), mu), bits, -1.0, 1.0)
}

pub fn mulaw_dequantize(level: u32, bits: u8, mu: f64, lo: f64, hi: f64) -> f64 {
    let u = mulaw_expand(uniform_dequantize(level, bits, -1.0, 1.0), mu);
    lo + (u + 1.0) * 0.5 * (hi - lo)
}

/// Uniform (`mu == None`) or mu-law scalar quantizer over a stored range.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarQuantizer {
    pub bits: u8,
    pub lo: f64,
    pub hi: f64,
    pub mu: Option<f64>,
}

impl ScalarQuantizer {
    pub fn new(bits: u8, lo: f64, hi: f64, mu: Option<f64>) -> Result<Self> {
        if !(3..=5).contains(&bits) {
            return Err(Error::config(format!("scalar quantizers take 3 to 5 bits, got {bits}")));
        }
        if let Some(m) = mu {
            if !(m > 0.0) {
                return Err(Error::config(format!("mu must be positive, got {m}")));
            }
        }
        let mut q = Self { bits, lo: -1.0, hi: 1.0, mu };
        q.set_range(lo, hi)?;
        Ok(q)
    }

    pub fn set_range(&mut self, lo: f64, hi: f64) -> Result<()> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config(format!("quantizer range [{lo}, {hi}] is empty")));
        }
        self.lo = lo;
        self.hi = hi;
        Ok(())
    }

    pub fn quantize(&self, x: f64) -> u32 {
        match self.mu {
            None => uniform_quantize(x, self.bits, self.lo, self.hi),
            Some(mu) => mulaw_quantize(x, self.bits, mu, self.lo, self.hi),
        }
    }

    pub fn dequantize(&self, level: u32) -> f64 {
        match self.mu {
            None => uniform_dequantize(level, self.bits, self.lo, self.hi),
            Some(mu) => mulaw_dequantize(level, self.bits, mu, self.lo, self.hi),
        }
    }

    /// `dequantize(quantize(x))`.
    pub fn reconstruct(&self, x: f64) -> f64 {
        self.dequantize(self.quantize(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_examples() {
        assert_eq!(uniform_quantize(0.49, 3, 0.0, 1.0), 3);
        assert_eq!(uniform_dequantize(3, 3, 0.0, 1.0), 0.4375);
        assert_eq!(uniform_quantize(-5.0, 3, 0.0, 1.0), 0);
        assert_eq!(uniform_quantize(0.0, 3, 0.0, 1.0), 0);
        assert_eq!(uniform_quantize(1.0, 3, 0.0, 1.0), 7);
        assert_eq!(uniform_quantize(9.0, 4, 0.0, 1.0), 15);
    }

    #[test]
    fn mulaw_examples() {
        assert_eq!(mulaw_compand(0.0, 255.0), 0.0);
        assert!((mulaw_compand(1.0, 255.0) - 1.0).abs() < 1e-15);
        assert!((mulaw_compand(-1.0, 255.0) + 1.0).abs() < 1e-15);
        // ln(26.5) / ln(256) from a 30-digit evaluation.
        assert!((mulaw_compand(0.1, 255.0) - 0.590_990_056_820_4).abs() < 1e-12);
        // Zero maps to the middle of the code range.
        assert_eq!(mulaw_quantize(0.0, 4, 255.0, -1.0, 1.0), 8);
    }

    #[test]
    fn bad_parameters_rejected() {
        assert!(ScalarQuantizer::new(2, 0.0, 1.0, None).is_err());
        assert!(ScalarQuantizer::new(3, 1.0, 1.0, None).is_err());
        assert!(ScalarQuantizer::new(3, 0.0, 1.0, Some(0.0)).is_err());
    }

    proptest! {
        #[test]
        fn expand_inverts_compand(u in -1.0f64..1.0, mu in 1.0f64..1000.0) {
            prop_assert!((mulaw_expand(mulaw_compand(u, mu), mu) - u).abs() < 1e-12);
        }

        #[test]
        fn uniform_error_within_half_bin(x in -3.0f64..5.0, bits in 3u8..=5) {
            let q = ScalarQuantizer::new(bits, -3.0, 5.0, None).unwrap();
            let half = 8.0 / (1u32 << (bits + 1)) as f64;
            prop_assert!((q.reconstruct(x) - x).abs() <= half + 1e-12);
        }

        #[test]
        fn mulaw_error_within_half_bin_companded(x in -3.0f64..5.0, bits in 3u8..=5) {
            let mu = 255.0;
            let q = ScalarQuantizer::new(bits, -3.0, 5.0, Some(mu)).unwrap();
            let unit = |v: f64| 2.0 * (v + 3.0) / 8.0 - 1.0;
            let y = mulaw_compand(unit(x), mu);
            let y_hat = mulaw_compand(unit(q.reconstruct(x)), mu);
            let half = 1.0 / (1u32 << bits) as f64;
            prop_assert!((y - y_hat).abs() <= half + 1e-9);
        }
    }
}
