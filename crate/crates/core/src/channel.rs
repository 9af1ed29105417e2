//! Channel matrices, the angular-delay transform, and a synthetic
//! delay-limited multipath generator.
//!
//! Transforms use unitary DFT matrices (`1/sqrt(N)` scaling both ways), so
//! `dft_forward` preserves the Frobenius norm and truncation energy is exact.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub n_t: usize,
    pub n_c: usize,
    pub n_a: usize,
    pub n_r: usize,
    pub paths: usize,
    pub max_delay_tap: usize,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self { n_t: 32, n_c: 1024, n_a: 32, n_r: 1, paths: 6, max_delay_tap: 15, seed: 2024 }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 || self.n_c == 0 || self.n_a == 0 {
            return Err(Error::config("channel dimensions must be positive"));
        }
        if self.n_a > self.n_c {
            return Err(Error::config(format!(
                "n_a ({}) exceeds n_c ({})",
                self.n_a, self.n_c
            )));
        }
        if self.n_r != 1 {
            return Err(Error::config("only single-antenna receivers (n_r = 1) are supported"));
        }
        if self.paths == 0 {
            return Err(Error::config("paths must be at least 1"));
        }
        if self.max_delay_tap >= self.n_a {
            return Err(Error::config(format!(
                "max_delay_tap ({}) must be below n_a ({})",
                self.max_delay_tap, self.n_a
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Complex64::new(0.0, 0.0); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: Complex64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn distance_sq(&self, other: &ComplexMatrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm_sqr()).sum()
    }

    /// Unitary DFT (or inverse) along each column, then along each row.
    fn transform(&self, col_inverse: bool, row_inverse: bool) -> ComplexMatrix {
        let mut planner = FftPlanner::<f64>::new();
        let mut out = self.clone();

        let col_fft = if col_inverse {
            planner.plan_fft_inverse(self.rows)
        } else {
            planner.plan_fft_forward(self.rows)
        };
        let cs = 1.0 / (self.rows as f64).sqrt();
        let mut column = vec![Complex64::new(0.0, 0.0); self.rows];
        for c in 0..self.cols {
            for r in 0..self.rows {
                column[r] = out.data[r * self.cols + c];
            }
            col_fft.process(&mut column);
            for r in 0..self.rows {
                out.data[r * self.cols + c] = column[r] * cs;
            }
        }

        let row_fft = if row_inverse {
            planner.plan_fft_inverse(self.cols)
        } else {
            planner.plan_fft_forward(self.cols)
        };
        let rs = 1.0 / (self.cols as f64).sqrt();
        for row in out.data.chunks_mut(self.cols) {
            row_fft.process(row);
            row.iter_mut().for_each(|z| *z *= rs);
        }
        out
    }
}

/// Spatial-frequency channel, `n_c x n_t` (one row per subcarrier).
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialFreqCsi {
    pub matrix: ComplexMatrix,
}

/// Angular-delay channel truncated to the first `n_a` delay rows, `n_a x n_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AngularDelayCsi {
    pub matrix: ComplexMatrix,
}

/// Real-valued network input `n_a x 2n_t`: real parts then imaginary parts
/// along each row, mapped into `[0, 1]` by `x / (2 scale) + 0.5`.
#[derive(Clone, Debug, PartialEq)]
pub struct RealCsi {
    pub matrix: Tensor,
    pub scale: f64,
}

/// `F_c * H * F_t^H` with unitary DFT matrices.
pub fn dft_forward(h: &SpatialFreqCsi) -> ComplexMatrix {
    h.matrix.transform(false, true)
}

/// Inverse of [`dft_forward`]: `F_c^H * X * F_t`.
pub fn dft_inverse(x: &ComplexMatrix) -> SpatialFreqCsi {
    SpatialFreqCsi { matrix: x.transform(true, false) }
}

/// Keeps the first `n_a` delay rows.
pub fn truncate(hp: &ComplexMatrix, n_a: usize) -> Result<AngularDelayCsi> {
    if n_a == 0 || n_a > hp.rows {
        return Err(Error::config(format!(
            "cannot keep {n_a} rows of a {}-row matrix",
            hp.rows
        )));
    }
    let data = hp.data[..n_a * hp.cols].to_vec();
    Ok(AngularDelayCsi { matrix: ComplexMatrix::from_vec(n_a, hp.cols, data)? })
}

/// Zero-fills rows `n_a..n_c` and applies the inverse transform.
pub fn reconstruct_full(ha: &AngularDelayCsi, n_c: usize) -> Result<SpatialFreqCsi> {
    let m = &ha.matrix;
    if m.rows > n_c {
        return Err(Error::dim(format!("{} delay rows exceed n_c = {n_c}", m.rows)));
    }
    let mut full = ComplexMatrix::zeros(n_c, m.cols);
    full.data[..m.data.len()].copy_from_slice(&m.data);
    Ok(dft_inverse(&full))
}

/// Independent RNG stream for sample `index` under `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One synthetic channel drawn from stream `index`.
///
/// Each path contributes `g * exp(j 2 pi n tau / n_c) * exp(j pi m sin(theta))`
/// at subcarrier `n`, antenna `m`: integer delay taps `tau <= max_delay_tap`
/// put all angular-delay energy in rows `tau`, so truncation is lossless.
pub fn synthetic_sample(cfg: &ChannelConfig, index: u64) -> SpatialFreqCsi {
    let mut rng = sample_rng(cfg.seed, index);
    let gain_sd = (0.5 / cfg.paths as f64).sqrt();
    let paths: Vec<(Complex64, usize, f64)> = (0..cfg.paths)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            let tap = rng.random_range(0..=cfg.max_delay_tap);
            let sin_theta = rng.random_range(-1.0..1.0);
            (Complex64::new(re * gain_sd, im * gain_sd), tap, sin_theta)
        })
        .collect();
    synthetic_from_paths(cfg.n_c, cfg.n_t, &paths)
}

/// Channel from explicit `(gain, delay tap, sin(angle))` path components.
pub fn synthetic_from_paths(
    n_c: usize,
    n_t: usize,
    paths: &[(Complex64, usize, f64)],
) -> SpatialFreqCsi {
    let matrix = ComplexMatrix::from_fn(n_c, n_t, |n, m| {
        paths
            .iter()
            .map(|&(g, tap, sin_theta)| {
                let delay = 2.0 * PI * (n * tap) as f64 / n_c as f64;
                let angle = PI * m as f64 * sin_theta;
                g * Complex64::from_polar(1.0, delay + angle)
            })
            .sum()
    });
    SpatialFreqCsi { matrix }
}

/// Samples from streams `first..first + count`.
pub fn generate_synthetic_range(
    cfg: &ChannelConfig,
    first: u64,
    count: usize,
) -> Result<Vec<SpatialFreqCsi>> {
    cfg.validate()?;
    if count == 0 {
        return Err(Error::config("sample count must be at least 1"));
    }
    Ok((0..count as u64).map(|i| synthetic_sample(cfg, first + i)).collect())
}

pub fn generate_synthetic(cfg: &ChannelConfig, count: usize) -> Result<Vec<SpatialFreqCsi>> {
    generate_synthetic_range(cfg, 0, count)
}

/// Largest absolute real or imaginary component, the normalization constant.
pub fn max_abs(samples: &[AngularDelayCsi]) -> f64 {
    samples
        .iter()
        .flat_map(|s| s.matrix.data.iter())
        .map(|z| z.re.abs().max(z.im.abs()))
        .fold(0.0, f64::max)
}

pub fn to_real(ha: &AngularDelayCsi, scale: f64) -> Result<RealCsi> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::config(format!("normalization scale must be positive, got {scale}")));
    }
    let (rows, nt) = (ha.matrix.rows, ha.matrix.cols);
    let k = 0.5 / scale;
    let mut data = Vec::with_capacity(rows * 2 * nt);
    for row in ha.matrix.data.chunks(nt) {
        data.extend(row.iter().map(|z| z.re * k + 0.5));
        data.extend(row.iter().map(|z| z.im * k + 0.5));
    }
    Ok(RealCsi { matrix: Tensor::matrix(rows, 2 * nt, data)?, scale })
}

pub fn from_real(r: &RealCsi) -> Result<AngularDelayCsi> {
    let (rows, cols) = r.matrix.dims2()?;
    if cols % 2 != 0 {
        return Err(Error::dim(format!("real CSI needs an even column count, got {cols}")));
    }
    let nt = cols / 2;
    let k = 2.0 * r.scale;
    let mut data = Vec::with_capacity(rows * nt);
    for row in r.matrix.data().chunks(cols) {
        data.extend((0..nt).map(|j| Complex64::new((row[j] - 0.5) * k, (row[nt + j] - 0.5) * k)));
    }
    Ok(AngularDelayCsi { matrix: ComplexMatrix::from_vec(rows, nt, data)? })
}
