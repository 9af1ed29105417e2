//! Losses, Adam, the learning-rate schedule, and the training/evaluation loops.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::checkpoint;
use crate::conformer::{ConformerConfig, ConformerModel, Dropout};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::quant::{Quantizer, QuantizerConfig, DEFAULT_BETA};
use crate::tensor::Tensor;

/// Reported NMSE for a perfect reconstruction.
pub const NMSE_FLOOR_DB: f64 = -120.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    pub warmup_epochs: usize,
    pub beta: f64,
    pub seed: u64,
    #[serde(skip)]
    pub quantizer: Option<QuantizerConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr_min: 5e-5,
            lr_max: 2e-4,
            warmup_epochs: 2,
            beta: DEFAULT_BETA,
            seed: 2024,
            quantizer: None,
        }
    }
}

impl TrainConfig {
    /// The full-length schedule: 1000 epochs, batches of 200, 30 warmup epochs.
    pub fn full_scale() -> Self {
        Self { epochs: 1000, batch_size: 200, warmup_epochs: 30, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return Err(Error::config(format!(
                "need 0 < lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("beta must be non-negative, got {}", self.beta)));
        }
        Ok(())
    }

    /// The quantizer to attach, with this run's commitment weight.
    pub fn quantizer_config(&self) -> Option<QuantizerConfig> {
        self.quantizer.clone().map(|q| QuantizerConfig { beta: self.beta, ..q })
    }
}

/// Builds a model for `model_cfg` and attaches the configured quantizer.
pub fn build_model(model_cfg: &ConformerConfig, cfg: &TrainConfig) -> Result<ConformerModel> {
    let mut model = ConformerModel::new(model_cfg.clone(), cfg.seed)?;
    if let Some(q) = cfg.quantizer_config() {
        model.attach_quantizer(&q, cfg.seed.wrapping_add(1))?;
    }
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub mse: f64,
    pub vq_codebook: f64,
    pub vq_commit: f64,
    pub val_nmse_db: f64,
    pub lr: f64,
}

/// `(1/N) sum_n ||truth_n - pred_n||_F^2`.
pub fn mse_loss(truth: &[Tensor], pred: &[Tensor]) -> Result<f64> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::dim(format!("batches of {} and {} samples", truth.len(), pred.len())));
    }
    let mut total = 0.0;
    for (t, p) in truth.iter().zip(pred) {
        if t.shape() != p.shape() {
            return Err(Error::dim(format!("shapes {:?} and {:?} differ", t.shape(), p.shape())));
        }
        total += t.data().iter().zip(p.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / truth.len() as f64)
}

pub fn total_loss(mse: f64, vq: Option<f64>) -> f64 {
    mse + vq.unwrap_or(0.0)
}

/// Linear ramp from `lr_min` to `lr_max` over the warmup epochs, then one
/// cosine half-period back down to `lr_min`.
pub fn cosine_warmup_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Usage(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    let (lo, hi, w) = (cfg.lr_min, cfg.lr_max, cfg.warmup_epochs);
    if epoch < w {
        return Ok(lo + (hi - lo) * epoch as f64 / w as f64);
    }
    let span = (cfg.epochs - w) as f64;
    let progress = (epoch - w) as f64 / span;
    Ok(lo + 0.5 * (hi - lo) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self { m: Vec::new(), v: Vec::new(), step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self { m: zeros.clone(), v: zeros, ..Self::default() }
    }

    fn matches(&self, store: &ParamStore) -> bool {
        self.m.len() == store.len()
            && self.v.len() == store.len()
            && store.iter().zip(&self.m).all(|((_, p), m)| p.value.len() == m.len())
    }
}

/// One bias-corrected Adam update from the gradients stored on each parameter.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if !state.matches(store) {
        return Err(Error::Usage("optimizer state does not match the parameter store".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Independent RNG for a labelled position in the run (epoch, step, ...).
pub fn derive_rng(seed: u64, label: &str, coords: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    for c in coords {
        h.update(c.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// `10 log10` of the mean ratio, with exact zero mapped to the floor.
pub fn nmse_db(ratios: &[f64]) -> f64 {
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    if mean <= 0.0 {
        NMSE_FLOOR_DB
    } else {
        (10.0 * mean.log10()).max(NMSE_FLOOR_DB)
    }
}

/// Eval-mode reconstruction through the full feedback path, bitstream included.
pub fn reconstruct(model: &ConformerModel, x: &Tensor) -> Result<Tensor> {
    model.check_input(x)?;
    let cw = model.encode_tensor(x)?;
    let cw = match &model.quantizer {
        Some(q) => q.dequantize(&model.params, &q.quantize(&model.params, &cw)?)?,
        None => cw,
    };
    model.decode_tensor(&cw)
}

/// Per-sample `||H - H_hat||^2 / ||H||^2` on de-normalized matrices;
/// zero-norm samples are skipped with a warning.
pub fn nmse_ratios(model: &ConformerModel, data: &Dataset) -> Result<Vec<f64>> {
    let mut ratios = Vec::with_capacity(data.len());
    for (i, x) in data.samples.iter().enumerate() {
        let y = reconstruct(model, x)?;
        let denorm = |v: f64| (v - 0.5) * 2.0 * data.scale;
        let (mut err, mut power) = (0.0, 0.0);
        for (a, b) in x.data().iter().zip(y.data()) {
            let (h, h_hat) = (denorm(*a), denorm(*b));
            err += (h - h_hat) * (h - h_hat);
            power += h * h;
        }
        if power == 0.0 {
            log::warn!("sample {i} has zero norm and is excluded from NMSE");
            continue;
        }
        ratios.push(err / power);
    }
    if ratios.is_empty() {
        return Err(Error::Usage("no sample with non-zero norm to evaluate".into()));
    }
    if let Some(bad) = ratios.iter().position(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("reconstruction of evaluation sample {bad}")));
    }
    Ok(ratios)
}

pub fn evaluate_nmse(model: &ConformerModel, data: &Dataset) -> Result<f64> {
    Ok(nmse_db(&nmse_ratios(model, data)?))
}

struct SampleResult {
    grads: ParamGrads,
    sq_error: f64,
    vq_codebook: f64,
    vq_commit: f64,
    cw_range: (f64, f64),
}

fn non_finite(tape: &Tape<'_>, what: &str) -> Error {
    match tape.first_non_finite() {
        Some((v, op)) => Error::NonFinite(format!("{what}: first at tape node {} ({op})", v.index())),
        None => Error::NonFinite(what.to_string()),
    }
}

fn train_sample(model: &ConformerModel, x: &Tensor, rng: ChaCha8Rng) -> Result<SampleResult> {
    let mut tape = Tape::new();
    let input = tape.constant(x.clone());
    let mut drop = Dropout::train(model.config.dropout_rate, rng);
    let cw = model.encode(&mut tape, input, &mut drop)?;
    let cw_range = tape
        .value(cw)
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let (cw, vq) = match &model.quantizer {
        Some(q) => {
            let out = q.forward_train(&model.params, &mut tape, cw)?;
            (out.codeword, out.vq)
        }
        None => (cw, None),
    };
    let out = model.decode(&mut tape, cw, &mut drop)?;
    let diff = tape.sub(out, input)?;
    let sq: Var = tape.sum_squares(diff);
    let loss = match vq {
        Some(vq) => tape.add(sq, vq.total)?,
        None => sq,
    };
    if !tape.value(loss).is_finite() {
        return Err(non_finite(&tape, "training loss"));
    }
    let scalar = |v: Var| tape.value(v).data()[0];
    let (vq_codebook, vq_commit) = vq.map(|vq| (scalar(vq.codebook), scalar(vq.commitment))).unwrap_or((0.0, 0.0));
    let sq_error = scalar(sq);
    let grads = tape.backward(loss)?.into_params();
    Ok(SampleResult { grads, sq_error, vq_codebook, vq_commit, cw_range })
}

/// Fits a scalar quantizer's range to eval-mode codewords of `data`.
pub fn fit_scalar_range(model: &mut ConformerModel, data: &Dataset) -> Result<()> {
    if !matches!(model.quantizer, Some(Quantizer::Uniform(_) | Quantizer::MuLaw(_))) {
        return Ok(());
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in &data.samples {
        for &v in model.encode_tensor(x)?.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    set_range(model, lo, hi)
}

fn set_range(model: &mut ConformerModel, lo: f64, hi: f64) -> Result<()> {
    if let Some(q) = model.quantizer.as_mut().and_then(|q| q.scalar_mut()) {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 1e-6, lo + 1e-6) };
        q.set_range(lo, hi)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub reports: Vec<LossReport>,
    pub best_epoch: usize,
    pub best_val_nmse_db: f64,
}

/// Trains end to end. Scalar quantizer ranges follow the previous epoch's
/// codeword extremes. On return the model holds the parameters of the
/// epoch with the best validation NMSE. With a run directory the loss
/// stream is appended to `losses.jsonl` and the best model is written to
/// `best.cscm`.
pub fn train(
    model: &mut ConformerModel,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Usage("training and validation sets must be non-empty".into()));
    }
    for ds in [train_set, val_set] {
        if let Some(s) = ds.samples.first() {
            model.check_input(s)?;
        }
    }
    let mut log_file = match run_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(OpenOptions::new().create(true).append(true).open(dir.join("losses.jsonl"))?)
        }
        None => None,
    };

    fit_scalar_range(model, train_set)?;
    let mut adam = AdamState::new(&model.params);
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ConformerModel)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = cosine_warmup_lr(epoch, cfg)?;
        order.sort_unstable();
        order.shuffle(&mut derive_rng(cfg.seed, "shuffle", &[epoch as u64]));
        let (mut sq, mut cb, mut cm) = (0.0, 0.0, 0.0);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);

        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = ParamGrads::default();
            for (k, &i) in batch.iter().enumerate() {
                let rng = derive_rng(cfg.seed, "dropout", &[epoch as u64, step as u64, k as u64]);
                let r = train_sample(model, &train_set.samples[i], rng)
                    .map_err(|e| annotate(e, epoch, step))?;
                grads.merge(&r.grads);
                sq += r.sq_error;
                cb += r.vq_codebook;
                cm += r.vq_commit;
                lo = lo.min(r.cw_range.0);
                hi = hi.max(r.cw_range.1);
            }
            model.params.zero_grad();
            model.params.accumulate(&grads, 1.0 / batch.len() as f64);
            if let Some((_, p)) = model.params.iter().find(|(_, p)| !p.grad.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at epoch {epoch}, step {step}",
                    p.name
                )));
            }
            adam_step(&mut model.params, &mut adam, lr)?;
        }
        set_range(model, lo, hi)?;

        let n = train_set.len() as f64;
        let val = evaluate_nmse(model, val_set)?;
        let report = LossReport { epoch, mse: sq / n, vq_codebook: cb / n, vq_commit: cm / n, val_nmse_db: val, lr };
        log::info!(
            "epoch {epoch}: mse {:.6e} vq {:.3e}/{:.3e} val {:.2} dB lr {:.3e}",
            report.mse,
            report.vq_codebook,
            report.vq_commit,
            report.val_nmse_db,
            report.lr
        );
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&report).map_err(|e| Error::Usage(e.to_string()))?;
            writeln!(f, "{line}")?;
        }
        if best.as_ref().is_none_or(|(_, b, _)| val < *b) {
            if let Some(dir) = run_dir {
                checkpoint::save(model, &dir.join("best.cscm"))?;
            }
            best = Some((epoch, val, model.clone()));
        }
        reports.push(report);
    }

    let (best_epoch, best_val_nmse_db, best_model) = best.expect("at least one epoch");
    *model = best_model;
    Ok(TrainSummary { reports, best_epoch, best_val_nmse_db })
}

fn annotate(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} (epoch {epoch}, step {step})")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let a = Tensor::vector(vec![0.0]);
        let b = Tensor::vector(vec![1.0]);
        assert_eq!(mse_loss(&[a.clone()], &[a.clone()]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[a.clone()], &[b]).unwrap(), 1.0);
        assert!(mse_loss(&[a.clone()], &[Tensor::zeros(&[2])]).is_err());
        assert_eq!(total_loss(1.0, Some(0.25)), 1.25);
        assert_eq!(total_loss(0.7, None), 0.7);
    }

    #[test]
    fn schedule_examples() {
        let cfg = TrainConfig { epochs: 130, warmup_epochs: 30, ..Default::default() };
        assert_eq!(cosine_warmup_lr(0, &cfg).unwrap(), 5e-5);
        assert!((cosine_warmup_lr(30, &cfg).unwrap() - 2e-4).abs() < 1e-18);
        assert!((cosine_warmup_lr(80, &cfg).unwrap() - 1.25e-4).abs() < 1e-15);
        assert!(cosine_warmup_lr(130, &cfg).is_err());
        let before = cosine_warmup_lr(29, &cfg).unwrap();
        assert!(before < 2e-4);
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::full_scale().validate().is_ok());
        assert!(TrainConfig { lr_min: 3e-4, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { warmup_epochs: 50, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        s.get_mut(id).grad = Tensor::vector(vec![1.0, 0.0]);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 1e-3).unwrap();
        let w = s.value(id).data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - 2.0).abs() < 1e-12);
        assert!(adam_step(&mut s, &mut AdamState::default(), 1e-3).is_err());
    }

    #[test]
    fn nmse_arithmetic() {
        assert!((nmse_db(&[0.1, 0.1, 0.1]) - -10.0).abs() < 1e-12);
        assert_eq!(nmse_db(&[0.0, 0.0]), NMSE_FLOOR_DB);
    }

    #[test]
    fn derived_streams_differ() {
        use rand::Rng;
        let a: u64 = derive_rng(1, "dropout", &[0, 0, 0]).random();
        let b: u64 = derive_rng(1, "dropout", &[0, 0, 1]).random();
        let c: u64 = derive_rng(1, "dropout", &[0, 0, 0]).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
