//! Model checkpoints.
//!
//! Layout (integers little-endian): magic `CSCM`, `u16` version, `u32`
//! length of a JSON config blob, the blob, `u32` parameter count, then per
//! parameter `u32` name length, UTF-8 name, `u32` rank, `rank` `u32` dims
//! and the `f64` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conformer::{ConformerConfig, ConformerModel};
use crate::error::{Error, Result};
use crate::quant::QuantizerConfig;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CSCM";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Everything needed to rebuild the module structure before loading values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    pub model: ConformerConfig,
    pub quantizer: Option<QuantizerConfig>,
}

impl CheckpointConfig {
    pub fn of(model: &ConformerModel) -> Self {
        Self { model: model.config.clone(), quantizer: model.quantizer.as_ref().map(|q| q.config()) }
    }

    /// Field-by-field description of how `other` differs from `self`.
    pub fn diff(&self, other: &CheckpointConfig) -> Vec<String> {
        let a = flatten(&serde_json::to_value(self).unwrap_or_default());
        let b = flatten(&serde_json::to_value(other).unwrap_or_default());
        let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .filter(|k| a.get(*k) != b.get(*k))
            .map(|k| {
                let show = |v: Option<&String>| v.cloned().unwrap_or_else(|| "<absent>".into());
                format!("{k}: {} -> {}", show(a.get(k)), show(b.get(k)))
            })
            .collect()
    }
}

fn flatten(v: &serde_json::Value) -> std::collections::BTreeMap<String, String> {
    fn walk(prefix: &str, v: &serde_json::Value, out: &mut std::collections::BTreeMap<String, String>) {
        match v {
            serde_json::Value::Object(m) => {
                for (k, x) in m {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, x, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.to_string());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk("", v, &mut out);
    out
}

pub fn to_bytes(model: &ConformerModel) -> Result<Vec<u8>> {
    let cfg = serde_json::to_vec(&CheckpointConfig::of(model))
        .map_err(|e| Error::CorruptCheckpoint(format!("config serialization: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, cfg.len())?;
    out.extend_from_slice(&cfg);
    put_u32(&mut out, model.params.len())?;
    for (_, p) in model.params.iter() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.rank())?;
        for &d in p.value.shape() {
            put_u32(&mut out, d)?;
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::CorruptCheckpoint(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated {
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses the header and the raw parameter list without building a model.
pub fn read_parts(bytes: &[u8]) -> Result<(CheckpointConfig, Vec<(String, Tensor)>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(magic);
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found });
    }
    let v = r.take(2)?;
    let version = u16::from_le_bytes([v[0], v[1]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { expected: CHECKPOINT_VERSION, found: version });
    }
    let n = r.u32()?;
    let config: CheckpointConfig = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config: {e}")))?;
    let count = r.u32()?;
    let mut params = Vec::new();
    for _ in 0..count {
        let n = r.u32()?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::CorruptCheckpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: shape overflows")))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint(format!("{name}: too large")))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::CorruptCheckpoint(format!("{name}: {e}")))?;
        params.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((config, params))
}

pub fn from_bytes(bytes: &[u8]) -> Result<ConformerModel> {
    let (config, params) = read_parts(bytes)?;
    let mut model = ConformerModel::new(config.model.clone(), 0)?;
    if let Some(q) = &config.quantizer {
        model.attach_quantizer(q, 0)?;
    }
    if params.len() != model.params.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} parameters stored, model has {}",
            params.len(),
            model.params.len()
        )));
    }
    for (p, (name, value)) in model.params.iter_mut().zip(params) {
        if p.name != name || p.value.shape() != value.shape() {
            return Err(Error::CorruptCheckpoint(format!(
                "parameter {name} {:?} does not match model slot {} {:?}",
                value.shape(),
                p.name,
                p.value.shape()
            )));
        }
        p.value = value;
    }
    Ok(model)
}

pub fn save(model: &ConformerModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ConformerModel> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads `path` and refuses when its structure differs from `expected`.
/// Differences read `key: <checkpoint> -> <expected>`.
pub fn load_expecting(path: &Path, expected: &CheckpointConfig) -> Result<ConformerModel> {
    let model = load(path)?;
    let found = CheckpointConfig::of(&model);
    let diff = found.model_diff(expected);
    if !diff.is_empty() {
        return Err(Error::ConfigMismatch(diff.join("; ")));
    }
    Ok(model)
}

impl CheckpointConfig {
    /// Like [`diff`](Self::diff) but ignores fitted scalar quantizer ranges,
    /// which a run config cannot know in advance.
    pub fn model_diff(&self, other: &CheckpointConfig) -> Vec<String> {
        let strip = |c: &CheckpointConfig| {
            let mut c = c.clone();
            if let Some(q) = c.quantizer.as_mut() {
                q.range = None;
            }
            c
        };
        strip(self).diff(&strip(other))
    }
}
