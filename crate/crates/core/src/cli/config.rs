//! Declarative run configuration: one TOML document plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelConfig;
use crate::checkpoint::CheckpointConfig;
use crate::conformer::ConformerConfig;
use crate::dataset::RawLayout;
use crate::error::{Error, Result};
use crate::quant::{QuantizerConfig, QuantizerKind, DEFAULT_MU};
use crate::train::TrainConfig;

pub const RUN_DIR_ENV: &str = "CSIKIT_RUN_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizerChoice {
    None,
    Svqvae,
    Uniform,
    Mulaw,
    BaseVv,
}

impl QuantizerChoice {
    pub fn kind(self) -> Option<QuantizerKind> {
        match self {
            QuantizerChoice::None => None,
            QuantizerChoice::Svqvae => Some(QuantizerKind::Svqvae),
            QuantizerChoice::Uniform => Some(QuantizerKind::Uniform),
            QuantizerChoice::Mulaw => Some(QuantizerKind::Mulaw),
            QuantizerChoice::BaseVv => Some(QuantizerKind::BaseVv),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerSection {
    pub kind: QuantizerChoice,
    pub bits: u8,
    pub embedding_dim: usize,
    pub mu: f64,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        Self { kind: QuantizerChoice::None, bits: 5, embedding_dim: 32, mu: DEFAULT_MU }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawLayoutChoice {
    ChannelFirst,
    Concatenated,
}

impl From<RawLayoutChoice> for RawLayout {
    fn from(c: RawLayoutChoice) -> Self {
        match c {
            RawLayoutChoice::ChannelFirst => RawLayout::ChannelFirst,
            RawLayoutChoice::Concatenated => RawLayout::Concatenated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Total samples across the three splits.
    pub count: usize,
    /// Train, validation, test proportions.
    pub split: [usize; 3],
    /// Headerless little-endian `f32` export to import instead of generating.
    pub raw_path: Option<PathBuf>,
    pub raw_layout: RawLayoutChoice,
    /// Normalization scale the raw export was produced with.
    pub raw_scale: Option<f64>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            count: 2250,
            split: [10, 3, 2],
            raw_path: None,
            raw_layout: RawLayoutChoice::Concatenated,
            raw_scale: None,
        }
    }
}

impl DataSection {
    /// Split sizes; rounding remainders go to the training split.
    pub fn split_counts(&self) -> Result<[usize; 3]> {
        let total: usize = self.split.iter().sum();
        if total == 0 {
            return Err(Error::config("data.split must not be all zero"));
        }
        let val = self.count * self.split[1] / total;
        let test = self.count * self.split[2] / total;
        let train = self.count - val - test;
        if train == 0 || val == 0 || test == 0 {
            return Err(Error::config(format!(
                "data.count {} leaves an empty split under {:?}",
                self.count, self.split
            )));
        }
        Ok([train, val, test])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Output root; falls back to `$CSIKIT_RUN_DIR`, then `./runs`.
    pub run_root: Option<PathBuf>,
    /// Dataset directory; defaults to `<run_root>/data`.
    pub data_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub channel: ChannelConfig,
    pub model: ConformerConfig,
    pub quantizer: QuantizerSection,
    pub training: TrainConfig,
    pub data: DataSection,
    pub paths: PathsSection,
}

impl RunConfig {
    /// Reads `path` (or the defaults), applies `overrides` in order, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        self.data.split_counts()?;
        if self.model.seq_len != self.channel.n_a || self.model.d_model != 2 * self.channel.n_t {
            return Err(Error::config(format!(
                "model expects {}x{} inputs but channel produces {}x{}",
                self.model.seq_len,
                self.model.d_model,
                self.channel.n_a,
                2 * self.channel.n_t
            )));
        }
        if let Some(q) = self.quantizer_config() {
            let mut params = crate::params::ParamStore::new();
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
            crate::quant::Quantizer::new(&q, self.model.codeword_len(), &mut params, &mut rng)?;
        }
        if self.data.raw_path.is_some() && self.data.raw_scale.is_none() {
            return Err(Error::config("data.raw_path needs data.raw_scale"));
        }
        Ok(())
    }

    pub fn quantizer_config(&self) -> Option<QuantizerConfig> {
        let q = &self.quantizer;
        q.kind.kind().map(|kind| QuantizerConfig {
            embedding_dim: q.embedding_dim,
            mu: q.mu,
            beta: self.training.beta,
            ..QuantizerConfig::new(kind, q.bits)
        })
    }

    /// Training settings with this config's quantizer selected.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { quantizer: self.quantizer_config(), ..self.training.clone() }
    }

    /// Model structure a checkpoint trained under this config must have.
    pub fn checkpoint_config(&self) -> CheckpointConfig {
        CheckpointConfig { model: self.model.clone(), quantizer: self.quantizer_config() }
    }

    /// Short digest of everything except output paths.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathsSection::default();
        let text = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn run_root(&self) -> PathBuf {
        self.paths
            .run_root
            .clone()
            .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths.data_dir.clone().unwrap_or_else(|| self.run_root().join("data"))
    }
}

/// Sets a dotted key in `doc`. The value is read as TOML when it parses
/// (numbers, booleans, arrays, quoted strings) and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("bad override key {key:?}")));
    }
    let value = parse_value(raw.trim());
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key:?}: {p} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c.data.split_counts().unwrap(), [1500, 450, 300]);
        assert!(c.quantizer_config().is_none());
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let c = RunConfig::load(
            None,
            &["model.cr=16".into(), "quantizer.kind=svqvae".into(), "training.lr_max=1e-3".into()],
        )
        .unwrap();
        assert_eq!(c.model.cr, 16);
        assert_eq!(c.training.lr_max, 1e-3);
        assert_eq!(c.quantizer_config().unwrap().kind, QuantizerKind::Svqvae);
        assert!(RunConfig::load(None, &["model.crr=16".into()]).is_err());
        assert!(RunConfig::load(None, &["bogus.x=1".into()]).is_err());
        assert!(RunConfig::load(None, &["model.cr".into()]).is_err());
        assert!(RunConfig::load(None, &["model.cr=3".into()]).is_err());
    }

    #[test]
    fn split_proportions() {
        let d = DataSection { count: 150, ..Default::default() };
        assert_eq!(d.split_counts().unwrap(), [100, 30, 20]);
        assert!(DataSection { count: 2, ..Default::default() }.split_counts().is_err());
    }

    #[test]
    fn hash_ignores_paths_but_not_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.run_root = Some("elsewhere".into());
        assert_eq!(a.hash(), b.hash());
        b.training.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.quantizer.kind = QuantizerChoice::Mulaw;
        let text = c.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
