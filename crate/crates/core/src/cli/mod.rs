//! The `csikit` command line.

pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::conformer::{Ablation, ConformerConfig, ConformerModel, COMPRESSION_RATIOS};
use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::flops::{flops_breakdown, flops_count, quantizer_flops, FlopsCategory};
use crate::quant::QuantizerKind;
use crate::train::{self, TrainConfig};

pub use config::{RunConfig, RUN_DIR_ENV};
pub use report::ReportRecord;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit status for an error class.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::ConfigMismatch(_) | Error::Dimension(_) => EXIT_CONFIG,
        Error::Io(_)
        | Error::BadMagic { .. }
        | Error::Version { .. }
        | Error::Truncated { .. }
        | Error::CorruptStream(_)
        | Error::CorruptCheckpoint(_) => EXIT_DATA,
        Error::NonFinite(_) => EXIT_NUMERIC,
    }
}

#[derive(Debug, Parser)]
#[command(name = "csikit", version, about = "Conformer CSI feedback: data, training, evaluation, complexity")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set model.cr=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Print machine-readable JSON lines instead of the table.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ModelFlags {
    /// `none`, `svqvae`, `uniform`, `mulaw` or `base_vv`.
    #[arg(long)]
    pub quantizer: Option<String>,
    #[arg(long)]
    pub bits: Option<u8>,
    /// `baseline`, `none_conv` or `conformer_ii`.
    #[arg(long)]
    pub ablation: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate (or import) the train/validation/test splits.
    GenData,
    /// Train a model and evaluate it on the test split.
    Train(ModelFlags),
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: ModelFlags,
    },
    /// Train and evaluate every quantizer at 3, 4 and 5 bits from one seed.
    QuantizeCompare {
        /// Encoder/decoder weights to start every cell from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Restrict the grid to these quantizers. Repeatable.
        #[arg(long = "only")]
        only: Vec<String>,
        /// Restrict the grid to these bit widths. Repeatable.
        #[arg(long = "bits")]
        bits: Vec<u8>,
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Itemized FLOPs and parameter counts.
    Flops {
        /// Compression ratios to report; all five by default. Repeatable.
        #[arg(long)]
        cr: Vec<usize>,
        #[arg(long)]
        ablation: Option<String>,
        /// Also list every layer.
        #[arg(long)]
        itemize: bool,
    },
}

/// Parses `args` and runs the command, returning the exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(cli: &Cli, flags: &ModelFlags) -> Result<RunConfig> {
    let mut sets = cli.overrides.clone();
    if let Some(q) = &flags.quantizer {
        let kind = if q == "none" { "none".to_string() } else { q.parse::<QuantizerKind>()?.name().to_string() };
        sets.push(format!("quantizer.kind=\"{kind}\""));
    }
    if let Some(b) = flags.bits {
        sets.push(format!("quantizer.bits={b}"));
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &sets)?;
    if let Some(a) = &flags.ablation {
        cfg.model = cfg.model.clone().ablation(a.parse::<Ablation>()?);
        cfg.validate()?;
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData => {
            let cfg = load_config(cli, &ModelFlags::default())?;
            let dir = cfg.data_dir();
            let [train, val, test] = gen_data(&cfg, &dir)?;
            println!(
                "wrote {} / {} / {} samples (scale {:.6e}) to {}",
                train.len(),
                val.len(),
                test.len(),
                train.scale,
                dir.display()
            );
            Ok(())
        }
        Command::Train(flags) => {
            let cfg = load_config(cli, flags)?;
            let [train_set, val_set, test_set] = load_splits(&cfg)?;
            let mut model = train::build_model(&cfg.model, &cfg.train_config())?;
            let dir = fresh_dir(&cfg.run_root(), &format!("train-{}", cfg.hash()))?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            let summary = train::train(&mut model, &train_set, &val_set, &cfg.train_config(), Some(&dir))?;
            log::info!("best validation {:.2} dB at epoch {}", summary.best_val_nmse_db, summary.best_epoch);
            let rec = record("train", &cfg, &model, Some(train::evaluate_nmse(&model, &test_set)?));
            emit(cli, &cfg, &[rec])?;
            println!("run directory: {}", dir.display());
            Ok(())
        }
        Command::Eval { checkpoint: path, flags } => {
            let cfg = load_config(cli, flags)?;
            let model = checkpoint::load_expecting(path, &cfg.checkpoint_config())?;
            let test = dataset::load_dataset(cfg.data_dir().join("test.csid"))?;
            let rec = record("eval", &cfg, &model, Some(train::evaluate_nmse(&model, &test)?));
            emit(cli, &cfg, &[rec])
        }
        Command::QuantizeCompare { checkpoint: base, only, bits, ablation } => {
            let flags = ModelFlags { ablation: ablation.clone(), ..Default::default() };
            let cfg = load_config(cli, &flags)?;
            let kinds = if only.is_empty() {
                QuantizerKind::ALL.to_vec()
            } else {
                only.iter().map(|s| s.parse()).collect::<Result<Vec<QuantizerKind>>>()?
            };
            let bits = if bits.is_empty() { vec![3, 4, 5] } else { bits.clone() };
            let base = base.as_deref().map(checkpoint::load).transpose()?;
            let records = quantize_compare(&cfg, base.as_ref(), &kinds, &bits)?;
            emit(cli, &cfg, &records)
        }
        Command::Flops { cr, ablation, itemize } => {
            let flags = ModelFlags { ablation: ablation.clone(), ..Default::default() };
            let cfg = load_config(cli, &flags)?;
            let crs = if cr.is_empty() { COMPRESSION_RATIOS.to_vec() } else { cr.clone() };
            let mut records = Vec::new();
            for &c in &crs {
                let mut at = cfg.clone();
                at.model.cr = c;
                at.validate()?;
                let model = train::build_model(&at.model, &at.train_config())?;
                if *itemize && !cli.json {
                    print_breakdown(&at.model);
                }
                records.push(record("flops", &at, &model, None));
            }
            emit(cli, &cfg, &records)
        }
    }
}

fn print_breakdown(cfg: &ConformerConfig) {
    let b = flops_breakdown(cfg);
    println!("cr {}:", cfg.cr);
    for item in &b.items {
        println!("  {:<40} {:<22} {:>10}", item.layer, format!("{:?}", item.category), item.macs);
    }
    for cat in [
        FlopsCategory::FeedForward,
        FlopsCategory::AttentionProjection,
        FlopsCategory::AttentionProduct,
        FlopsCategory::Convolution,
        FlopsCategory::FullyConnected,
    ] {
        println!("  total {:<34} {:>10}", format!("{cat:?}"), b.category_total(cat));
    }
    println!("  total {:<34} {:>10}", "all", b.total());
}

fn emit(cli: &Cli, cfg: &RunConfig, records: &[ReportRecord]) -> Result<()> {
    report::append(&cfg.run_root(), records)?;
    if cli.json {
        print!("{}", report::to_jsonl(records)?);
    } else {
        print!("{}", report::table(records));
    }
    Ok(())
}

/// Name of the architecture variant a config corresponds to.
pub fn ablation_name(cfg: &ConformerConfig) -> &'static str {
    let base = ConformerConfig { cr: cfg.cr, dropout_rate: cfg.dropout_rate, ..ConformerConfig::default() };
    if *cfg == base {
        "baseline"
    } else if *cfg == base.clone().ablation(Ablation::NoneConv) {
        "none_conv"
    } else if *cfg == base.ablation(Ablation::ConformerII) {
        "conformer_ii"
    } else {
        "custom"
    }
}

/// Report row for a model, with FLOPs and parameters from the accountant.
pub fn record(command: &str, cfg: &RunConfig, model: &ConformerModel, nmse_db: Option<f64>) -> ReportRecord {
    let l = model.config.codeword_len();
    let q = model.quantizer.as_ref();
    ReportRecord {
        command: command.to_string(),
        config_hash: cfg.hash(),
        seed: cfg.training.seed,
        cr: model.config.cr,
        ablation: ablation_name(&model.config).to_string(),
        quantizer: q.map_or("none", |q| q.kind().name()).to_string(),
        bits: q.map(|q| q.bits()),
        bits_per_csi: q.map_or(32 * l, |q| q.bits_per_csi(l)),
        nmse_db,
        flops: flops_count(&model.config),
        quantizer_flops: q.map_or(0, |q| quantizer_flops(&q.config(), l)),
        params: model.param_count(),
    }
}

/// Writes `train.csid`, `val.csid` and `test.csid` into `dir`. Synthetic
/// splits come from disjoint generator streams and share one scale.
pub fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<[Dataset; 3]> {
    let [n_train, n_val, n_test] = cfg.data.split_counts()?;
    let splits = match &cfg.data.raw_path {
        Some(path) => {
            let bytes = std::fs::read(path)?;
            let scale = cfg.data.raw_scale.ok_or_else(|| Error::config("data.raw_scale is required"))?;
            let all = dataset::import_raw(&bytes, cfg.channel.n_a, cfg.channel.n_t, cfg.data.raw_layout.into(), scale)?;
            if all.len() < cfg.data.count {
                return Err(Error::Truncated { expected: cfg.data.count, found: all.len() });
            }
            let idx: Vec<usize> = (0..cfg.data.count).collect();
            let (a, rest) = idx.split_at(n_train);
            let (b, c) = rest.split_at(n_val);
            [all.subset(a), all.subset(b), all.subset(c)]
        }
        None => {
            let ch = &cfg.channel;
            let train = dataset::synthetic_angular_delay(ch, 0, n_train)?;
            let val = dataset::synthetic_angular_delay(ch, n_train as u64, n_val)?;
            let test = dataset::synthetic_angular_delay(ch, (n_train + n_val) as u64, n_test)?;
            let scale = [&train, &val, &test].iter().map(|s| crate::channel::max_abs(s)).fold(0.0, f64::max);
            [dataset::normalize(&train, scale)?, dataset::normalize(&val, scale)?, dataset::normalize(&test, scale)?]
        }
    };
    std::fs::create_dir_all(dir)?;
    for (name, ds) in ["train", "val", "test"].iter().zip(&splits) {
        dataset::save_dataset(dir.join(format!("{name}.csid")), ds)?;
    }
    Ok(splits)
}

fn load_splits(cfg: &RunConfig) -> Result<[Dataset; 3]> {
    let dir = cfg.data_dir();
    let load = |name: &str| dataset::load_dataset(dir.join(format!("{name}.csid")));
    let splits = [load("train")?, load("val")?, load("test")?];
    for ds in &splits {
        if ds.n_a != cfg.model.seq_len || 2 * ds.n_t != cfg.model.d_model {
            return Err(Error::config(format!(
                "dataset holds {}x{} samples, model expects {}x{}",
                ds.n_a,
                2 * ds.n_t,
                cfg.model.seq_len,
                cfg.model.d_model
            )));
        }
    }
    Ok(splits)
}

/// `root/name`, or `root/name-2`, `-3`, ... when taken.
fn fresh_dir(root: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    for i in 1.. {
        let dir = if i == 1 { root.join(name) } else { root.join(format!("{name}-{i}")) };
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("unbounded search")
}

/// Copies every parameter of `base` whose name and shape match into `model`.
pub fn warm_start(model: &mut ConformerModel, base: &ConformerModel) {
    for p in model.params.iter_mut() {
        if let Some(id) = base.params.id(&p.name) {
            let src = base.params.value(id);
            if src.shape() == p.value.shape() && !p.name.starts_with("quant.") {
                p.value = src.clone();
            }
        }
    }
}

/// Every (quantizer, bits) cell trained from the same seed and schedule.
pub fn quantize_compare(
    cfg: &RunConfig,
    base: Option<&ConformerModel>,
    kinds: &[QuantizerKind],
    bits: &[u8],
) -> Result<Vec<ReportRecord>> {
    if let Some(b) = base {
        let diff = checkpoint::CheckpointConfig { model: b.config.clone(), quantizer: None }
            .diff(&checkpoint::CheckpointConfig { model: cfg.model.clone(), quantizer: None });
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff.join("; ")));
        }
    }
    let [train_set, val_set, test_set] = load_splits(cfg)?;
    let root = fresh_dir(&cfg.run_root(), &format!("compare-{}", cfg.hash()))?;
    let mut records = Vec::new();
    for &kind in kinds {
        for &b in bits {
            let mut cell = cfg.clone();
            cell.quantizer.kind = match kind {
                QuantizerKind::Svqvae => config::QuantizerChoice::Svqvae,
                QuantizerKind::Uniform => config::QuantizerChoice::Uniform,
                QuantizerKind::Mulaw => config::QuantizerChoice::Mulaw,
                QuantizerKind::BaseVv => config::QuantizerChoice::BaseVv,
            };
            cell.quantizer.bits = b;
            cell.validate()?;
            let tcfg: TrainConfig = cell.train_config();
            let mut model = ConformerModel::new(cell.model.clone(), tcfg.seed)?;
            if let Some(base) = base {
                warm_start(&mut model, base);
            }
            let qcfg = tcfg.quantizer_config().expect("cell has a quantizer");
            model.attach_quantizer(&qcfg, tcfg.seed.wrapping_add(1))?;
            let dir = root.join(format!("{}-{b}", kind.name()));
            train::train(&mut model, &train_set, &val_set, &tcfg, Some(&dir))?;
            let nmse = train::evaluate_nmse(&model, &test_set)?;
            let mut rec = record("quantize-compare", &cell, &model, Some(nmse));
            rec.config_hash = cfg.hash();
            records.push(rec);
        }
    }
    Ok(records)
}
