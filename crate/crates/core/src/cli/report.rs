//! Result records: one JSON line per record for machines, an aligned
//! table for people. Both files under the run root are append-only.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_JSONL: &str = "reports.jsonl";
pub const REPORT_TEXT: &str = "reports.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub cr: usize,
    pub ablation: String,
    pub quantizer: String,
    pub bits: Option<u8>,
    pub bits_per_csi: usize,
    pub nmse_db: Option<f64>,
    pub flops: u64,
    pub quantizer_flops: u64,
    pub params: usize,
}

pub fn table(records: &[ReportRecord]) -> String {
    let mut out = format!(
        "{:<17} {:>4} {:<12} {:<9} {:>4} {:>9} {:>10} {:>12} {:>10} {:>17} {:>5}\n",
        "command", "cr", "ablation", "quantizer", "bits", "bits/CSI", "NMSE(dB)", "FLOPs", "params", "config", "seed"
    );
    for r in records {
        let bits = r.bits.map_or("-".to_string(), |b| b.to_string());
        let nmse = r.nmse_db.map_or("-".to_string(), |v| format!("{v:.2}"));
        let flops = format!("{:.2}M", (r.flops + r.quantizer_flops) as f64 / 1e6);
        out.push_str(&format!(
            "{:<17} {:>4} {:<12} {:<9} {:>4} {:>9} {:>10} {:>12} {:>10} {:>17} {:>5}\n",
            r.command, r.cr, r.ablation, r.quantizer, bits, r.bits_per_csi, nmse, flops, r.params, r.config_hash, r.seed
        ));
    }
    out
}

pub fn to_jsonl(records: &[ReportRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Usage(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<ReportRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Usage(format!("bad report line: {e}"))))
        .collect()
}

/// Appends `records` to both report files under `root`.
pub fn append(root: &Path, records: &[ReportRecord]) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let open = |name| OpenOptions::new().create(true).append(true).open(root.join(name));
    open(REPORT_JSONL)?.write_all(to_jsonl(records)?.as_bytes())?;
    open(REPORT_TEXT)?.write_all(table(records).as_bytes())?;
    Ok(())
}
