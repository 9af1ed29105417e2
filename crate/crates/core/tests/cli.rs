use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csikit::cli::report::{parse_jsonl, REPORT_JSONL};
use csikit::dataset::load_dataset;

const TINY: &str = r#"
[channel]
n_t = 4
n_c = 32
n_a = 8
paths = 3
max_delay_tap = 7

[model]
n_layers = 1
d_model = 8
seq_len = 8
n_heads = 2
conv_kernel = 3
cr = 4

[training]
epochs = 2
batch_size = 4
warmup_epochs = 1

[data]
count = 32
"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn root(&self) -> PathBuf {
        self.dir.path().join("runs")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_csikit"))
            .current_dir(self.dir.path())
            .env("CSIKIT_RUN_DIR", self.root())
            .env("RUST_LOG", "warn")
            .arg("--config")
            .arg(self.dir.path().join("tiny.toml"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn reports(&self) -> Vec<csikit::cli::ReportRecord> {
        parse_jsonl(&std::fs::read_to_string(self.root().join(REPORT_JSONL)).unwrap()).unwrap()
    }
}

fn only_dir_with_prefix(root: &Path, prefix: &str) -> PathBuf {
    let dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

#[test]
fn gen_data_train_eval_round() {
    let ws = Workspace::new();
    ws.ok(&["gen-data"]);
    let data = ws.root().join("data");
    let sizes: Vec<usize> =
        ["train", "val", "test"].iter().map(|s| load_dataset(data.join(format!("{s}.csid"))).unwrap().len()).collect();
    assert_eq!(sizes, [22, 6, 4]);

    ws.ok(&["train"]);
    let run = only_dir_with_prefix(&ws.root(), "train-");
    for f in ["config.toml", "losses.jsonl", "best.cscm"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let ckpt = run.join("best.cscm");
    let ckpt = ckpt.to_str().unwrap();
    let out = ws.ok(&["--json", "eval", "--checkpoint", ckpt]);
    let rec = &parse_jsonl(&out).unwrap()[0];
    assert_eq!(rec.command, "eval");
    assert!(rec.nmse_db.unwrap().is_finite());

    let records = ws.reports();
    assert_eq!(records.iter().map(|r| r.command.as_str()).collect::<Vec<_>>(), ["train", "eval"]);
    assert_eq!(records[0].config_hash, records[1].config_hash);
    assert!(std::fs::read_to_string(ws.root().join("reports.txt")).unwrap().contains("NMSE(dB)"));

    let mismatch = ws.run(&["--set", "model.cr=2", "eval", "--checkpoint", ckpt]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("model.cr: 4 -> 2"));

    ws.ok(&["train"]);
    assert!(ws.root().join(format!("{}-2", run.file_name().unwrap().to_string_lossy())).exists());

    let out = ws.ok(&["--json", "quantize-compare", "--checkpoint", ckpt, "--only", "svqvae", "--only", "uniform", "--bits", "3"]);
    let cells = parse_jsonl(&out).unwrap();
    assert_eq!(cells.len(), 2);
    assert_eq!(cells[0].quantizer, "svqvae");
    assert_eq!(cells[0].bits_per_csi, 16 * 3);
}

#[test]
fn split_of_150_is_100_30_20() {
    let ws = Workspace::new();
    let out = ws.ok(&["--set", "data.count=150", "gen-data"]);
    assert!(out.contains("100 / 30 / 20"), "{out}");
}

#[test]
fn flops_reports_every_cr() {
    let ws = Workspace::new();
    let out = Command::new(env!("CARGO_BIN_EXE_csikit"))
        .env("CSIKIT_RUN_DIR", ws.root())
        .args(["--json", "flops"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let recs = parse_jsonl(&String::from_utf8(out.stdout).unwrap()).unwrap();
    assert_eq!(recs.iter().map(|r| r.cr).collect::<Vec<_>>(), [4, 8, 16, 32, 64]);
    assert!(recs.windows(2).all(|w| w[0].flops > w[1].flops));
    assert_eq!(recs[0].flops, csikit::flops::flops_count(&csikit::conformer::ConformerConfig::with_cr(4)));

    let itemized = ws.ok(&["flops", "--cr", "16", "--itemize"]);
    assert!(itemized.contains("encoder.layers.0.conv.depthwise"));
}

#[test]
fn exit_codes() {
    let ws = Workspace::new();
    assert_eq!(ws.run(&["--set", "model.nonsense=1", "flops"]).status.code(), Some(2));
    assert_eq!(ws.run(&["--set", "model.cr=3", "flops"]).status.code(), Some(2));
    assert_eq!(ws.run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(ws.run(&["--help"]).status.code(), Some(0));
    assert_eq!(ws.run(&["train"]).status.code(), Some(3), "no data generated yet");

    ws.ok(&["gen-data"]);
    let train = ws.root().join("data").join("train.csid");
    let mut bytes = std::fs::read(&train).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(&train, &bytes).unwrap();
    let out = ws.run(&["train"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));

    let junk = ws.dir.path().join("junk.cscm");
    std::fs::write(&junk, b"CSCM\x01\x00garbage").unwrap();
    assert_eq!(ws.run(&["eval", "--checkpoint", junk.to_str().unwrap()]).status.code(), Some(3));
}
