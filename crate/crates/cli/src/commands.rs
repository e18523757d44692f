use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::json;
use starseq::config::{sha256_hex, RunConfig};
use starseq::data::{activity_buckets, load_tsv, preprocess, split_leave_one_out, LoadOptions};
use starseq::eval::{evaluate, EvalMode};
use starseq::io::{to_json, write_json, Checkpoint, Manifest, Snapshot};
use starseq::model::{AnyModel, ModelKind};
use starseq::probes::{attention_entropy, bench_runtime, loglog_slope, op_counts, runtime_csv, smoothing_profile};
use starseq::synth::{generate, to_tsv};
use starseq::train::fit;
use starseq::{Error, Result};

fn write_text(path: &Path, text: &str) -> Result<()> {
    let io = |source| Error::Io { path: path.to_path_buf(), source };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, text).map_err(io)
}

/// Writes the manifest beside `artifact` and reports both paths on stdout.
fn finish(cfg: &RunConfig, command: &str, artifact: &Path, data_hash: Option<String>) -> Result<()> {
    let name = artifact.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let manifest_path = artifact.with_file_name(format!("{name}.manifest.json"));
    let manifest = Manifest::new(command, &name, cfg.seed, cfg.to_toml()?, data_hash);
    write_json(&manifest_path, &manifest)?;
    println!(
        "{}",
        json!({ "command": command, "artifact": artifact, "manifest": manifest_path })
    );
    Ok(())
}

fn required(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| Error::Config(format!("no {what} given: pass --{what} or set data.{what}")))
}

fn snapshot(cfg: &RunConfig, data: Option<PathBuf>) -> Result<Snapshot> {
    let path = data
        .or_else(|| cfg.data.snapshot.clone())
        .ok_or_else(|| Error::Config("no snapshot given: pass --data or set data.snapshot".into()))?;
    Snapshot::load(&path)
}

/// Loads a checkpoint and checks it was trained on `snap`.
fn model(cfg: &RunConfig, checkpoint: Option<PathBuf>, snap: &Snapshot) -> Result<AnyModel> {
    let ckpt = Checkpoint::load(&required(checkpoint, &cfg.data.checkpoint, "checkpoint")?)?;
    ckpt.check_data(snap)?;
    ckpt.into_model()
}

pub fn prep(cfg: &RunConfig, input: Option<PathBuf>) -> Result<()> {
    let input = required(input, &cfg.data.input, "input")?;
    let opts = LoadOptions { max_malformed_fraction: cfg.data.max_malformed_fraction };
    let log = load_tsv(&input, opts)?;
    let dataset = preprocess(&log, &cfg.prep)?;
    let split = split_leave_one_out(&dataset);
    let snap = Snapshot::new(cfg.prep, dataset, split)?;
    let path = cfg.out_dir.join("dataset.json");
    snap.save(&path)?;
    finish(cfg, "prep", &path, Some(snap.data_hash))
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let tsv = to_tsv(&generate(&cfg.synth)?);
    let path = cfg.out_dir.join("synthetic.tsv");
    write_text(&path, &tsv)?;
    finish(cfg, "synth", &path, Some(sha256_hex(tsv.as_bytes())))
}

pub fn train(cfg: &RunConfig, data: Option<PathBuf>) -> Result<()> {
    let snap = snapshot(cfg, data)?;
    let ds = &snap.dataset;
    let model = AnyModel::new(cfg.kind, cfg.model.clone(), ds.num_items(), ds.num_users(), cfg.seed)?;
    let mut stdout = std::io::stdout().lock();
    let out = fit(model, &snap.split, &cfg.train, |rec| {
        // A closed stdout must not abort training.
        if let Ok(line) = serde_json::to_string(rec) {
            let _ = writeln!(stdout, "{line}").and_then(|_| stdout.flush());
        }
    })?;
    drop(stdout);
    let path = cfg.out_dir.join("checkpoint.json");
    Checkpoint::new(&out.best, &snap.data_hash, out.best_epoch, out.best_val_recall_at_10).save(&path)?;
    finish(cfg, "train", &path, Some(snap.data_hash))
}

pub fn eval(cfg: &RunConfig, data: Option<PathBuf>, checkpoint: Option<PathBuf>, mode: EvalMode) -> Result<()> {
    let snap = snapshot(cfg, data)?;
    let model = model(cfg, checkpoint, &snap)?;
    let buckets = if cfg.eval.buckets { Some(activity_buckets(&snap.split)?) } else { None };
    let report = evaluate(&model, &snap.split, mode, &cfg.eval_options(), buckets.as_deref())?;
    let path = cfg.out_dir.join("metrics.json");
    write_json(&path, &report)?;
    finish(cfg, "eval", &path, Some(snap.data_hash))
}

pub fn smoothing(cfg: &RunConfig, data: Option<PathBuf>, checkpoint: Option<PathBuf>) -> Result<()> {
    let snap = snapshot(cfg, data)?;
    let model = model(cfg, checkpoint, &snap)?;
    let profile = smoothing_profile(&model, &snap.split, &cfg.smoothing_options())?;
    let path = cfg.out_dir.join("smoothing.json");
    write_json(&path, &profile)?;
    finish(cfg, "probe smoothing", &path, Some(snap.data_hash))
}

pub fn entropy(cfg: &RunConfig, data: Option<PathBuf>, checkpoint: Option<PathBuf>) -> Result<()> {
    let snap = snapshot(cfg, data)?;
    let model = model(cfg, checkpoint, &snap)?;
    let report = attention_entropy(&model, &snap.split, cfg.probe.sample_size, cfg.seed)?;
    let path = cfg.out_dir.join("entropy.json");
    write_json(&path, &report)?;
    finish(cfg, "probe entropy", &path, Some(snap.data_hash))
}

pub fn ops(cfg: &RunConfig, n: u64, d: u64) -> Result<()> {
    let counts = op_counts(n, d)?;
    let path = cfg.out_dir.join("ops.json");
    write_json(&path, &counts)?;
    finish(cfg, "bench ops", &path, None)
}

/// Times both model families so the report carries both slopes; the grid
/// also goes to `runtime.csv` for plotting.
pub fn runtime(cfg: &RunConfig) -> Result<()> {
    let star = bench_runtime(ModelKind::Star, &cfg.bench)?;
    let baseline = bench_runtime(ModelKind::Baseline, &cfg.bench)?;
    let slope = |s| loglog_slope(s).ok();
    let report = json!({
        "slope": { "star": slope(&star), "baseline": slope(&baseline) },
        "samples": star.iter().chain(&baseline).collect::<Vec<_>>(),
    });
    let mut rows = star;
    rows.extend(baseline);
    write_text(&cfg.out_dir.join("runtime.csv"), &runtime_csv(&rows))?;
    let path = cfg.out_dir.join("runtime.json");
    write_text(&path, &to_json(&report)?)?;
    finish(cfg, "bench runtime", &path, None)
}
