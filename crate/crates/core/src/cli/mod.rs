//! Command-line verbs: train, analyze-hessian, analyze-routing, bench, report.

mod config;
mod report;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::artifact::{config_hash, Provenance};
use crate::bench::{bench, bench_csv, compare_report};
use crate::curvature::{analyze, curvature_csv, sweep_csv, CurvatureReport, LOSS_TAG};
use crate::data::{load_splits, SplitTag};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{count_flops, load_checkpoint, save_checkpoint, FlopCount, Model};
use crate::moe::{routing_stats, RoutingStats};
use crate::train::{metrics_csv, train, RunMetrics};

pub use config::{apply_override, RunConfig};
pub use report::{report, ReportOutcome};

#[derive(Parser, Debug)]
#[command(
    name = "moe-lab",
    version,
    about = "Mixture-of-Experts heads: training, curvature, routing and inference benchmarks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

fn parse_split(s: &str) -> std::result::Result<SplitTag, String> {
    s.parse::<SplitTag>().map_err(|e| e.to_string())
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes metrics.csv, summary.json, best.ckpt and config.json.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Dotted-path override, e.g. `model.head.k=2`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Largest Hessian eigenvalue, trace and eigenvector sweep per split.
    AnalyzeHessian {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "split", value_parser = parse_split, default_value = "train")]
        splits: Vec<SplitTag>,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Utilization and class-expert routing matrix per split.
    AnalyzeRouting {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "split", value_parser = parse_split, default_value = "val")]
        splits: Vec<SplitTag>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inference latency, throughput and peak memory for one or more checkpoints.
    Bench {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Consolidate run directories into markdown and CSV tables.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Bench CSV to include in the efficiency table.
        #[arg(long)]
        bench: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Merge artifacts even when their config hashes disagree.
        #[arg(long)]
        force: bool,
    },
}

/// Parses `argv` (including the program name), runs the verb and returns the
/// process exit code. Failures print one `error[kind]: reason` line.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { config, out, set } => {
            require_exists(config.as_deref())?;
            cmd_train(config.as_deref(), &out, &set).map(|_| ())
        }
        Command::AnalyzeHessian { checkpoint, splits, out, set } => {
            require_exists(Some(&checkpoint))?;
            cmd_analyze_hessian(&checkpoint, &splits, out.as_deref(), &set).map(|_| ())
        }
        Command::AnalyzeRouting { checkpoint, splits, out } => {
            require_exists(Some(&checkpoint))?;
            cmd_analyze_routing(&checkpoint, &splits, out.as_deref()).map(|_| ())
        }
        Command::Bench { checkpoints, out, config, set } => {
            for c in &checkpoints {
                require_exists(Some(c))?;
            }
            require_exists(config.as_deref())?;
            cmd_bench(&checkpoints, &out, config.as_deref(), &set)
        }
        Command::Report { runs, bench, out, force } => {
            require_exists(bench.as_deref())?;
            let outcome = report(&runs, bench.as_deref(), &out, force)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            println!("report written to {}", out.display());
            Ok(())
        }
    }
}

fn require_exists(path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) if !p.exists() => Err(Error::usage(format!("{} does not exist", p.display()))),
        _ => Ok(()),
    }
}

/// Sentinel file that keeps two writers out of one run directory.
pub struct RunLock(PathBuf);

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::usage(format!(
                "{} is locked by another writer (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v).map_err(|e| Error::Internal(format!("json: {e}")))?;
    s.push(b'\n');
    Ok(s)
}

/// Contents of `summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub head: String,
    pub config_hash: String,
    pub seed: u64,
    pub epochs: usize,
    pub max_train_acc: f64,
    pub ett_train_acc: usize,
    pub max_val_acc: f64,
    pub ett_val_acc: usize,
    pub test_acc: f64,
    pub final_utilization_entropy: Option<f64>,
    pub param_count: usize,
    pub head_param_count: usize,
    pub flops: FlopCount,
    pub best_checkpoint: String,
    pub overrides: Vec<String>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "best.ckpt";

fn checkpoint_meta(cfg: &RunConfig, epoch: usize, val_acc: f64) -> Result<BTreeMap<String, Value>> {
    Ok(BTreeMap::from([
        ("config_hash".to_string(), Value::from(cfg.identity_hash()?)),
        ("epoch".to_string(), Value::from(epoch)),
        ("val_acc".to_string(), Value::from(val_acc)),
        ("run_config".to_string(), serde_json::to_value(cfg).map_err(|e| Error::Internal(e.to_string()))?),
    ]))
}

pub fn cmd_train(config: Option<&Path>, out: &Path, set: &[String]) -> Result<RunSummary> {
    let mut cfg = RunConfig::load(config, set)?;
    let splits = load_splits(&cfg.data)?;
    cfg.resolve(&splits)?;
    let _lock = RunLock::acquire(out)?;
    let prov = cfg.provenance()?;
    write_atomic(&out.join("config.json"), &to_json(&cfg)?)?;

    let mut model = Model::build(cfg.model.clone())?;
    let ckpt = out.join(CHECKPOINT_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let epochs = cfg.train.epochs;
    let outcome = train(&mut model, &splits.train, &splits.val, &cfg.train, |m: &RunMetrics, best, improved| {
        let row = m.rows.last().expect("at least one epoch");
        eprintln!(
            "epoch {}/{epochs} loss={:.4} train_acc={:.4} val_acc={:.4}",
            row.epoch, row.train_loss, row.train_acc, row.val_acc
        );
        write_atomic(&metrics_path, metrics_csv(m, Some(&prov)).as_bytes())?;
        if improved {
            save_checkpoint(&ckpt, best, &checkpoint_meta(&cfg, row.epoch, row.val_acc)?)?;
        }
        Ok(())
    })?;

    let s = outcome.metrics.summary()?;
    let (test_acc, _) = outcome.best.evaluate(&splits.test, cfg.train.eval_batch)?;
    let (_, decisions) = outcome.best.evaluate(&splits.val, cfg.train.eval_batch)?;
    if let Some(d) = decisions {
        let stats = routing_stats(&d, splits.val.labels(), splits.val.classes())?;
        write_atomic(&out.join("routing_val.csv"), class_expert_csv(&stats, Some(&prov)).as_bytes())?;
    }
    let entropy =
        outcome.metrics.final_utilization().map(|u| u.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum::<f64>());
    let summary = RunSummary {
        head: cfg.model.head.kind.as_str().to_string(),
        config_hash: prov.config_hash.clone(),
        seed: cfg.seed,
        epochs,
        max_train_acc: s.max_train_acc,
        ett_train_acc: s.ett_train_acc,
        max_val_acc: s.max_val_acc,
        ett_val_acc: s.ett_val_acc,
        test_acc,
        final_utilization_entropy: entropy,
        param_count: model.num_params(),
        head_param_count: cfg.model.head_param_count(),
        flops: count_flops(&cfg.model),
        best_checkpoint: CHECKPOINT_FILE.to_string(),
        overrides: set.to_vec(),
    };
    write_atomic(&out.join(SUMMARY_FILE), &to_json(&summary)?)?;
    println!(
        "trained {} head: max train acc {:.4} (epoch {}), max val acc {:.4} (epoch {}), test acc {:.4}",
        summary.head, summary.max_train_acc, summary.ett_train_acc, summary.max_val_acc, summary.ett_val_acc, test_acc
    );
    Ok(summary)
}

/// Model plus the run config recorded in its checkpoint.
fn open_checkpoint(path: &Path, set: &[String]) -> Result<(Model, RunConfig)> {
    let ck = load_checkpoint(path)?;
    let recorded = ck
        .meta
        .get("run_config")
        .ok_or_else(|| Error::format(format!("{} has no run_config metadata", path.display())))?;
    let mut value = recorded.clone();
    let schema = serde_json::to_value(RunConfig::default()).map_err(|e| Error::Internal(e.to_string()))?;
    for o in set {
        apply_override(&mut value, &schema, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::config(format!("run_config: {e}")))?;
    Ok((ck.model, cfg))
}

fn out_dir(out: Option<&Path>, checkpoint: &Path) -> PathBuf {
    out.map(Path::to_path_buf).unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default())
}

pub fn cmd_analyze_hessian(
    checkpoint: &Path,
    splits: &[SplitTag],
    out: Option<&Path>,
    set: &[String],
) -> Result<Vec<CurvatureReport>> {
    let (model, cfg) = open_checkpoint(checkpoint, set)?;
    let data = load_splits(&cfg.data)?;
    let out = out_dir(out, checkpoint);
    let _lock = RunLock::acquire(&out)?;
    let prov = cfg.provenance()?;
    let mut ccfg = cfg.curvature.clone();
    ccfg.seed = cfg.seed;
    let mut reports = Vec::new();
    for &tag in dedup(splits).iter() {
        let ds = data.get(tag)?;
        let r = analyze(&model, ds, &ccfg)?;
        eprintln!(
            "{}: lambda_max={:.6} (iters {}, converged {}), trace={:.6} +- {:.6}",
            tag.as_str(),
            r.lambda_max.value,
            r.lambda_max.iterations,
            r.lambda_max.converged,
            r.trace.estimate,
            r.trace.stderr
        );
        write_atomic(&out.join(format!("sweep_{}.csv", tag.as_str())), sweep_csv(&r.sweep, Some(&prov)).as_bytes())?;
        reports.push(r);
    }
    write_atomic(&out.join("curvature.csv"), curvature_csv(&reports, Some(&prov)).as_bytes())?;
    let detail: Vec<Value> = reports
        .iter()
        .map(|r| {
            serde_json::json!({
                "split": r.split.as_str(),
                "split_size": r.split_size,
                "loss": LOSS_TAG,
                "lambda_max": r.lambda_max.value,
                "residual": r.lambda_max.residual,
                "iterations": r.lambda_max.iterations,
                "converged": r.lambda_max.converged,
                "trace": r.trace.estimate,
                "trace_stderr": r.trace.stderr,
                "samples": r.trace.samples,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "config_hash": prov.config_hash,
        "seed": prov.seed,
        "settings": ccfg,
        "reports": detail,
    });
    write_atomic(&out.join("curvature.json"), &to_json(&doc)?)?;
    Ok(reports)
}

fn dedup(splits: &[SplitTag]) -> Vec<SplitTag> {
    let mut out = Vec::new();
    for &s in splits {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// `class,count,expert_0..`; classes without inputs are omitted.
pub fn class_expert_csv(stats: &RoutingStats, provenance: Option<&Provenance>) -> String {
    let mut out = provenance.map(Provenance::csv_comment).unwrap_or_default();
    out.push_str("class,count");
    for i in 0..stats.utilization.len() {
        let _ = write!(out, ",expert_{i}");
    }
    out.push('\n');
    for (c, row) in stats.class_expert.iter().enumerate() {
        if stats.class_counts[c] == 0 {
            continue;
        }
        let _ = write!(out, "{c},{}", stats.class_counts[c]);
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn cmd_analyze_routing(checkpoint: &Path, splits: &[SplitTag], out: Option<&Path>) -> Result<Vec<RoutingStats>> {
    let (model, cfg) = open_checkpoint(checkpoint, &[])?;
    if !model.head_kind().is_moe() {
        return Err(Error::usage("routing analysis needs a mixture-of-experts head"));
    }
    let data = load_splits(&cfg.data)?;
    let out = out_dir(out, checkpoint);
    let _lock = RunLock::acquire(&out)?;
    let prov = cfg.provenance()?;
    let mut all = Vec::new();
    for tag in dedup(splits) {
        let ds = data.get(tag)?;
        let (_, decisions) = model.evaluate(ds, cfg.train.eval_batch)?;
        let decisions = decisions.ok_or_else(|| Error::Internal("MoE head produced no decisions".into()))?;
        let stats = routing_stats(&decisions, ds.labels(), ds.classes())?;
        write_atomic(
            &out.join(format!("routing_{}.csv", tag.as_str())),
            class_expert_csv(&stats, Some(&prov)).as_bytes(),
        )?;
        let doc = serde_json::json!({
            "config_hash": prov.config_hash,
            "seed": prov.seed,
            "split": tag.as_str(),
            "utilization": stats.utilization,
            "utilization_entropy": stats.utilization_entropy(),
        });
        write_atomic(&out.join(format!("routing_{}.json", tag.as_str())), &to_json(&doc)?)?;
        all.push(stats);
    }
    Ok(all)
}

pub fn cmd_bench(checkpoints: &[PathBuf], out: &Path, config: Option<&Path>, set: &[String]) -> Result<()> {
    let run = RunConfig::load(config, set)?;
    let mut bcfg = run.bench.clone();
    bcfg.seed = run.seed;
    let _lock = RunLock::acquire(out)?;
    let mut rows = Vec::new();
    let mut flops = BTreeMap::new();
    let mut hashes = Vec::new();
    for path in checkpoints {
        let (model, cfg) = open_checkpoint(path, &[])?;
        let base = model.head_kind().as_str().to_string();
        let mut name = base.clone();
        let mut n = 2;
        while flops.contains_key(&name) {
            name = format!("{base}-{n}");
            n += 1;
        }
        eprintln!("benchmarking {name} ({})", path.display());
        hashes.push(cfg.identity_hash()?);
        flops.insert(name.clone(), count_flops(&model.config));
        rows.extend(bench(&name, &model, &bcfg)?);
    }
    let prov = Provenance { config_hash: config_hash(&(&hashes, &bcfg))?, seed: bcfg.seed };
    write_atomic(&out.join("bench.csv"), bench_csv(&rows, Some(&prov)).as_bytes())?;
    if rows.iter().map(|r| &r.model).collect::<std::collections::BTreeSet<_>>().len() >= 2 {
        let cmp = compare_report(&rows, &flops)?;
        write_atomic(&out.join("compare.md"), cmp.markdown().as_bytes())?;
        write_atomic(&out.join("compare.json"), &to_json(&cmp)?)?;
        print!("{}", cmp.markdown());
    }
    Ok(())
}
