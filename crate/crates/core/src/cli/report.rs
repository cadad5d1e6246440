//! Merges run directories into one set of tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::artifact::{config_hash, strip_provenance, Provenance};
use crate::bench::parse_bench_csv;
use crate::error::{Error, Result};
use crate::io::write_atomic;

use super::{RunSummary, METRICS_FILE, SUMMARY_FILE};

#[derive(Clone, Debug, Default)]
pub struct ReportOutcome {
    pub runs: Vec<String>,
    pub warnings: Vec<String>,
    pub files: Vec<PathBuf>,
}

struct Tables {
    accuracy: String,
    curvature: String,
    utilization: String,
    class_expert: String,
    sweep: String,
    md_accuracy: String,
    md_curvature: String,
}

/// Splits a CSV body into header fields and rows of fields.
fn parse_csv(body: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = body.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().map(|h| h.split(',').map(str::to_string).collect()).unwrap_or_default();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
        .replace(',', "_")
}

/// Reads a CSV artifact and checks its provenance against the run's hash.
fn read_artifact(path: &Path, expected: &str, force: bool, warnings: &mut Vec<String>) -> Result<Option<String>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (prov, body) = strip_provenance(&text);
    match prov {
        Some(p) if p.config_hash != expected => {
            let msg = format!("{} has config hash {}, run has {expected}", path.display(), p.config_hash);
            if !force {
                return Err(Error::config(format!("{msg} (use --force to merge anyway)")));
            }
            warnings.push(msg);
        }
        None => warnings.push(format!("{} carries no provenance line", path.display())),
        _ => {}
    }
    Ok(Some(body.to_string()))
}

pub fn report(runs: &[PathBuf], bench: Option<&Path>, out: &Path, force: bool) -> Result<ReportOutcome> {
    let mut outcome = ReportOutcome::default();
    let mut missing: Vec<String> = Vec::new();
    let mut t = Tables {
        accuracy: "run,head,config_hash,seed,M_A,ETT_M_A,V_A,ETT_V_A,test_acc\n".into(),
        curvature: "run,metric,split,value,stderr_or_residual,iters_or_samples,seed\n".into(),
        utilization: "run,epoch,expert,utilization\n".into(),
        class_expert: "run,split,class,count,expert,probability\n".into(),
        sweep: "run,split,alpha,loss,flip_count\n".into(),
        md_accuracy: "| run | head | M_A | ETT(M_A) | V_A | ETT(V_A) | test acc |\n|---|---|---|---|---|---|---|\n"
            .into(),
        md_curvature: "| run | split | λmax | residual | Tr(H) | stderr |\n|---|---|---|---|---|---|\n".into(),
    };
    let mut hashes = Vec::new();
    let mut seed = None;

    for dir in runs {
        let name = run_name(dir);
        let empty = std::fs::read_dir(dir).map(|mut it| it.next().is_none()).unwrap_or(true);
        if empty {
            outcome.warnings.push(format!("{} is empty or missing; skipped", dir.display()));
            continue;
        }
        let summary_path = dir.join(SUMMARY_FILE);
        let summary: RunSummary = match std::fs::read_to_string(&summary_path) {
            Ok(text) => {
                serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", summary_path.display())))?
            }
            Err(_) => {
                missing.push(format!("{name}: {SUMMARY_FILE}"));
                outcome.warnings.push(format!("{} has no {SUMMARY_FILE}; skipped", dir.display()));
                continue;
            }
        };
        let h = summary.config_hash.clone();
        hashes.push(h.clone());
        seed.get_or_insert(summary.seed);
        let _ = writeln!(
            t.accuracy,
            "{name},{},{h},{},{},{},{},{},{}",
            summary.head,
            summary.seed,
            summary.max_train_acc,
            summary.ett_train_acc,
            summary.max_val_acc,
            summary.ett_val_acc,
            summary.test_acc
        );
        let _ = writeln!(
            t.md_accuracy,
            "| {name} | {} | {:.4} | {} | {:.4} | {} | {:.4} |",
            summary.head,
            summary.max_train_acc,
            summary.ett_train_acc,
            summary.max_val_acc,
            summary.ett_val_acc,
            summary.test_acc
        );

        match read_artifact(&dir.join(METRICS_FILE), &h, force, &mut outcome.warnings)? {
            Some(body) => {
                let (header, rows) = parse_csv(&body);
                let util: Vec<(usize, usize)> = header
                    .iter()
                    .enumerate()
                    .filter_map(|(i, c)| c.strip_prefix("util_").and_then(|e| e.parse().ok()).map(|e| (i, e)))
                    .collect();
                for r in &rows {
                    for &(col, e) in &util {
                        let _ = writeln!(t.utilization, "{name},{},{e},{}", r[0], r[col]);
                    }
                }
            }
            None => missing.push(format!("{name}: {METRICS_FILE}")),
        }

        match read_artifact(&dir.join("curvature.csv"), &h, force, &mut outcome.warnings)? {
            Some(body) => {
                let (_, rows) = parse_csv(&body);
                let mut by_split: Vec<(String, [String; 4])> = Vec::new();
                for r in &rows {
                    let _ = writeln!(t.curvature, "{name},{}", r.join(","));
                    let slot = match by_split.iter().position(|(s, _)| *s == r[1]) {
                        Some(i) => i,
                        None => {
                            by_split.push((r[1].clone(), Default::default()));
                            by_split.len() - 1
                        }
                    };
                    let cells = &mut by_split[slot].1;
                    match r[0].as_str() {
                        "lambda_max" => (cells[0], cells[1]) = (r[2].clone(), r[3].clone()),
                        "trace" => (cells[2], cells[3]) = (r[2].clone(), r[3].clone()),
                        _ => {}
                    }
                }
                for (split, c) in by_split {
                    let _ =
                        writeln!(t.md_curvature, "| {name} | {split} | {} | {} | {} | {} |", c[0], c[1], c[2], c[3]);
                }
            }
            None => missing.push(format!("{name}: curvature.csv")),
        }

        let mut entries: Vec<PathBuf> =
            std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for path in entries {
            let file = path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            if let Some(split) = file.strip_prefix("sweep_").and_then(|f| f.strip_suffix(".csv")) {
                if let Some(body) = read_artifact(&path, &h, force, &mut outcome.warnings)? {
                    for r in parse_csv(&body).1 {
                        let _ = writeln!(t.sweep, "{name},{split},{}", r.join(","));
                    }
                }
            } else if let Some(split) = file.strip_prefix("routing_").and_then(|f| f.strip_suffix(".csv")) {
                if let Some(body) = read_artifact(&path, &h, force, &mut outcome.warnings)? {
                    let (header, rows) = parse_csv(&body);
                    for r in rows {
                        let sum: f64 = r[2..].iter().filter_map(|v| v.parse::<f64>().ok()).sum();
                        if (sum - 1.0).abs() > 1e-9 {
                            outcome.warnings.push(format!("{}: class {} row sums to {sum}", path.display(), r[0]));
                        }
                        for (col, v) in r.iter().enumerate().skip(2) {
                            let expert = header[col].trim_start_matches("expert_");
                            let _ = writeln!(t.class_expert, "{name},{split},{},{},{expert},{v}", r[0], r[1]);
                        }
                    }
                }
            }
        }
        outcome.runs.push(name);
    }
    if outcome.runs.is_empty() {
        return Err(Error::usage("no completed run directories to report on"));
    }

    let prov = Provenance { config_hash: config_hash(&hashes)?, seed: seed.unwrap_or(0) };
    let mut efficiency =
        String::from("model,batch_size,params_m,ms_per_batch_median,ms_iqr,img_per_s,peak_mem_bytes\n");
    let mut md_eff = String::new();
    if let Some(b) = bench {
        let text = std::fs::read_to_string(b).map_err(|e| Error::io(b, e))?;
        let rows = parse_bench_csv(&text)?;
        let (_, body) = strip_provenance(&text);
        efficiency = body.to_string();
        md_eff.push_str("| model | batch | params (M) | ms/batch | IQR | img/s | peak mem (bytes) |\n|---|---|---|---|---|---|---|\n");
        for r in rows {
            let mem = r.peak_mem_bytes.map(|m| m.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                md_eff,
                "| {} | {} | {:.4} | {:.3} | {:.3} | {:.1} | {mem} |",
                r.model, r.batch_size, r.params_m, r.ms_per_batch_median, r.ms_iqr, r.img_per_s
            );
        }
    } else {
        missing.push("bench CSV (pass --bench)".into());
    }

    let stamp = prov.csv_comment();
    let files = [
        ("accuracy.csv", &t.accuracy),
        ("curvature.csv", &t.curvature),
        ("efficiency.csv", &efficiency),
        ("utilization.csv", &t.utilization),
        ("class_expert.csv", &t.class_expert),
        ("sweep.csv", &t.sweep),
    ];
    for (file, body) in files {
        let p = out.join(file);
        write_atomic(&p, format!("{stamp}{body}").as_bytes())?;
        outcome.files.push(p);
    }

    let mut md = format!("# Run report\n\nconfig hash `{}`, seed {}\n\n", prov.config_hash, prov.seed);
    let _ = write!(md, "## Accuracy\n\n{}\n", t.md_accuracy);
    let _ = write!(md, "## Curvature (task loss)\n\n{}\n", t.md_curvature);
    if !md_eff.is_empty() {
        let _ = write!(md, "## Inference efficiency\n\n{md_eff}\n");
    }
    if !missing.is_empty() {
        md.push_str("## Missing artifacts\n\n");
        for m in &missing {
            let _ = writeln!(md, "- {m}");
        }
        md.push('\n');
    }
    if !outcome.warnings.is_empty() {
        md.push_str("## Warnings\n\n");
        for w in &outcome.warnings {
            let _ = writeln!(md, "- {w}");
        }
    }
    let p = out.join("report.md");
    write_atomic(&p, md.as_bytes())?;
    outcome.files.push(p);
    outcome.warnings.extend(missing.into_iter().map(|m| format!("missing {m}")));
    Ok(outcome)
}
