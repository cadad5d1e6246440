use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "train.epochs=3",
    "--set",
    "data.synthetic.n_per_class=20",
    "--set",
    "data.synthetic.dim=8",
    "--set",
    "model.backbone=[12]",
    "--set",
    "model.feature_dim=8",
    "--set",
    "model.head.experts=4",
    "--set",
    "model.head.hidden=4",
];

fn moe_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moe-lab")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train(dir: &Path, head: &str) {
    let out = dir.to_str().unwrap();
    let kind = format!("model.head.kind={head}");
    let mut args = vec!["train", "--out", out, "--set", &kind];
    args.extend_from_slice(SMALL);
    let o = moe_lab(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let sparse = tmp.path().join("sparse");
    let dense = tmp.path().join("dense");
    train(&sparse, "sparse");
    train(&dense, "dense");
    for f in ["metrics.csv", "summary.json", "best.ckpt", "config.json", "routing_val.csv"] {
        assert!(sparse.join(f).is_file(), "missing {f}");
    }
    assert!(!dense.join("routing_val.csv").exists());
    assert!(read(&sparse.join("metrics.csv")).starts_with("# config_hash="));

    let ckpt = sparse.join("best.ckpt");
    let c = ckpt.to_str().unwrap();
    let o = moe_lab(&[
        "analyze-hessian",
        "--checkpoint",
        c,
        "--split",
        "train",
        "--split",
        "val",
        "--set",
        "curvature.samples=4",
        "--set",
        "curvature.alphas=5",
        "--set",
        "curvature.max_iters=30",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let curv = read(&sparse.join("curvature.csv"));
    assert_eq!(curv.lines().filter(|l| !l.starts_with('#')).count(), 5);
    assert_eq!(read(&sparse.join("sweep_val.csv")).lines().count(), 7);

    let o = moe_lab(&["analyze-routing", "--checkpoint", c, "--split", "test"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let routing: serde_json::Value = serde_json::from_str(&read(&sparse.join("routing_test.json"))).unwrap();
    let u: f64 = routing["utilization"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
    assert!((u - 1.0).abs() < 1e-9);

    let dense_ckpt = dense.join("best.ckpt");
    let bench_dir = tmp.path().join("bench");
    let o = moe_lab(&[
        "bench",
        "--checkpoint",
        dense_ckpt.to_str().unwrap(),
        "--checkpoint",
        c,
        "--out",
        bench_dir.to_str().unwrap(),
        "--set",
        "bench.warmup=1",
        "--set",
        "bench.measured=10",
        "--set",
        "bench.batch_sizes=[1,8]",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = moe_lab::bench::parse_bench_csv(&read(&bench_dir.join("bench.csv"))).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.peak_mem_bytes.is_some_and(|m| m > 0)), "allocator not tracking");
    assert!(bench_dir.join("compare.md").is_file());

    let report_dir = tmp.path().join("report");
    let bench_csv = bench_dir.join("bench.csv");
    let o = moe_lab(&[
        "report",
        "--run",
        sparse.to_str().unwrap(),
        "--run",
        dense.to_str().unwrap(),
        "--bench",
        bench_csv.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("curvature.csv"), "dense run has no curvature analysis");
    let acc = read(&report_dir.join("accuracy.csv"));
    assert_eq!(acc.lines().filter(|l| !l.starts_with('#')).count(), 3);
    for f in ["curvature.csv", "efficiency.csv", "utilization.csv", "class_expert.csv", "sweep.csv"] {
        assert!(read(&report_dir.join(f)).starts_with("# config_hash="), "{f}");
    }
    // 3 epochs x 4 experts for the sparse run, none for the dense run
    assert_eq!(read(&report_dir.join("utilization.csv")).lines().count(), 2 + 12);
    let md = read(&report_dir.join("report.md"));
    assert!(md.contains("## Accuracy") && md.contains("## Missing artifacts"));

    // an artifact from another run is refused unless forced
    std::fs::copy(sparse.join("curvature.csv"), dense.join("curvature.csv")).unwrap();
    let args = ["report", "--run", dense.to_str().unwrap(), "--out", report_dir.to_str().unwrap()];
    let o = moe_lab(&args);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[config]"));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&moe_lab(&forced)), 0);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let out = out.to_str().unwrap();

    assert_eq!(code(&moe_lab(&[])), 2);
    assert_eq!(code(&moe_lab(&["--help"])), 0);
    assert_eq!(code(&moe_lab(&["train"])), 2);
    assert_eq!(code(&moe_lab(&["train", "--out", out, "--config", "/no/such/config.json"])), 2);
    assert_eq!(code(&moe_lab(&["train", "--out", out, "--set", "model.head.nope=1"])), 3);
    assert_eq!(code(&moe_lab(&["train", "--out", out, "--set", "model.head.kind=hard", "--set", "model.head.k=2"])), 3);

    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = moe_lab(&["analyze-routing", "--checkpoint", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).starts_with("error[format]"));

    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let o = moe_lab(&["report", "--run", empty.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn locked_run_dir_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join(".lock"), b"").unwrap();
    let mut args = vec!["train", "--out", tmp.path().to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let o = moe_lab(&args);
    assert_ne!(code(&o), 0);
    assert!(!tmp.path().join("metrics.csv").exists());
}
