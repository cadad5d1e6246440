//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints one PASS/FAIL line; exits nonzero if any fails.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::*;
use moe_lab::autodiff::{gradient, hvp, loss_value, Graph, Objective, Var};
use moe_lab::bench::{bench, bench_csv, compare_report, parse_bench_csv, BenchConfig, BENCH_HEADER};
use moe_lab::curvature::{
    alpha_grid, eigen_sweep, hutchinson, objective_sweep, power_iteration, HessianOperator, ObjectiveHessian, SplitLoss,
};
use moe_lab::data::{load_splits, DataConfig, Splits};
use moe_lab::model::{count_flops, HeadConfig, HeadKind, LossWeights, Model, ModelConfig};
use moe_lab::rng::{streams, Rng};
use moe_lab::tensor::{Scalar, Tensor};
use moe_lab::train::{train, RunMetrics, TrainConfig};
use nalgebra::{DMatrix, SymmetricEigen};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s(e: moe_lab::Error) -> String {
    e.to_string()
}

const HEADS: [HeadKind; 4] = [HeadKind::Dense, HeadKind::Soft, HeadKind::Sparse, HeadKind::Hard];

/// Smallest distance of any ReLU pre-activation or top-k cutoff from a tie,
/// computed with an independent forward pass over the named slots.
fn kink_margin(model: &Model, x: &Tensor, noise: Option<u64>) -> f64 {
    let cfg = &model.config;
    let (b, _) = x.dims2().unwrap();
    let p = &model.params;
    let dense = |a: &[f64], fan_in: usize, w: &[f64], bias: &[f64]| -> Vec<f64> {
        let fan_out = bias.len();
        (0..a.len() / fan_in)
            .flat_map(|r| (0..fan_out).map(move |j| (r, j)))
            .map(|(r, j)| (0..fan_in).map(|i| a[r * fan_in + i] * w[i * fan_out + j]).sum::<f64>() + bias[j])
            .collect()
    };
    let mut margin = f64::INFINITY;
    let mut a = x.data().to_vec();
    let mut width = cfg.input_dim;
    for (l, &(fan_in, fan_out)) in cfg.backbone_layers().iter().enumerate() {
        let z = dense(
            &a,
            fan_in,
            p.get(&format!("backbone.{l}.weight")).unwrap(),
            p.get(&format!("backbone.{l}.bias")).unwrap(),
        );
        margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
        a = z.into_iter().map(|v| v.max(0.0)).collect();
        width = fan_out;
    }
    let heads: Vec<String> = if cfg.head.kind == HeadKind::Dense {
        vec!["head".into()]
    } else {
        (0..cfg.head.experts).map(|e| format!("expert.{e}")).collect()
    };
    for h in heads {
        let z = dense(&a, width, p.get(&format!("{h}.fc1.weight")).unwrap(), p.get(&format!("{h}.fc1.bias")).unwrap());
        margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
    }
    if cfg.head.kind.is_top_k() {
        let mut g = Graph::<f64>::no_grad();
        let theta = model.theta(&mut g).unwrap();
        let xv = g.constant(x.clone());
        let mut rng = noise.map(|s| Rng::new(s, streams::NOISE));
        let fwd = model.forward(&mut g, &theta, &xv, rng.as_mut()).unwrap();
        let k = cfg.head.k;
        let raw = dense(&a, width, p.get("gate.weight").unwrap(), p.get("gate.bias").unwrap());
        let n = cfg.head.experts;
        for (d, row) in fwd.routing.unwrap().decisions().iter().zip(raw.chunks(n)) {
            // standardization divides by the raw spread, so express the gap in raw units
            let mean = row.iter().sum::<f64>() / n as f64;
            let spread = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            let mut z = d.noisy_logits.clone();
            z.sort_by(|a, b| b.total_cmp(a));
            margin = margin.min((z[k - 1] - z[k]) * spread);
        }
    }
    debug_assert_eq!(a.len(), b * width);
    margin
}

/// Twenty tiny models, five per head kind, each with a fixed batch. Candidates
/// closer than `1e-3` to a ReLU kink or a top-k tie are skipped, since finite
/// differences are meaningless across a non-differentiable point.
fn oracle_models() -> Vec<(Model, Tensor, Vec<usize>, Option<u64>)> {
    let mut out = Vec::new();
    for (slot, kind) in HEADS.iter().enumerate() {
        let mut seed = slot as u64;
        let mut kept = 0;
        while kept < 5 {
            let ds = blobs(3, 3, 4, 100 + seed);
            let model = Model::build(tiny_config(*kind, 3, 3, seed)).unwrap();
            let b = ds.batch(&(0..ds.len()).collect::<Vec<_>>());
            let noise = kind.is_top_k().then_some(1000 + seed);
            if kink_margin(&model, &b.x, noise) >= 1e-3 {
                out.push((model, b.x, b.labels, noise));
                kept += 1;
            }
            seed += 4;
        }
    }
    out
}

fn fd_gradient<O: Objective>(f: &O, theta: &[f64], h: f64) -> Vec<f64> {
    (0..theta.len())
        .map(|i| {
            let mut p = theta.to_vec();
            p[i] = theta[i] + h;
            let up = loss_value(f, &p).unwrap();
            p[i] = theta[i] - h;
            let down = loss_value(f, &p).unwrap();
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn c1_gradient() -> Check {
    let mut worst = 0.0f64;
    for (i, (model, x, labels, noise)) in oracle_models().iter().enumerate() {
        ensure(model.num_params() <= 500, format!("model {i} has {} params", model.num_params()))?;
        let f = TrainLoss { model, x: x.clone(), labels: labels.clone(), noise_seed: *noise };
        let theta = &model.params.values;
        let (_, g) = gradient(&f, theta).map_err(e2s)?;
        let fd = fd_gradient(&f, theta, 1e-5);
        let err = rel_err(&g, &fd);
        worst = worst.max(err);
        ensure(err < 1e-4, format!("model {i} ({}): relative error {err:.3e}", model.head_kind().as_str()))?;
    }
    Ok(format!("20 models, max relative error {worst:.2e}"))
}

fn c2_hvp() -> Check {
    let mut worst = 0.0f64;
    let mut rng = Rng::new(7, 99);
    for (i, (model, x, labels, noise)) in oracle_models().iter().enumerate() {
        let f = TrainLoss { model, x: x.clone(), labels: labels.clone(), noise_seed: *noise };
        let theta = &model.params.values;
        for _ in 0..10 {
            let v = random_unit(theta.len(), &mut rng);
            let hv = hvp(&f, theta, &v).map_err(e2s)?;
            let h = 1e-4;
            let (_, gp) = gradient(&f, &axpy(theta, h, &v)).map_err(e2s)?;
            let (_, gm) = gradient(&f, &axpy(theta, -h, &v)).map_err(e2s)?;
            let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let err = rel_err(&hv, &fd);
            worst = worst.max(err);
            ensure(err < 1e-3, format!("model {i}: relative error {err:.3e}"))?;
        }
    }
    Ok(format!("200 directions, max relative error {worst:.2e}"))
}

/// A small sparse model trained briefly, plus its training split.
fn curvature_fixture() -> (Model, moe_lab::data::Dataset) {
    let ds = blobs(3, 3, 12, 5);
    let mut cfg = tiny_config(HeadKind::Sparse, 3, 3, 11);
    cfg.loss_weights = LossWeights { kl: 0.0, importance: 0.01, load: 0.01 };
    let mut model = Model::build(cfg).unwrap();
    let tc = TrainConfig { epochs: 20, batch_size: 8, lr: 0.05, seed: 3, ..Default::default() };
    let out = train(&mut model, &ds, &ds, &tc, |_, _, _| Ok(())).unwrap();
    (out.best, ds)
}

fn dense_hessian(op: &impl HessianOperator) -> DMatrix<f64> {
    let n = op.dim();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = op.apply(&e).unwrap();
        for i in 0..n {
            h[(i, j)] = col[i];
        }
    }
    (&h + h.transpose()) * 0.5
}

fn fd_hessian(op: &SplitLoss<'_>, theta: &[f64]) -> DMatrix<f64> {
    let n = theta.len();
    let h = 1e-5;
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut p = theta.to_vec();
        p[j] += h;
        let (_, gp) = op.gradient_at(&p).unwrap();
        p[j] = theta[j] - h;
        let (_, gm) = op.gradient_at(&p).unwrap();
        for i in 0..n {
            m[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }
    (&m + m.transpose()) * 0.5
}

fn c3_lambda_max() -> Check {
    let (model, ds) = curvature_fixture();
    ensure(model.num_params() <= 200, format!("fixture has {} params", model.num_params()))?;
    let op = SplitLoss::new(&model, &ds, 16).map_err(e2s)?;
    let h = dense_hessian(&op);
    let fd = fd_hessian(&op, &model.params.values);
    let agree = (&h - &fd).norm() / h.norm();
    ensure(agree < 1e-5, format!("HVP Hessian and finite-difference Hessian differ by {agree:.2e}"))?;
    let eig = SymmetricEigen::new(h);
    let (top, idx) = eig.eigenvalues.iter().enumerate().map(|(i, &v)| (v, i)).fold((f64::NEG_INFINITY, 0), |a, b| {
        if b.0 > a.0 {
            b
        } else {
            a
        }
    });
    let most_negative = eig.eigenvalues.min();
    ensure(top >= most_negative.abs(), format!("dominant eigenvalue is negative ({most_negative} vs {top})"))?;
    let e = power_iteration(&op, 1e-9, 5000, 0).map_err(e2s)?;
    let rel = (e.value - top).abs() / top.abs();
    let exact = eig.eigenvectors.column(idx);
    let cos = exact.iter().zip(&e.vector).map(|(a, b)| a * b).sum::<f64>().abs();
    ensure(rel < 0.01, format!("lambda {} vs exact {top}: {rel:.2e}", e.value))?;
    ensure(cos > 0.99, format!("eigenvector cosine {cos}"))?;
    Ok(format!(
        "{} params, lambda {:.6} vs {:.6} (rel {rel:.1e}), |cos| {cos:.6}, {} iters, converged {}",
        model.num_params(),
        e.value,
        top,
        e.iterations,
        e.converged
    ))
}

/// ½ Σ dᵢ θᵢ².
struct DiagQuadratic(Vec<f64>);

impl Objective for DiagQuadratic {
    fn num_params(&self) -> usize {
        self.0.len()
    }

    fn eval<S: Scalar>(&self, g: &mut Graph<S>, p: &Var<S>) -> moe_lab::Result<Var<S>> {
        let d = g.constant(Tensor::new(vec![self.0.len()], self.0.iter().map(|&x| S::from_f64(x)).collect())?);
        let sq = g.square(p)?;
        let w = g.mul(&sq, &d)?;
        let s = g.sum(&w, None)?;
        g.scale(&s, 0.5)
    }
}

fn c4_trace() -> Check {
    let (model, ds) = curvature_fixture();
    let op = SplitLoss::new(&model, &ds, 16).map_err(e2s)?;
    let exact = dense_hessian(&op).trace();
    let one = hutchinson(&op, 100, 0).map_err(e2s)?;
    let z = (one.estimate - exact).abs() / one.stderr;
    ensure(z <= 3.0, format!("seed 0: estimate {} vs exact {exact}, {z:.2} SE", one.estimate))?;
    let runs: Vec<_> = (0..50).map(|s| hutchinson(&op, 100, s)).collect::<Result<_, _>>().map_err(e2s)?;
    let mean = runs.iter().map(|r| r.estimate).sum::<f64>() / 50.0;
    let pooled_se = runs.iter().map(|r| r.stderr.powi(2)).sum::<f64>().sqrt() / 50.0;
    let zp = (mean - exact).abs() / pooled_se;
    ensure(zp <= 3.0, format!("pooled mean {mean} vs exact {exact}, {zp:.2} pooled SE"))?;

    let d: Vec<f64> = (1..=12).map(|i| i as f64).collect();
    let q = DiagQuadratic(d.clone());
    let at = vec![0.25; d.len()];
    let tq = hutchinson(&ObjectiveHessian { objective: &q, at: &at }, 20, 4).map_err(e2s)?;
    let tr: f64 = d.iter().sum();
    ensure(
        tq.estimate == tr && tq.stderr == 0.0,
        format!("diagonal quadratic: {} ± {} vs {tr}", tq.estimate, tq.stderr),
    )?;
    Ok(format!("exact {exact:.6}, seed 0 within {z:.2} SE, pooled within {zp:.2} SE, diagonal exact with SE 0"))
}

fn synthetic_splits(seed: u64) -> Splits {
    let mut cfg = DataConfig::default();
    cfg.synthetic.seed = seed;
    cfg.split_seed = seed;
    load_splits(&cfg).unwrap()
}

fn head_config(kind: HeadKind) -> HeadConfig {
    match kind {
        HeadKind::Dense => HeadConfig { kind, experts: 8, hidden: 128, k: 2 },
        HeadKind::Hard => HeadConfig { kind, experts: 8, hidden: 16, k: 1 },
        _ => HeadConfig { kind, experts: 8, hidden: 16, k: 2 },
    }
}

fn synth_model(kind: HeadKind, seed: u64) -> ModelConfig {
    ModelConfig {
        input_dim: 32,
        backbone: vec![64],
        feature_dim: 32,
        head: head_config(kind),
        classes: 10,
        loss_weights: LossWeights { kl: 0.01, importance: 0.01, load: 0.01 },
        seed,
    }
}

fn c5_routing() -> Check {
    let splits = synthetic_splits(0);
    let model = Model::build(synth_model(HeadKind::Sparse, 0)).map_err(e2s)?;
    let mut shuffle = Rng::new(0, streams::SHUFFLE);
    let mut noise = Rng::new(0, streams::NOISE);
    let mut count = 0;
    for batch in splits.train.batches(64, &mut shuffle, false) {
        let mut g = Graph::<f64>::new();
        let theta = model.theta(&mut g).map_err(e2s)?;
        let x = g.constant(batch.x);
        let fwd = model.forward(&mut g, &theta, &x, Some(&mut noise)).map_err(e2s)?;
        for d in fwd.routing.ok_or("sparse head produced no routing")?.decisions() {
            let s: f64 = d.weights.iter().sum();
            ensure(d.nonzero() == 2, format!("decision with {} nonzero weights", d.nonzero()))?;
            ensure((s - 1.0).abs() <= 1e-9, format!("weights sum to {s}"))?;
            count += 1;
        }
    }
    ensure(count == splits.train.len(), "epoch did not cover the split")?;

    let x = splits.train.to_tensor();
    let a = model.predict(&x).map_err(e2s)?;
    let b = model.predict(&x).map_err(e2s)?;
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure(bits(&a.logits) == bits(&b.logits) && a.decisions == b.decisions, "eval re-run differs")?;

    let decisions = a.decisions.ok_or("no decisions")?;
    let classes = model.config.classes;
    for (i, d) in decisions.iter().enumerate().take(50) {
        let sel = d.selected_set();
        let e = (0..8).find(|e| !sel.contains(e)).ok_or("every expert selected")?;
        let mut values = model.params.values.clone();
        for s in model.params.slots.iter().filter(|s| s.name.starts_with(&format!("expert.{e}."))) {
            values[s.range()].iter_mut().for_each(|v| *v += 0.75);
        }
        let p = model.predict_with(&values, &x).map_err(e2s)?;
        let row = |t: &Tensor| bits(t)[i * classes..(i + 1) * classes].to_vec();
        ensure(row(&p.logits) == row(&a.logits), format!("input {i} changed when unselected expert {e} moved"))?;
    }
    Ok(format!("{count} training decisions checked, eval repeatable, 50 unselected-expert perturbations inert"))
}

fn run(cfg: ModelConfig, splits: &Splits, tc: &TrainConfig) -> Result<RunMetrics, String> {
    let mut model = Model::build(cfg).map_err(e2s)?;
    train(&mut model, &splits.train, &splits.val, tc, |_, _, _| Ok(())).map(|o| o.metrics).map_err(e2s)
}

fn c6_single_expert() -> Check {
    let splits = synthetic_splits(1);
    let tc = TrainConfig { epochs: 10, seed: 1, ..Default::default() };
    let mut dense = synth_model(HeadKind::Dense, 1);
    dense.head.hidden = 16;
    let mut soft = dense.clone();
    soft.head = HeadConfig { kind: HeadKind::Soft, experts: 1, hidden: 16, k: 1 };
    soft.loss_weights.kl = 0.0;
    let a = run(dense, &splits, &tc)?;
    let b = run(soft, &splits, &tc)?;
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        ensure(
            ra.train_loss.to_bits() == rb.train_loss.to_bits() && ra.val_acc == rb.val_acc,
            format!("epoch {}: loss {} vs {}", ra.epoch, ra.train_loss, rb.train_loss),
        )?;
    }
    ensure(a.rows.len() == 10 && b.rows.len() == 10, "missing epochs")?;
    Ok(format!("10 epochs bit-identical, final loss {:.6}", a.rows[9].train_loss))
}

fn c7_budget() -> Check {
    let base = ModelConfig { input_dim: 512, backbone: vec![], feature_dim: 512, classes: 10, ..Default::default() };
    let dense =
        ModelConfig { head: HeadConfig { kind: HeadKind::Dense, experts: 1, hidden: 512, k: 1 }, ..base.clone() };
    let soft = ModelConfig { head: HeadConfig { kind: HeadKind::Soft, experts: 8, hidden: 64, k: 1 }, ..base };
    let (d, s) = (dense.head_param_count(), soft.head_param_count());
    ensure(d == 267_786 && s == 271_960, format!("head params {d} and {s}"))?;
    let ratio = s as f64 / d as f64;
    ensure((ratio - 1.0).abs() < 0.02, format!("ratio {ratio}"))?;
    Ok(format!("{d} vs {s}, ratio {ratio:.4}"))
}

fn c8_flops() -> Check {
    let cfg = synth_model(HeadKind::Sparse, 0);
    let f = count_flops(&cfg);
    ensure(f.active_ratio() == 0.25, format!("active ratio {}", f.active_ratio()))?;
    Ok(format!("{} of {} expert MACs active", f.experts_active, f.experts_total))
}

const SEEDS: [u64; 3] = [0, 1, 2];

fn parity_config(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 30, seed, ..Default::default() }
}

fn c9_balance(runs: &BTreeMap<(HeadKind, u64), RunMetrics>) -> Check {
    let target = 0.9 * 8f64.ln();
    let mut out = Vec::new();
    for seed in SEEDS {
        let m = &runs[&(HeadKind::Sparse, seed)];
        let u = m.final_utilization().ok_or("no utilization recorded")?;
        let h: f64 = u.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
        ensure(h >= target, format!("seed {seed}: entropy {h:.4} < {target:.4}"))?;
        out.push(format!("{h:.4}"));
    }
    Ok(format!("entropies [{}] >= {target:.4}", out.join(", ")))
}

fn c10_parity(runs: &BTreeMap<(HeadKind, u64), RunMetrics>) -> Check {
    let mut means = Vec::new();
    for kind in [HeadKind::Dense, HeadKind::Soft, HeadKind::Sparse] {
        let mut acc = 0.0;
        for seed in SEEDS {
            let s = runs[&(kind, seed)].summary().map_err(e2s)?;
            ensure(s.max_train_acc >= 0.99, format!("{} seed {seed}: train acc {}", kind.as_str(), s.max_train_acc))?;
            acc += s.max_val_acc / SEEDS.len() as f64;
        }
        means.push((kind.as_str(), acc));
    }
    let spread = means.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max)
        - means.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    let shown = means.iter().map(|(k, a)| format!("{k} {a:.4}")).collect::<Vec<_>>().join(", ");
    ensure(spread <= 0.02, format!("validation accuracy spread {spread:.4}: {shown}"))?;
    Ok(format!("mean val acc {shown}; spread {spread:.4}"))
}

fn c11_sweep() -> Check {
    let q = DiagQuadratic(vec![3.0, 1.0, 0.5]);
    let theta = vec![0.0; 3];
    let alphas = alpha_grid(41, 1.0);
    let rows = objective_sweep(&q, &theta, &[1.0, 0.0, 0.0], &alphas).map_err(e2s)?;
    let worst = rows.iter().map(|r| (r.loss - 1.5 * r.alpha * r.alpha).abs()).fold(0.0, f64::max);
    ensure(worst <= 1e-9, format!("quadratic sweep off by {worst:e}"))?;

    let (model, ds) = curvature_fixture();
    let before = model.params.values.clone();
    let op = SplitLoss::new(&model, &ds, 16).map_err(e2s)?;
    let e = power_iteration(&op, 1e-6, 500, 0).map_err(e2s)?;
    let sweep = eigen_sweep(&model, &e.vector, &alphas, &ds, 16).map_err(e2s)?;
    let base = model.eval_loss_with(&model.params.values, &ds, 16).map_err(e2s)?;
    let mid = sweep.iter().find(|r| r.alpha == 0.0).ok_or("no alpha = 0 point")?;
    ensure(mid.loss.to_bits() == base.to_bits(), format!("alpha 0 loss {} vs {base}", mid.loss))?;
    let restored = model.params.values.iter().zip(&before).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(restored, "parameters changed by the sweep")?;
    Ok(format!("quadratic max error {worst:.1e}; alpha 0 exact; parameters untouched"))
}

fn c12_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let set: Vec<String> = [
        "seed=5",
        "train.epochs=4",
        "data.synthetic.n_per_class=30",
        "model.backbone=[16]",
        "model.feature_dim=8",
        "model.head.experts=4",
        "model.head.hidden=4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    moe_lab::cli::cmd_train(None, &a, &set).map_err(e2s)?;
    moe_lab::cli::cmd_train(None, &b, &set).map_err(e2s)?;
    for f in ["metrics.csv", "best.ckpt", "summary.json", "routing_val.csv", "config.json"] {
        let x = std::fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(x == y, format!("{f} differs between runs"))?;
    }
    Ok("metrics.csv, best.ckpt, summary.json, routing_val.csv, config.json byte-identical".into())
}

fn c13_bench() -> Check {
    let cfg = BenchConfig { batch_sizes: vec![1, 16, 64], warmup: 2, measured: 10, ..Default::default() };
    let mut rows = Vec::new();
    let mut flops = BTreeMap::new();
    for kind in [HeadKind::Dense, HeadKind::Soft, HeadKind::Sparse] {
        let mc = synth_model(kind, 0);
        flops.insert(kind.as_str().to_string(), count_flops(&mc));
        rows.extend(bench(kind.as_str(), &Model::build(mc).map_err(e2s)?, &cfg).map_err(e2s)?);
    }
    let csv = bench_csv(&rows, None);
    ensure(csv.lines().next() == Some(BENCH_HEADER), "bench CSV header")?;
    let parsed = parse_bench_csv(&csv).map_err(e2s)?;
    ensure(parsed == rows, "bench CSV does not round-trip")?;
    for r in &parsed {
        let expect = r.batch_size as f64 * 1000.0 / r.ms_per_batch_median;
        ensure(
            (r.img_per_s - expect).abs() <= 1e-9 * expect,
            format!("{} batch {}: img/s mismatch", r.model, r.batch_size),
        )?;
        ensure(r.ms_iqr >= 0.0 && r.params_m > 0.0, format!("{} batch {}: bad row", r.model, r.batch_size))?;
    }
    let cmp = compare_report(&parsed, &flops).map_err(e2s)?;
    ensure(cmp.baseline == "dense" && cmp.rows.len() == 9, "comparison shape")?;
    ensure(!cmp.markdown().is_empty(), "empty markdown")?;
    Ok(format!(
        "{} rows, baseline {}, sparse slower than soft at {:?}",
        parsed.len(),
        cmp.baseline,
        cmp.sparse_slower_than_soft
    ))
}

fn main() {
    let started = Instant::now();
    let mut failures = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({secs:.1}s) {detail}"),
            Err(why) => {
                failures += 1;
                println!("criterion {n:>2} {name}: FAIL ({secs:.1}s) {why}");
            }
        }
    };
    report(1, "gradient oracle", &mut c1_gradient);
    report(2, "hvp oracle", &mut c2_hvp);
    report(3, "lambda_max oracle", &mut c3_lambda_max);
    report(4, "trace oracle", &mut c4_trace);
    report(5, "routing invariants", &mut c5_routing);
    report(6, "single-expert equivalence", &mut c6_single_expert);
    report(7, "budget matching", &mut c7_budget);
    report(8, "flops factor", &mut c8_flops);

    let t = Instant::now();
    let mut runs = BTreeMap::new();
    let mut train_err = None;
    for seed in SEEDS {
        let splits = synthetic_splits(seed);
        for kind in [HeadKind::Dense, HeadKind::Soft, HeadKind::Sparse] {
            match run(synth_model(kind, seed), &splits, &parity_config(seed)) {
                Ok(m) => {
                    runs.insert((kind, seed), m);
                }
                Err(e) => train_err = Some(format!("{} seed {seed}: {e}", kind.as_str())),
            }
        }
    }
    println!("(trained 9 synthetic runs in {:.1}s)", t.elapsed().as_secs_f64());
    let with_runs = |f: fn(&BTreeMap<(HeadKind, u64), RunMetrics>) -> Check| match &train_err {
        Some(e) => Err(e.clone()),
        None => f(&runs),
    };
    report(9, "load balancing", &mut || with_runs(c9_balance));
    report(10, "accuracy parity", &mut || with_runs(c10_parity));
    report(11, "sweep sanity", &mut c11_sweep);
    report(12, "end-to-end determinism", &mut c12_determinism);
    report(13, "bench harness", &mut c13_bench);

    println!("acceptance: {} of 13 passed in {:.1}s", 13 - failures, started.elapsed().as_secs_f64());
    if failures > 0 {
        std::process::exit(1);
    }
}
