//! Eval-mode inference timing: latency per batch, throughput and heap
//! high-water mark.

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::artifact::Provenance;
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{FlopCount, Model};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

static INSTALLED: AtomicBool = AtomicBool::new(false);
static CURRENT: AtomicU64 = AtomicU64::new(0);
static PEAK: AtomicU64 = AtomicU64::new(0);

/// System allocator wrapper that tracks live and peak heap bytes. Install it
/// with `#[global_allocator]` in a binary to enable the memory column.
pub struct TrackingAllocator;

unsafe impl GlobalAlloc for TrackingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        // SAFETY: forwarded unchanged to the system allocator.
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            INSTALLED.store(true, Ordering::Relaxed);
            let now = CURRENT.fetch_add(layout.size() as u64, Ordering::Relaxed) + layout.size() as u64;
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        // SAFETY: `ptr` came from `alloc` above with the same layout.
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size() as u64, Ordering::Relaxed);
    }
}

/// Resets the high-water mark to the current live size.
pub fn reset_peak() {
    PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// Peak live heap bytes since the last reset, if the tracking allocator is installed.
pub fn peak_bytes() -> Option<u64> {
    INSTALLED.load(Ordering::Relaxed).then(|| PEAK.load(Ordering::Relaxed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub batch_sizes: Vec<usize>,
    pub warmup: usize,
    pub measured: usize,
    pub seed: u64,
    pub device: String,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { batch_sizes: vec![1, 32, 256], warmup: 10, measured: 100, seed: 0, device: "cpu".into() }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup < 1 || self.measured < 10 {
            return Err(Error::config(format!(
                "bench needs warmup >= 1 and measured >= 10, got {} and {}",
                self.warmup, self.measured
            )));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::config("bench batch sizes must be nonempty and positive"));
        }
        if self.device != "cpu" {
            return Err(Error::config(format!("unsupported bench device {:?}", self.device)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub batch_size: usize,
    pub params_m: f64,
    pub ms_per_batch_median: f64,
    pub ms_iqr: f64,
    pub img_per_s: f64,
    pub peak_mem_bytes: Option<u64>,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and interquartile range.
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    (quantile(&s, 0.5), quantile(&s, 0.75) - quantile(&s, 0.25))
}

/// One eval-mode forward on a non-recording graph.
pub fn inference(model: &Model, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::<f64>::no_grad();
    let theta = model.theta(&mut g)?;
    let xv = g.constant(x.clone());
    let fwd = model.forward(&mut g, &theta, &xv, None)?;
    if g.node_count() != 0 {
        return Err(Error::Internal(format!("inference recorded {} graph nodes", g.node_count())));
    }
    let out = (*fwd.logits.value()).clone();
    if !out.all_finite() {
        return Err(Error::numeric("bench", "non-finite logits"));
    }
    Ok(out)
}

pub fn bench(name: &str, model: &Model, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.batch_sizes.len());
    for &b in &cfg.batch_sizes {
        let x = Tensor::randn(&[b, model.config.input_dim], &mut Rng::new(cfg.seed, streams::BENCH));
        for _ in 0..cfg.warmup {
            inference(model, &x)?;
        }
        reset_peak();
        let mut times = Vec::with_capacity(cfg.measured);
        for _ in 0..cfg.measured {
            let t = Instant::now();
            let out = inference(model, &x)?;
            times.push(t.elapsed().as_secs_f64() * 1e3);
            drop(out);
        }
        let (median, iqr) = median_iqr(&times);
        rows.push(BenchRow {
            model: name.to_string(),
            batch_size: b,
            params_m: model.num_params() as f64 / 1e6,
            ms_per_batch_median: median,
            ms_iqr: iqr,
            img_per_s: b as f64 * 1000.0 / median,
            peak_mem_bytes: peak_bytes(),
        });
    }
    Ok(rows)
}

pub const BENCH_HEADER: &str = "model,batch_size,params_m,ms_per_batch_median,ms_iqr,img_per_s,peak_mem_bytes";

pub fn bench_csv(rows: &[BenchRow], provenance: Option<&Provenance>) -> String {
    let mut out = provenance.map(Provenance::csv_comment).unwrap_or_default();
    out.push_str(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        let mem = r.peak_mem_bytes.map(|m| m.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{mem}",
            r.model, r.batch_size, r.params_m, r.ms_per_batch_median, r.ms_iqr, r.img_per_s
        );
    }
    out
}

/// Parses [`bench_csv`] output (provenance comment optional).
pub fn parse_bench_csv(text: &str) -> Result<Vec<BenchRow>> {
    let (_, body) = crate::artifact::strip_provenance(text);
    let mut lines = body.lines();
    if lines.next() != Some(BENCH_HEADER) {
        return Err(Error::format("bench CSV header mismatch"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(Error::format(format!("bench CSV row has {} fields: {l}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::format(format!("bench CSV {s:?}: {e}")));
            Ok(BenchRow {
                model: f[0].to_string(),
                batch_size: f[1].parse().map_err(|e| Error::format(format!("bench CSV batch: {e}")))?,
                params_m: num(f[2])?,
                ms_per_batch_median: num(f[3])?,
                ms_iqr: num(f[4])?,
                img_per_s: num(f[5])?,
                peak_mem_bytes: if f[6].is_empty() {
                    None
                } else {
                    Some(f[6].parse().map_err(|e| Error::format(format!("bench CSV memory: {e}")))?)
                },
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub model: String,
    pub batch_size: usize,
    pub ms_per_batch: f64,
    pub img_per_s: f64,
    pub ms_ratio: f64,
    pub throughput_ratio: f64,
    /// Head MACs relative to the baseline's, from the analytic count.
    pub theoretical_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub baseline: String,
    pub rows: Vec<CompareRow>,
    /// Batch sizes at which the sparse head was slower than the soft head.
    pub sparse_slower_than_soft: Vec<usize>,
}

/// Ratios of every model against the dense baseline (or the first model when
/// no dense row exists), per batch size, ranked by latency.
pub fn compare_report(rows: &[BenchRow], flops: &BTreeMap<String, FlopCount>) -> Result<Comparison> {
    let mut by_model: BTreeMap<&str, BTreeMap<usize, &BenchRow>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.model.as_str()) {
            order.push(&r.model);
        }
        if by_model.entry(&r.model).or_default().insert(r.batch_size, r).is_some() {
            return Err(Error::usage(format!("duplicate bench row for {} at batch {}", r.model, r.batch_size)));
        }
    }
    if order.len() < 2 {
        return Err(Error::usage("comparison needs at least two benchmarked models"));
    }
    let sizes: Vec<usize> = by_model[order[0]].keys().copied().collect();
    for m in &order {
        if by_model[m].keys().copied().collect::<Vec<_>>() != sizes {
            return Err(Error::usage(format!("model {m} was benchmarked at different batch sizes")));
        }
    }
    let baseline = if by_model.contains_key("dense") { "dense" } else { order[0] };
    let mut out = Vec::new();
    let mut slower = Vec::new();
    for &b in &sizes {
        let base = by_model[baseline][&b];
        let mut group: Vec<CompareRow> = order
            .iter()
            .map(|m| {
                let r = by_model[m][&b];
                CompareRow {
                    model: m.to_string(),
                    batch_size: b,
                    ms_per_batch: r.ms_per_batch_median,
                    img_per_s: r.img_per_s,
                    ms_ratio: r.ms_per_batch_median / base.ms_per_batch_median,
                    throughput_ratio: r.img_per_s / base.img_per_s,
                    theoretical_ratio: match (flops.get(*m), flops.get(baseline)) {
                        (Some(f), Some(fb)) => Some(f.head() as f64 / fb.head() as f64),
                        _ => None,
                    },
                }
            })
            .collect();
        group.sort_by(|a, b| a.ms_per_batch.total_cmp(&b.ms_per_batch).then_with(|| a.model.cmp(&b.model)));
        if let (Some(s), Some(f)) = (by_model.get("sparse"), by_model.get("soft")) {
            if s[&b].ms_per_batch_median > f[&b].ms_per_batch_median {
                slower.push(b);
            }
        }
        out.extend(group);
    }
    Ok(Comparison { baseline: baseline.to_string(), rows: out, sparse_slower_than_soft: slower })
}

impl Comparison {
    pub fn markdown(&self) -> String {
        let mut s = format!(
            "| model | batch | ms/batch | img/s | ms vs {b} | img/s vs {b} | head MACs vs {b} |\n|---|---|---|---|---|---|---|\n",
            b = self.baseline
        );
        for r in &self.rows {
            let theo = r.theoretical_ratio.map(|t| format!("{t:.3}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "| {} | {} | {:.3} | {:.1} | {:.3} | {:.3} | {theo} |",
                r.model, r.batch_size, r.ms_per_batch, r.img_per_s, r.ms_ratio, r.throughput_ratio
            );
        }
        if !self.sparse_slower_than_soft.is_empty() {
            let _ = writeln!(s, "\nsparse slower than soft at batch sizes {:?}", self.sparse_slower_than_soft);
        }
        s
    }
}
