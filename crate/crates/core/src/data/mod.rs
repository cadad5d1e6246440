//! Datasets: CIFAR-10 binary batches, a synthetic clustered set, stratified
//! splits, normalization and batching.

mod cache;
mod cifar;
mod split;
mod synth;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub use cache::{read_cache, read_cache_file, write_cache, write_cache_file};
pub use cifar::{load_cifar10_dir, parse_cifar10_binary, CIFAR_CLASSES, CIFAR_DIM, CIFAR_RECORD};
pub use split::{split, split_indices};
pub use synth::{synth_clusters, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Full => "full",
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SplitTag::Full),
            "train" => Ok(SplitTag::Train),
            "val" => Ok(SplitTag::Val),
            "test" => Ok(SplitTag::Test),
            other => Err(Error::usage(format!("unknown split '{other}'"))),
        }
    }
}

/// Immutable labelled feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    classes: usize,
    /// Features are grouped into this many equal contiguous channels for
    /// normalization (3 colour planes for CIFAR-10, one per feature otherwise).
    channels: usize,
    split: SplitTag,
    source: String,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        classes: usize,
        channels: usize,
        source: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 || classes == 0 || channels == 0 || !dim.is_multiple_of(channels) {
            return Err(Error::config(format!(
                "invalid dataset geometry: dim {dim}, classes {classes}, channels {channels}"
            )));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::config(format!(
                "{} feature values for {} rows of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().position(|&l| l >= classes) {
            return Err(Error::config(format!("label {} at row {bad} is not below {classes}", labels[bad])));
        }
        Ok(Dataset { features, dim, labels, classes, channels, split: SplitTag::Full, source: source.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn split_tag(&self) -> SplitTag {
        self.split
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn with_split(mut self, split: SplitTag) -> Self {
        self.split = split;
        self
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Dataset {
            features,
            dim: self.dim,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            channels: self.channels,
            split: self.split,
            source: self.source.clone(),
        }
    }

    /// All rows as a `N×D` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.features.clone()).expect("consistent geometry")
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let sub = self.subset(indices);
        Batch {
            x: Tensor::new(vec![indices.len(), self.dim], sub.features).expect("consistent geometry"),
            labels: sub.labels,
            indices: indices.to_vec(),
        }
    }

    /// Shuffled mini-batches for one epoch.
    pub fn batches<'a>(&'a self, batch_size: usize, rng: &mut Rng, drop_last: bool) -> BatchIterator<'a> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        rng.shuffle(&mut order);
        BatchIterator { dataset: self, batch_size: batch_size.max(1), order, pos: 0, drop_last }
    }

    /// Per-class example counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub(crate) fn features_mut(&mut self) -> &mut [f64] {
        &mut self.features
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// One epoch of shuffled batches; every index is yielded exactly once unless
/// `drop_last` discards a short tail.
pub struct BatchIterator<'a> {
    dataset: &'a Dataset,
    batch_size: usize,
    order: Vec<usize>,
    pos: usize,
    drop_last: bool,
}

impl Iterator for BatchIterator<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let remaining = self.order.len() - self.pos;
        if remaining == 0 || (self.drop_last && remaining < self.batch_size) {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let b = self.dataset.batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(b)
    }
}

/// Per-channel affine normalization fitted on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::config("cannot fit normalization on an empty split"));
        }
        let width = ds.dim / ds.channels;
        let count = (ds.len() * width) as f64;
        let mut mean = vec![0.0; ds.channels];
        for row in ds.features.chunks(ds.dim) {
            for (c, chunk) in row.chunks(width).enumerate() {
                mean[c] += chunk.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; ds.channels];
        for row in ds.features.chunks(ds.dim) {
            for (c, chunk) in row.chunks(width).enumerate() {
                var[c] += chunk.iter().map(|x| (x - mean[c]).powi(2)).sum::<f64>();
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, ds: &mut Dataset) -> Result<()> {
        if self.mean.len() != ds.channels {
            return Err(Error::config(format!("normalizer has {} channels, dataset {}", self.mean.len(), ds.channels)));
        }
        let width = ds.dim / ds.channels;
        let dim = ds.dim;
        for row in ds.features_mut().chunks_mut(dim) {
            for (c, chunk) in row.chunks_mut(width).enumerate() {
                for x in chunk {
                    *x = (*x - self.mean[c]) / self.std[c];
                }
            }
        }
        Ok(())
    }
}

/// Where examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Cifar10,
    /// CIFAR-10 when the binary batches can be found, synthetic otherwise.
    Auto,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CifarConfig {
    /// Directory holding `data_batch_*.bin` and `test_batch.bin`; falls back
    /// to `MOE_LAB_DATA_DIR`.
    pub dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for CifarConfig {
    fn default() -> Self {
        CifarConfig { dir: None, n_train: 2000, n_val: 500, n_test: 1000 }
    }
}

pub const DATA_DIR_ENV: &str = "MOE_LAB_DATA_DIR";

impl CifarConfig {
    pub fn resolve_dir(&self) -> Option<PathBuf> {
        self.dir.clone().or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SynthConfig,
    pub cifar: CifarConfig,
    /// Train/val/test fractions for the synthetic source.
    pub fractions: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            synthetic: SynthConfig::default(),
            cifar: CifarConfig::default(),
            fractions: [0.7, 0.15, 0.15],
            split_seed: 0,
        }
    }
}

/// Normalized train/val/test splits.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub normalizer: Normalizer,
}

impl Splits {
    pub fn get(&self, tag: SplitTag) -> Result<&Dataset> {
        match tag {
            SplitTag::Train => Ok(&self.train),
            SplitTag::Val => Ok(&self.val),
            SplitTag::Test => Ok(&self.test),
            SplitTag::Full => Err(Error::usage("'full' is not a split")),
        }
    }

    /// Fits normalization on `train` and applies it to all three splits.
    pub fn normalized(mut train: Dataset, mut val: Dataset, mut test: Dataset) -> Result<Self> {
        let normalizer = Normalizer::fit(&train)?;
        normalizer.apply(&mut train)?;
        normalizer.apply(&mut val)?;
        normalizer.apply(&mut test)?;
        Ok(Splits {
            train: train.with_split(SplitTag::Train),
            val: val.with_split(SplitTag::Val),
            test: test.with_split(SplitTag::Test),
            normalizer,
        })
    }
}

pub fn load_splits(cfg: &DataConfig) -> Result<Splits> {
    let cifar_dir = match cfg.source {
        DataSource::Synthetic => None,
        DataSource::Cifar10 => Some(
            cfg.cifar
                .resolve_dir()
                .ok_or_else(|| Error::config(format!("cifar10 source needs cifar.dir or {DATA_DIR_ENV}")))?,
        ),
        DataSource::Auto => cfg
            .cifar
            .resolve_dir()
            .filter(|d| d.join("data_batch_1.bin").is_file() && d.join("test_batch.bin").is_file()),
    };
    match cifar_dir {
        Some(dir) => {
            let c = &cfg.cifar;
            let (pool, test) = load_cifar10_dir(&dir, c.n_train + c.n_val, c.n_test)?;
            let total = (c.n_train + c.n_val) as f64;
            let frac_train = c.n_train as f64 / total;
            let [tr, va, _] =
                split_indices(pool.labels(), pool.classes(), [frac_train, 1.0 - frac_train, 0.0], cfg.split_seed)?;
            Splits::normalized(pool.subset(&tr), pool.subset(&va), test)
        }
        None => {
            let ds = synth_clusters(&cfg.synthetic)?;
            let (train, val, test) = split(&ds, cfg.fractions, cfg.split_seed)?;
            Splits::normalized(train, val, test)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::streams;

    fn small() -> Dataset {
        synth_clusters(&SynthConfig {
            seed: 5,
            classes: 3,
            clusters_per_class: 2,
            dim: 6,
            n_per_class: 20,
            spread: 0.5,
            center_scale: 2.0,
        })
        .unwrap()
    }

    #[test]
    fn batches_cover_every_index_once() {
        let ds = small();
        let mut rng = Rng::new(1, streams::SHUFFLE);
        let mut seen: Vec<usize> = ds.batches(7, &mut rng, false).flat_map(|b| b.indices).collect();
        assert_eq!(seen.len(), ds.len());
        seen.sort();
        assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
    }

    #[test]
    fn batches_repeat_for_same_seed() {
        let ds = small();
        let a: Vec<_> = ds.batches(8, &mut Rng::new(3, 1), false).flat_map(|b| b.indices).collect();
        let b: Vec<_> = ds.batches(8, &mut Rng::new(3, 1), false).flat_map(|b| b.indices).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn drop_last_discards_tail() {
        let ds = small();
        let batches: Vec<_> = ds.batches(7, &mut Rng::new(1, 1), true).collect();
        assert_eq!(batches.len(), 60 / 7);
        assert!(batches.iter().all(|b| b.labels.len() == 7));
    }

    #[test]
    fn normalization_statistics_on_train() {
        let ds = small();
        let (train, val, test) = split(&ds, [0.6, 0.2, 0.2], 9).unwrap();
        let s = Splits::normalized(train, val, test).unwrap();
        let t = &s.train;
        for c in 0..t.dim() {
            let col: Vec<f64> = (0..t.len()).map(|i| t.row(i)[c]).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            assert!(m.abs() < 1e-6, "mean {m}");
            assert!((sd - 1.0).abs() < 1e-3, "std {sd}");
        }
    }

    #[test]
    fn channel_normalization_groups_planes() {
        // two channels of width 2
        let ds = Dataset::new(vec![0.0, 2.0, 10.0, 10.0, 4.0, 6.0, 30.0, 30.0], 4, vec![0, 1], 2, 2, "t").unwrap();
        let n = Normalizer::fit(&ds).unwrap();
        assert_eq!(n.mean, vec![3.0, 20.0]);
        assert_eq!(n.std[1], 10.0);
    }

    #[test]
    fn bad_labels_rejected() {
        assert!(Dataset::new(vec![0.0; 4], 2, vec![0, 3], 3, 1, "t").is_err());
    }

    #[test]
    fn synthetic_pipeline_loads() {
        let s = load_splits(&DataConfig::default()).unwrap();
        assert_eq!(s.train.split_tag(), SplitTag::Train);
        assert!(!s.val.is_empty() && !s.test.is_empty());
    }
}
