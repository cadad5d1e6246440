//! CIFAR-10 binary batches: 10,000 records of one label byte followed by
//! 3,072 pixel bytes (1,024 each for the R, G and B planes, row-major).

use std::path::Path;

use crate::error::{Error, Result};

use super::Dataset;

pub const CIFAR_DIM: usize = 3 * 32 * 32;
pub const CIFAR_RECORD: usize = CIFAR_DIM + 1;
pub const CIFAR_CLASSES: usize = 10;

/// Parses raw records; pixels are scaled to `[0, 1]` but not normalized.
pub fn parse_cifar10_binary(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::format(format!(
            "cifar10: {} bytes is not a multiple of {CIFAR_RECORD}; trailing partial record at offset {whole}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n * CIFAR_DIM);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::format(format!("cifar10: record {i} has label byte {label}")));
        }
        labels.push(label);
        features.extend(rec[1..].iter().map(|&p| f64::from(p) / 255.0));
    }
    Dataset::new(features, CIFAR_DIM, labels, CIFAR_CLASSES, 3, "cifar10")
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// First `n_trainval` records of `data_batch_1..5.bin` and the first `n_test`
/// of `test_batch.bin`.
pub fn load_cifar10_dir(dir: &Path, n_trainval: usize, n_test: usize) -> Result<(Dataset, Dataset)> {
    let mut bytes = Vec::new();
    for b in 1..=5 {
        if bytes.len() >= n_trainval * CIFAR_RECORD {
            break;
        }
        bytes.extend(read(&dir.join(format!("data_batch_{b}.bin")))?);
    }
    let want = (n_trainval * CIFAR_RECORD).min(bytes.len() / CIFAR_RECORD * CIFAR_RECORD);
    if want < n_trainval * CIFAR_RECORD {
        return Err(Error::format(format!(
            "cifar10: only {} training records available, {n_trainval} requested",
            want / CIFAR_RECORD
        )));
    }
    let trainval = parse_cifar10_binary(&bytes[..want])?;
    let test_bytes = read(&dir.join("test_batch.bin"))?;
    let take = (n_test * CIFAR_RECORD).min(test_bytes.len());
    let test = parse_cifar10_binary(&test_bytes[..take - take % CIFAR_RECORD])?;
    Ok((trainval, test))
}
