//! Binary dataset cache: 8-byte magic, little-endian `u64` header length, a
//! JSON header (counts, shapes, labels, normalization stats, seed), then the
//! features as raw little-endian `f64`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Dataset, Normalizer, SplitTag};

const MAGIC: &[u8; 8] = b"MOEDSET1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    n: usize,
    dim: usize,
    classes: usize,
    channels: usize,
    split: SplitTag,
    source: String,
    seed: u64,
    normalization: Option<Normalizer>,
    labels: Vec<usize>,
}

pub fn write_cache(ds: &Dataset, normalization: Option<&Normalizer>, seed: u64) -> Result<Vec<u8>> {
    let header = Header {
        version: VERSION,
        n: ds.len(),
        dim: ds.dim(),
        classes: ds.classes(),
        channels: ds.channels(),
        split: ds.split_tag(),
        source: ds.source().to_string(),
        seed,
        normalization: normalization.cloned(),
        labels: ds.labels().to_vec(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Internal(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + ds.features().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for x in ds.features() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Decodes a cache blob into the dataset, its normalization stats and seed.
pub fn read_cache(bytes: &[u8]) -> Result<(Dataset, Option<Normalizer>, u64)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format("dataset cache: bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body =
        bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| Error::format("dataset cache: truncated header"))?;
    let header: Header =
        serde_json::from_slice(body).map_err(|e| Error::format(format!("dataset cache header: {e}")))?;
    if header.version != VERSION {
        return Err(Error::format(format!("dataset cache: unsupported version {}", header.version)));
    }
    let blob = &bytes[16 + hlen..];
    let expected = header.n * header.dim * 8;
    if blob.len() != expected || header.labels.len() != header.n {
        return Err(Error::format(format!("dataset cache: {} feature bytes, expected {expected}", blob.len())));
    }
    let features = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let ds = Dataset::new(features, header.dim, header.labels, header.classes, header.channels, header.source)
        .map_err(|e| Error::format(format!("dataset cache: {e}")))?
        .with_split(header.split);
    Ok((ds, header.normalization, header.seed))
}

pub fn write_cache_file(path: &Path, ds: &Dataset, normalization: Option<&Normalizer>, seed: u64) -> Result<()> {
    let bytes = write_cache(ds, normalization, seed)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_cache_file(path: &Path) -> Result<(Dataset, Option<Normalizer>, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_cache(&bytes)
}
