//! Binary checkpoint: magic, version, JSON header, little-endian `f64`
//! parameters, trailing CRC32 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::io;

use super::{layout, Model, ModelConfig, Slot};

const MAGIC: &[u8; 8] = b"MOECKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    seed: u64,
    config: ModelConfig,
    layout: Vec<Slot>,
    meta: BTreeMap<String, Value>,
}

/// A model plus free-form metadata (epoch, accuracy, config hash, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: BTreeMap<String, Value>,
}

pub fn write_checkpoint(model: &Model, meta: &BTreeMap<String, Value>) -> Result<Vec<u8>> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        seed: model.config.seed,
        config: model.config.clone(),
        layout: model.params.slots.clone(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Internal(format!("checkpoint header: {e}")))?;
    let values = &model.params.values;
    let mut out = Vec::with_capacity(8 + 4 + 8 + json.len() + 8 + 8 * values.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(format!("checkpoint truncated reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::format("not a checkpoint: bad magic bytes"));
    }
    let version = u32::from_le_bytes(c.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let header_len = c.u64("header length")? as usize;
    let header: Header = serde_json::from_slice(c.take(header_len, "header")?)
        .map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    if header.format_version != version {
        return Err(Error::format("checkpoint header version disagrees with preamble"));
    }
    let count = c.u64("parameter count")? as usize;
    let raw = c.take(count.checked_mul(8).ok_or_else(|| Error::format("parameter count overflows"))?, "parameters")?;
    let body_end = c.pos;
    let stored = u32::from_le_bytes(c.take(4, "checksum")?.try_into().expect("4 bytes"));
    if c.pos != bytes.len() {
        return Err(Error::format(format!("{} trailing bytes after checkpoint", bytes.len() - c.pos)));
    }
    let actual = crc32fast::hash(&bytes[..body_end]);
    if stored != actual {
        return Err(Error::format(format!("checkpoint checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
    }
    if header.seed != header.config.seed {
        return Err(Error::format("checkpoint seed disagrees with its config"));
    }
    header.config.validate().map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
    if layout(&header.config) != header.layout {
        return Err(Error::format("checkpoint layout does not match its config"));
    }
    let values = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    Ok(Checkpoint { model: Model::with_values(header.config, values)?, meta: header.meta })
}

pub fn save_checkpoint(path: &Path, model: &Model, meta: &BTreeMap<String, Value>) -> Result<()> {
    io::write_atomic(path, &write_checkpoint(model, meta)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&io::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadConfig, HeadKind};
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn model() -> Model {
        Model::build(ModelConfig {
            input_dim: 5,
            backbone: vec![4],
            feature_dim: 3,
            head: HeadConfig { kind: HeadKind::Sparse, experts: 3, hidden: 2, k: 2 },
            classes: 2,
            seed: 11,
            ..Default::default()
        })
        .unwrap()
    }

    fn meta() -> BTreeMap<String, Value> {
        BTreeMap::from([("epoch".to_string(), Value::from(3)), ("val_acc".to_string(), Value::from(0.875))])
    }

    #[test]
    fn round_trip_restores_outputs() {
        let m = model();
        let ck = read_checkpoint(&write_checkpoint(&m, &meta()).unwrap()).unwrap();
        assert_eq!(ck.model, m);
        assert_eq!(ck.meta, meta());
        let x = Tensor::randn(&[7, 5], &mut Rng::new(0, 0));
        assert_eq!(ck.model.predict(&x).unwrap(), m.predict(&x).unwrap());
    }

    #[test]
    fn load_then_save_is_byte_identical() {
        let bytes = write_checkpoint(&model(), &meta()).unwrap();
        let ck = read_checkpoint(&bytes).unwrap();
        assert_eq!(write_checkpoint(&ck.model, &ck.meta).unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("best.ckpt");
        save_checkpoint(&p, &model(), &meta()).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap().model, model());
    }

    #[test]
    fn corruption_is_a_format_error() {
        let bytes = write_checkpoint(&model(), &meta()).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(read_checkpoint(&bad_magic), Err(Error::Format(_))));
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(matches!(read_checkpoint(&bad_version), Err(Error::Format(_))));
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 9]), Err(Error::Format(_))));
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 12] ^= 1;
        assert!(matches!(read_checkpoint(&flipped), Err(Error::Format(_))));
        assert!(matches!(read_checkpoint(b""), Err(Error::Format(_))));
    }
}
