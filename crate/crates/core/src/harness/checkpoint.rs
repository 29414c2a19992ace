//! Binary parameter checkpoints with a JSON config sidecar.
//!
//! Layout (little-endian): `RGTK`, u32 version, u32 tensor count, then per
//! tensor u32 name length, UTF-8 name, u8 trainable flag, u32 rank, u64
//! dims, f64 data.

use std::path::{Path, PathBuf};

use super::config::TrackerConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::numeric::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"RGTK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_store(store: &ParamStore) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    b.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.push(t.requires_grad as u8);
        b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Named tensors in file order.
pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let trainable = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = trainable;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

/// Overwrites every tensor of `store` from `bytes`; names and shapes must
/// match exactly.
pub fn load_into(store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    let tensors = decode_tensors(bytes)?;
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        store.assign(&name, t)?;
    }
    Ok(())
}

pub fn config_sidecar(path: &Path) -> PathBuf {
    path.with_extension("config.json")
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, cfg: &TrackerConfig) -> Result<()> {
    std::fs::write(path, encode_store(store))?;
    cfg.save(&config_sidecar(path))
}

/// Rebuilds the model from the sidecar config and loads the weights.
pub fn load_checkpoint(path: &Path) -> Result<(TrackerConfig, ParamStore, Model)> {
    let cfg = TrackerConfig::load(&config_sidecar(path))?;
    let (mut store, model) = Model::init(&cfg)?;
    load_into(&mut store, &std::fs::read(path)?)?;
    Ok((cfg, store, model))
}
