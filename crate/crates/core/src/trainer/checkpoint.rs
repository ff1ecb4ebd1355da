//! Checkpoint file: magic "LFBC", u32 version, u64 metadata length, JSON
//! metadata, then records of [u32 name length, name, u32 rank, u64 dims,
//! f64 payload], all little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::normalize::NormStats;
use crate::arch::{Group, LfbNet, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub const MAGIC: &[u8; 4] = b"LFBC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
    pub stats: NormStats,
    /// Cycle whose weights these are (1-based; 0 before training).
    pub cycle: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub meta: CheckpointMeta,
    /// Parameters then buffers, in store order.
    pub tensors: Vec<(String, Tensor4)>,
}

impl CheckpointBundle {
    pub fn capture(net: &LfbNet, train: &TrainConfig, stats: NormStats, cycle: usize) -> Self {
        let store = net.store();
        let mut tensors: Vec<(String, Tensor4)> =
            store.params().map(|p| (p.name().to_string(), p.value().clone())).collect();
        tensors.extend(store.buffers().map(|b| (b.name().to_string(), b.get())));
        CheckpointBundle {
            meta: CheckpointMeta {
                model: net.config().clone(),
                train: train.clone(),
                init_seed: net.seed(),
                stats,
                cycle,
            },
            tensors,
        }
    }

    /// Rebuilds the network and loads every stored tensor.
    pub fn restore(&self) -> Result<LfbNet> {
        let mut net = LfbNet::new(self.meta.model.clone(), self.meta.init_seed)?;
        let expected = net.store().len() + net.store().buffers().count();
        if expected != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, model expects {expected}",
                self.tensors.len()
            )));
        }
        for (name, t) in &self.tensors {
            net.store_mut().load_named(name, t.clone())?;
        }
        Ok(net)
    }

    pub fn has_group(&self, group: Group) -> bool {
        let prefix = group.prefix();
        self.tensors.iter().any(|(n, _)| n.starts_with(&prefix))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let payload: usize = self.tensors.iter().map(|(n, t)| 4 + n.len() + 4 + 32 + 8 * t.len()).sum();
        let mut out = Vec::with_capacity(16 + meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&4u32.to_le_bytes());
            for d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let meta_len = r.u64("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
        let mut tensors = Vec::new();
        while r.pos < bytes.len() {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format(format!("tensor name at byte {} is not UTF-8", r.pos)))?
                .to_string();
            let rank = r.u32("rank")?;
            if rank != 4 {
                return Err(Error::Format(format!("tensor `{name}` has rank {rank}, expected 4")));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u64("dims")? as usize;
            }
            let count = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|c| c.checked_mul(8))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` dims {dims:?} overflow")))?;
            let data = r
                .take(count, "payload")?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor4::from_vec(dims, data)?));
        }
        Ok(CheckpointBundle { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated reading {what} at byte {} ({} of {n} bytes left)",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
