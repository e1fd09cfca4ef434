//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EMSCKPT1"  u32 version
//! u32 len, meta JSON (run config, network spec, anchors, epochs)
//! u32 count, then per tensor:  u32 len, name, u32 rank, u32 dims[rank], f32 values
//! u32 count, then per BN layer: u32 len, name, u32 channels, f32 mean[c], f32 var[c]
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::blocks::{Network, NetworkSpec, ParamStore};
use crate::detection::AnchorSet;
use crate::error::{Error, Result};
use crate::spiking::BnStats;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EMSCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub network: NetworkSpec,
    pub anchors: AnchorSet,
    /// Training epochs completed.
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore<f32>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits in u32").to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::parse(format!("byte {}", self.pos), msg)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)?;
        let at = self.pos;
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::parse(format!("byte {at}"), format!("{what} is not UTF-8")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| self.fail(format!("{what} too large")))?;
        let b = self.take(bytes, what)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &serde_json::to_string(&self.meta).expect("meta serializes"));
        put_u32(&mut out, self.store.params.len());
        for (name, t) in &self.store.params {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len());
            for &d in t.shape() {
                put_u32(&mut out, d);
            }
            put_f32s(&mut out, t.data());
        }
        put_u32(&mut out, self.store.buffers.len());
        for (name, b) in &self.store.buffers {
            put_str(&mut out, name);
            put_u32(&mut out, b.mean.len());
            put_f32s(&mut out, &b.mean);
            put_f32s(&mut out, &b.var);
        }
        out
    }

    /// Parses the byte layout only; `network` checks it against the spec.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::parse("byte 0", "not a checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::parse("byte 8", format!("unsupported checkpoint version {version}")));
        }
        let at = r.pos;
        let json = r.string("metadata")?;
        let meta: CheckpointMeta =
            serde_json::from_str(&json).map_err(|e| Error::parse(format!("byte {at}"), format!("metadata: {e}")))?;
        let mut params = BTreeMap::new();
        for _ in 0..r.u32("tensor count")? {
            let at = r.pos;
            let name = r.string("tensor name")?;
            let rank = r.u32("tensor rank")?;
            if rank > 8 {
                return Err(r.fail(format!("tensor {name} has rank {rank}")));
            }
            let shape = (0..rank).map(|_| r.u32("tensor shape")).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let numel = numel.ok_or_else(|| r.fail(format!("tensor {name} is too large")))?;
            let data = r.f32s(numel, "tensor values")?;
            let t = Tensor::new(shape, data)?;
            if params.insert(name.clone(), t).is_some() {
                return Err(Error::parse(format!("byte {at}"), format!("duplicate tensor {name}")));
            }
        }
        let mut buffers = BTreeMap::new();
        for _ in 0..r.u32("buffer count")? {
            let at = r.pos;
            let name = r.string("buffer name")?;
            let channels = r.u32("buffer channels")?;
            let mean = r.f32s(channels, "running mean")?;
            let var = r.f32s(channels, "running variance")?;
            if buffers.insert(name.clone(), BnStats { mean, var }).is_some() {
                return Err(Error::parse(format!("byte {at}"), format!("duplicate buffer {name}")));
            }
        }
        if r.pos != buf.len() {
            return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Self { meta, store: ParamStore { params, buffers } })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }

    /// Rebuilds the network and installs the stored parameters. Every tensor
    /// and buffer must match the spec by name and shape.
    pub fn network(&self) -> Result<Network<f32>> {
        let m = &self.meta.config.model;
        let mut net = Network::new(&self.meta.network, m.lif(), m.bn(), self.meta.config.training.seed)?;
        let problems = store_mismatches(&net.store, &self.store);
        if !problems.is_empty() {
            return Err(Error::Data(format!("checkpoint does not match its network: {}", problems.join("; "))));
        }
        net.store = self.store.clone();
        Ok(net)
    }
}

/// Differences between the parameters a network expects and those offered.
pub fn store_mismatches(expected: &ParamStore<f32>, found: &ParamStore<f32>) -> Vec<String> {
    let mut out = Vec::new();
    for (name, t) in &expected.params {
        match found.params.get(name) {
            None => out.push(format!("missing tensor {name}")),
            Some(f) if f.shape() != t.shape() => {
                out.push(format!("tensor {name} has shape {:?}, expected {:?}", f.shape(), t.shape()))
            }
            Some(_) => {}
        }
    }
    out.extend(found.params.keys().filter(|k| !expected.params.contains_key(*k)).map(|k| format!("unexpected tensor {k}")));
    for (name, b) in &expected.buffers {
        match found.buffers.get(name) {
            None => out.push(format!("missing buffer {name}")),
            Some(f) if f.mean.len() != b.mean.len() || f.var.len() != b.var.len() => {
                out.push(format!("buffer {name} has {} channels, expected {}", f.mean.len(), b.mean.len()))
            }
            Some(_) => {}
        }
    }
    out.extend(
        found.buffers.keys().filter(|k| !expected.buffers.contains_key(*k)).map(|k| format!("unexpected buffer {k}")),
    );
    out
}
