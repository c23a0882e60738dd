//! Name-keyed parameter checkpoints.
//!
//! Layout: magic `TCKP`, `u32` version, `u64` metadata length, metadata JSON,
//! `u64` parameter count, then per parameter (in name order) `u32` name
//! length, UTF-8 name, `u32` rank, `u64` dims, and the little-endian `f32` payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, ParamTable, ParamTensor};

const MAGIC: &[u8; 4] = b"TCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub epoch: usize,
    pub seed: u64,
    /// Configuration of the model(s) the parameters belong to.
    pub config: serde_json::Value,
    /// Number of checkpoints averaged into this one (1 for a plain snapshot).
    #[serde(default = "one")]
    pub averaged: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamTable,
}

impl Checkpoint {
    /// Snapshot of several stores, each under its own name prefix.
    pub fn from_stores(meta: CheckpointMeta, stores: &[(&str, &ParamStore)]) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (prefix, store) in stores {
            for (name, p) in store.to_table()? {
                params.insert(format!("{prefix}{name}"), p);
            }
        }
        Ok(Self { meta, params })
    }

    /// The parameters under `prefix`, with the prefix removed.
    pub fn sub_table(&self, prefix: &str) -> ParamTable {
        self.params
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|rest| (rest.to_string(), v.clone())))
            .collect()
    }

    pub fn load_into(&self, prefix: &str, store: &ParamStore) -> Result<()> {
        store.load_table(&self.sub_table(prefix))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let io = |e| Error::io("<checkpoint stream>", e);
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(meta.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&meta).map_err(io)?;
        w.write_all(&(self.params.len() as u64).to_le_bytes()).map_err(io)?;
        for (name, p) in &self.params {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_all(&(p.shape.len() as u32).to_le_bytes()).map_err(io)?;
            for &d in &p.shape {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            let mut buf = Vec::with_capacity(p.data.len() * 4);
            for v in &p.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = u64::from_le_bytes(read_array(r)?) as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(r, &mut meta)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)?;
        let count = u64::from_le_bytes(read_array(r)?);
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(read_array(r)?) as usize;
            let mut name = vec![0u8; name_len];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8".into()))?;
            let rank = u32::from_le_bytes(read_array(r)?) as usize;
            let shape = (0..rank)
                .map(|_| Ok(u64::from_le_bytes(read_array(r)?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            read_exact(r, &mut raw)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if params.insert(name.clone(), ParamTensor { shape, data }).is_some() {
                return Err(bad(format!("duplicate parameter {name}")));
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| Error::io("<checkpoint stream>", e))? != 0 {
            return Err(bad("trailing bytes after parameter table".into()));
        }
        Ok(Self { meta, params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn checksum(&self) -> Result<String> {
        Ok(hex_digest(&self.to_bytes()?))
    }

    /// SHA-256 over the parameters whose names start with `prefix`.
    pub fn params_checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(k, _)| k.starts_with(prefix)) {
            h.update(name.as_bytes());
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("truncated checkpoint".into()))
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

/// Elementwise mean of checkpoints with identical parameter tables.
/// Sums are accumulated in 64-bit; metadata comes from the last checkpoint.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let last = ckpts.last().ok_or_else(|| Error::Checkpoint("nothing to average".into()))?;
    for c in ckpts {
        if !c.params.keys().eq(last.params.keys()) {
            return Err(Error::Checkpoint("checkpoints have different parameter names".into()));
        }
        for (name, p) in &c.params {
            if p.shape != last.params[name].shape {
                return Err(Error::Checkpoint(format!("{name}: shapes differ between checkpoints")));
            }
        }
    }
    let n = ckpts.len() as f64;
    let params = last
        .params
        .iter()
        .map(|(name, p)| {
            let mut acc = vec![0.0f64; p.data.len()];
            for c in ckpts {
                for (a, &v) in acc.iter_mut().zip(&c.params[name].data) {
                    *a += v as f64;
                }
            }
            let data = acc.into_iter().map(|a| (a / n) as f32).collect();
            (name.clone(), ParamTensor { shape: p.shape.clone(), data })
        })
        .collect();
    let mut meta = last.meta.clone();
    meta.averaged = ckpts.iter().map(|c| c.meta.averaged).sum();
    Ok(Checkpoint { meta, params })
}
