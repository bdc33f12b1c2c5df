//! Versioned binary container for configs and named tensors.
//!
//! Layout: magic `POVTCKPT`, u32 version, u32 config length + JSON config,
//! u32 tensor count, then per tensor: u32 name length, name, u32 ndim,
//! u64 dims, little-endian f64 values.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::OffsetReader;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const CKPT_MAGIC: &[u8; 8] = b"POVTCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new<C: Serialize>(config: &C, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        Ok(Checkpoint {
            config: serde_json::to_value(config)?,
            tensors,
        })
    }

    pub fn config_as<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    /// Config value under `key`, decoded.
    pub fn section<C: DeserializeOwned>(&self, key: &str) -> Result<C> {
        let v = self
            .config
            .get(key)
            .ok_or_else(|| Error::config(format!("checkpoint config has no `{key}` section")))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    /// Tensors whose names start with `prefix.`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(&p).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(&cfg);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = OffsetReader::new(BufReader::new(File::open(path)?));
        if r.bytes(8, "magic")? != CKPT_MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != CKPT_VERSION {
            return Err(Error::format(
                8,
                format!("checkpoint version {version} unsupported (expected {CKPT_VERSION})"),
            ));
        }
        let len = r.u32("config length")? as usize;
        let at = r.offset;
        let config = serde_json::from_slice(&r.bytes(len, "config")?)
            .map_err(|e| Error::format(at, format!("bad config block: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32("name length")? as usize;
            let at = r.offset;
            let name = String::from_utf8(r.bytes(nlen, "tensor name")?)
                .map_err(|_| Error::format(at, "tensor name is not UTF-8"))?;
            let ndim = r.u32("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("dim")? as usize);
            }
            let n: usize = shape.iter().product();
            let at = r.offset;
            let raw = r.bytes(n * 8, "tensor values")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
            tensors.push((name, t));
        }
        if !r.at_eof()? {
            return Err(Error::format(r.offset, "trailing bytes after last tensor"));
        }
        Ok(Checkpoint { config, tensors })
    }
}
