//! The `CGCT` checkpoint container.
//!
//! Layout (little-endian): `b"CGCT"`, `u32` version, `u64` manifest length,
//! the JSON manifest, `u32` entry count, then per entry `u32` name length,
//! the name, `u32` rank, `u64` per dimension and `u64` payload byte offset,
//! and finally the `f32` payload. Momentum buffers are stored as
//! `momentum/<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use cgc_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::nn::Parameters;

pub const MAGIC: &[u8; 4] = b"CGCT";
pub const VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum/";

/// Where training resumes: the run seed and the next epoch to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_fingerprint: String,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: Parameters,
}

impl Checkpoint {
    pub fn new(config: &ExperimentConfig, epoch: usize, params: Parameters) -> Result<Self> {
        Ok(Checkpoint {
            manifest: Manifest {
                config_fingerprint: config.fingerprint()?,
                epoch,
                rng: RngState {
                    seed: config.seed,
                    next_epoch: epoch,
                },
                config: config.canonical(),
            },
            params,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let entries: Vec<(String, &Tensor)> = self
            .params
            .values()
            .iter()
            .map(|(k, v)| (k.clone(), v))
            .chain(
                self.params
                    .momentum()
                    .iter()
                    .map(|(k, v)| (format!("{MOMENTUM_PREFIX}{k}"), v)),
            )
            .collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.len() as u64;
        }
        for (_, t) in &entries {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(format_err(0, "missing CGCT magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let len = r.u64()? as usize;
        let at = r.pos;
        let manifest: Manifest = serde_json::from_slice(r.take(len)?)
            .map_err(|e| format_err(at, format!("bad manifest: {e}")))?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| format_err(at, "entry name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            table.push((name, shape, offset));
        }
        let payload_start = r.pos;
        let payload = &bytes[payload_start..];
        let mut expected = 0usize;
        let mut values = BTreeMap::new();
        let mut momentum = BTreeMap::new();
        for (name, shape, offset) in table {
            let n: usize = shape.iter().product();
            let end = offset + 4 * n;
            if end > payload.len() {
                return Err(format_err(
                    payload_start + offset,
                    format!("entry {name} needs {} bytes, payload has {}", 4 * n, payload.len().saturating_sub(offset)),
                ));
            }
            expected = expected.max(end);
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(shape, data)?;
            match name.strip_prefix(MOMENTUM_PREFIX) {
                Some(base) => momentum.insert(base.to_string(), t),
                None => values.insert(name, t),
            };
        }
        if payload.len() != expected {
            return Err(format_err(
                payload_start + expected,
                format!("{} trailing bytes after the last entry", payload.len() - expected),
            ));
        }
        let params = Parameters::from_parts(values, momentum)?;
        params.check_matches(&manifest.config.model)?;
        Ok(Checkpoint { manifest, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        file: "checkpoint",
        offset: offset as u64,
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format_err(self.pos, format!("file ends while reading {n} bytes")))?;
        let s = &self.bytes[self.pos..end];
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
