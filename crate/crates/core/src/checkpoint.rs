//! Checkpoint file:
//!
//! ```text
//! "L2S1" | u32 version | u32 header length | header JSON
//! u32 array count | arrays
//! u64 checksum
//! ```
//!
//! Each array is `u32 name length | name | u8 kind | u32 rank | u32 dims.. | f32 values`,
//! all little-endian. Optimizer moments are stored as `adam.m/{name}` and
//! `adam.v/{name}`. The checksum is the first 8 bytes of SHA-256 over everything
//! before it, read as a little-endian u64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{model_hash, RunConfig};
use crate::diffusion::TrainState;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{ParameterStore, Tensor};

pub const MAGIC: &[u8; 4] = b"L2S1";
pub const FORMAT_VERSION: u32 = 1;

const KIND_FROZEN: u8 = 0;
const KIND_TRAINABLE: u8 = 1;
const KIND_MOMENT: u8 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: RunConfig,
    pub config_hash: String,
    pub model_hash: String,
    pub stage: u8,
    pub step: usize,
    pub rng_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParameterStore,
}

fn checksum(bytes: &[u8]) -> u64 {
    u64::from_le_bytes(Sha256::digest(bytes)[..8].try_into().unwrap())
}

fn put_u32(buf: &mut Vec<u8>, x: usize) {
    buf.extend_from_slice(&(x as u32).to_le_bytes());
}

fn put_array(buf: &mut Vec<u8>, name: &str, kind: u8, shape: &[usize], data: &[f64]) {
    put_u32(buf, name.len());
    buf.extend_from_slice(name.as_bytes());
    buf.push(kind);
    put_u32(buf, shape.len());
    for &d in shape {
        put_u32(buf, d);
    }
    for &x in data {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config: &RunConfig) -> Result<Self> {
        if state.model.cfg != config.model {
            return Err(Error::Checkpoint("model config of the state differs from the run config".into()));
        }
        Ok(Checkpoint {
            header: CheckpointHeader {
                config: config.clone(),
                config_hash: config.hash(),
                model_hash: config.model_hash(),
                stage: state.stage,
                step: state.step,
                rng_seed: state.model.params.rng_seed,
            },
            params: state.model.params.clone(),
        })
    }

    pub fn into_state(self) -> TrainState {
        TrainState {
            model: Model {
                cfg: self.header.config.model.clone(),
                params: self.params,
            },
            stage: self.header.stage,
            step: self.header.step,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION as usize);
        let header = serde_json::to_vec(&self.header)?;
        put_u32(&mut buf, header.len());
        buf.extend_from_slice(&header);
        let mut count = 0;
        for (_, p) in self.params.iter() {
            count += 1 + if p.moments.is_some() { 2 } else { 0 };
        }
        put_u32(&mut buf, count);
        for (name, p) in self.params.iter() {
            let kind = if p.requires_grad { KIND_TRAINABLE } else { KIND_FROZEN };
            put_array(&mut buf, name, kind, p.value.shape(), p.value.data());
            if let Some((m, v)) = &p.moments {
                put_array(&mut buf, &format!("adam.m/{name}"), KIND_MOMENT, p.value.shape(), m);
                put_array(&mut buf, &format!("adam.v/{name}"), KIND_MOMENT, p.value.shape(), v);
            }
        }
        let sum = checksum(&buf);
        buf.extend_from_slice(&sum.to_le_bytes());
        Ok(buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 20 || &buf[..4] != MAGIC {
            return Err(Error::Checkpoint("not an L2S1 checkpoint".into()));
        }
        let (body, tail) = buf.split_at(buf.len() - 8);
        if checksum(body) != u64::from_le_bytes(tail.try_into().unwrap()) {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = r.u32()?;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let count = r.u32()?;
        let mut params = ParameterStore::new(header.rng_seed);
        let mut moments: Vec<(String, bool, Vec<f64>)> = Vec::new();
        for _ in 0..count {
            let nlen = r.u32()?;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
            let kind = r.take(1)?[0];
            let rank = r.u32()?;
            let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            match kind {
                KIND_FROZEN | KIND_TRAINABLE => {
                    params.insert(name.clone(), Tensor::new(&shape, data)?)?;
                    params.get_mut(&name).unwrap().requires_grad = kind == KIND_TRAINABLE;
                }
                KIND_MOMENT => {
                    let (is_m, base) = if let Some(b) = name.strip_prefix("adam.m/") {
                        (true, b)
                    } else if let Some(b) = name.strip_prefix("adam.v/") {
                        (false, b)
                    } else {
                        return Err(Error::Checkpoint(format!("bad moment name {name}")));
                    };
                    moments.push((base.to_string(), is_m, data));
                }
                k => return Err(Error::Checkpoint(format!("unknown array kind {k}"))),
            }
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes before checksum".into()));
        }
        let mut pending: std::collections::BTreeMap<String, (Option<Vec<f64>>, Option<Vec<f64>>)> = Default::default();
        for (base, is_m, data) in moments {
            let e = pending.entry(base).or_default();
            if is_m {
                e.0 = Some(data);
            } else {
                e.1 = Some(data);
            }
        }
        for (base, (m, v)) in pending {
            let p = params.get_mut(&base).ok_or_else(|| Error::Checkpoint(format!("moments for unknown {base}")))?;
            match (m, v) {
                (Some(m), Some(v)) if m.len() == p.value.numel() && v.len() == m.len() => p.moments = Some((m, v)),
                _ => return Err(Error::Checkpoint(format!("incomplete moments for {base}"))),
            }
        }
        Ok(Checkpoint { header, params })
    }

    /// Write through a temporary file and rename, so an interrupted write never
    /// leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(d) = path.parent() {
            fs::create_dir_all(d)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Reject a checkpoint whose model architecture differs from `config`, unless forced.
    pub fn check_compatible(&self, config: &RunConfig, force: bool) -> Result<()> {
        let want = model_hash(&config.model);
        if self.header.model_hash != want && !force {
            return Err(Error::Checkpoint(format!(
                "checkpoint model {} differs from configured model {want} (use --force to load anyway)",
                self.header.model_hash
            )));
        }
        Ok(())
    }
}
