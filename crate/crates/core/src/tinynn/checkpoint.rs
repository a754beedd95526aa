//! Binary checkpoint format.
//!
//! ```text
//! "BPCK" | version: u32 | descriptor_len: u32 | descriptor (UTF-8 JSON)
//! then, until end of file, one record per array:
//! name_len: u32 | name (UTF-8) | rank: u32 | dims: rank x u32 | data: f32 x prod(dims)
//! ```
//! All integers and floats are little-endian. Optimiser arrays carry an
//! `opt.` name prefix.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::ModelConfig;
use super::network::{Network, Param};
use super::optim::{Optimizer, OptimizerKind};

pub const MAGIC: &[u8; 4] = b"BPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Descriptor {
    config: ModelConfig,
    epoch: usize,
    rng_seed: u64,
    optimizer: Option<OptimizerKind>,
    optimizer_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Trainable parameters and batch-norm buffers, in network order.
    pub parameters: Vec<NamedArray>,
    pub optimizer: Option<OptimizerKind>,
    pub optimizer_step: u64,
    pub optimizer_state: Vec<NamedArray>,
    pub epoch: usize,
    pub rng_seed: u64,
}

impl Checkpoint {
    pub fn from_network(net: &Network<f32>, optimizer: Option<&Optimizer<f32>>, epoch: usize, rng_seed: u64) -> Self {
        let parameters = net
            .store()
            .params
            .iter()
            .map(|p| NamedArray { name: p.name.clone(), shape: p.shape.clone(), data: p.value.clone() })
            .collect();
        let optimizer_state = optimizer
            .map(|o| {
                o.named_arrays(net.store())
                    .into_iter()
                    .map(|(name, shape, data)| NamedArray { name, shape, data })
                    .collect()
            })
            .unwrap_or_default();
        Self {
            config: net.config().clone(),
            parameters,
            optimizer: optimizer.map(|o| o.kind),
            optimizer_step: optimizer.map_or(0, |o| o.step),
            optimizer_state,
            epoch,
            rng_seed,
        }
    }

    /// Rebuild the network; every parameter must be present exactly once
    /// with its declared shape.
    pub fn to_network(&self) -> Result<Network<f32>> {
        let mut net = Network::<f32>::new(&self.config, self.rng_seed)?;
        let expected = net.store().params.len();
        if self.parameters.len() != expected {
            return Err(Error::Checkpoint(format!(
                "expected {expected} parameter arrays, found {}",
                self.parameters.len()
            )));
        }
        for Param { name, shape, value, .. } in net.store_mut().params.iter_mut() {
            let mut matches = self.parameters.iter().filter(|a| &a.name == name);
            let array = matches
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
            if matches.next().is_some() {
                return Err(Error::Checkpoint(format!("duplicate parameter '{name}'")));
            }
            if &array.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, expected {shape:?}",
                    array.shape
                )));
            }
            value.copy_from_slice(&array.data);
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let descriptor = Descriptor {
            config: self.config.clone(),
            epoch: self.epoch,
            rng_seed: self.rng_seed,
            optimizer: self.optimizer,
            optimizer_step: self.optimizer_step,
        };
        let json = serde_json::to_vec(&descriptor).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(&json);
        for a in self.parameters.iter().chain(&self.optimizer_state) {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Checkpoint(format!("array '{}' data does not match its shape", a.name)));
            }
            put_u32(&mut out, a.name.len())?;
            out.extend_from_slice(a.name.as_bytes());
            put_u32(&mut out, a.shape.len())?;
            for d in &a.shape {
                put_u32(&mut out, *d)?;
            }
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let len = r.u32()? as usize;
        let descriptor: Descriptor =
            serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("descriptor: {e}")))?;
        let mut parameters = Vec::new();
        let mut optimizer_state = Vec::new();
        while r.pos < bytes.len() {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let array = NamedArray { name, shape, data };
            if array.name.starts_with("opt.") {
                optimizer_state.push(array);
            } else {
                parameters.push(array);
            }
        }
        Ok(Self {
            config: descriptor.config,
            parameters,
            optimizer: descriptor.optimizer,
            optimizer_step: descriptor.optimizer_step,
            optimizer_state,
            epoch: descriptor.epoch,
            rng_seed: descriptor.rng_seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
