//! Binary checkpoint: `u32` LE header length, JSON header ending in a
//! newline, then every tensor as LE f64 in header order.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{init_params, SAT_PREFIX};
use super::PolicyConfig;
use crate::error::{Error, Result};
use crate::numerics::{Params, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    /// Hash of the training mixture configuration, empty if untrained.
    #[serde(default)]
    pub mixture_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in bytes.
    pub byte_offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: PolicyConfig,
    step: u64,
    seed: u64,
    #[serde(default)]
    mixture_hash: String,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: PolicyConfig,
    pub meta: CheckpointMeta,
    pub params: Params,
}

impl Checkpoint {
    pub fn has_sat_encoder(&self) -> bool {
        self.params.names().any(|n| n.starts_with(SAT_PREFIX))
    }

    /// Checks every tensor against the shapes `config` implies. The
    /// satellite encoder may be absent as a whole.
    pub fn ensure_config(&self, config: &PolicyConfig) -> Result<()> {
        config
            .validate()
            .map_err(|e| Error::checkpoint("config", e.to_string()))?;
        let expected = init_params(config, 0)?;
        for (name, t) in expected.iter() {
            match self.params.get(name) {
                Some(have) if have.shape() == t.shape() => {}
                Some(have) => {
                    return Err(Error::checkpoint(
                        format!("tensor {name}"),
                        format!("shape {:?}, config expects {:?}", have.shape(), t.shape()),
                    ))
                }
                None if name.starts_with(SAT_PREFIX) && !self.has_sat_encoder() => {}
                None => return Err(Error::checkpoint(format!("tensor {name}"), "missing")),
            }
        }
        if let Some(extra) = self.params.names().find(|n| !expected.contains(n)) {
            return Err(Error::checkpoint(
                format!("tensor {extra}"),
                "not part of the policy",
            ));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_tensors(&self.config, &self.meta, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, meta, params) = decode_tensors(bytes)?;
        let ck = Checkpoint {
            config,
            meta,
            params,
        };
        ck.ensure_config(&ck.config.clone())?;
        Ok(ck)
    }
}

/// Writes the binary layout for any named tensor set.
pub(crate) fn encode_tensors(
    config: &PolicyConfig,
    meta: &CheckpointMeta,
    params: &Params,
) -> Result<Vec<u8>> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            byte_offset: offset,
        });
        offset += 8 * t.len() as u64;
    }
    let header = Header {
        config: config.clone(),
        step: meta.step,
        seed: meta.seed,
        mixture_hash: meta.mixture_hash.clone(),
        tensors,
    };
    let mut json = serde_json::to_vec(&header)?;
    json.push(b'\n');
    let len =
        u32::try_from(json.len()).map_err(|_| Error::checkpoint("header", "longer than 4 GiB"))?;
    let mut out = Vec::with_capacity(4 + json.len() + offset as usize);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses the binary layout without checking tensors against the config.
pub(crate) fn decode_tensors(bytes: &[u8]) -> Result<(PolicyConfig, CheckpointMeta, Params)> {
    let Some(prefix) = bytes.get(..4) else {
        return Err(Error::checkpoint(
            "header_length",
            "file shorter than 4 bytes",
        ));
    };
    let hl = u32::from_le_bytes(prefix.try_into().unwrap()) as usize;
    let Some(raw) = bytes.get(4..4 + hl) else {
        return Err(Error::checkpoint(
            "header_length",
            format!("{hl} exceeds file size {}", bytes.len()),
        ));
    };
    if raw.last() != Some(&b'\n') {
        return Err(Error::checkpoint("header", "not terminated by a newline"));
    }
    let header: Header = serde_json::from_slice(&raw[..hl - 1])
        .map_err(|e| Error::checkpoint("header", e.to_string()))?;
    let payload = &bytes[4 + hl..];
    let mut params = Params::new();
    let mut seen = BTreeSet::new();
    let mut offset = 0u64;
    for (i, e) in header.tensors.iter().enumerate() {
        if !seen.insert(e.name.clone()) {
            return Err(Error::checkpoint(
                format!("tensors[{i}].name"),
                format!("duplicate `{}`", e.name),
            ));
        }
        if e.byte_offset != offset {
            return Err(Error::checkpoint(
                format!("tensors[{i}].byte_offset"),
                format!("{} for `{}`, expected {offset}", e.byte_offset, e.name),
            ));
        }
        let n: usize = e.shape.iter().product();
        if e.shape.is_empty() || n == 0 {
            return Err(Error::checkpoint(
                format!("tensors[{i}].shape"),
                format!("{:?}", e.shape),
            ));
        }
        let start = offset as usize;
        let end = start + 8 * n;
        let Some(chunk) = payload.get(start..end) else {
            return Err(Error::checkpoint(
                "payload",
                format!(
                    "truncated: {} bytes, tensor `{}` ends at {end}",
                    payload.len(),
                    e.name
                ),
            ));
        };
        let data: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::checkpoint(
                "payload",
                format!("non-finite value in `{}`", e.name),
            ));
        }
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        offset = end as u64;
    }
    if payload.len() as u64 != offset {
        return Err(Error::checkpoint(
            "payload",
            format!("{} bytes, header describes {offset}", payload.len()),
        ));
    }
    let meta = CheckpointMeta {
        step: header.step,
        seed: header.seed,
        mixture_hash: header.mixture_hash,
    };
    Ok((header.config, meta, params))
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ck.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
