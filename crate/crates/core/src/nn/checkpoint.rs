//! Named-tensor checkpoints: `CTCKPT01`, a little-endian u64 header length,
//! a JSON header, then the float32 payloads in header order.

use super::optim::{AdamW, AdamWConfig};
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CTCKPT01";
const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    dtype: String,
    step: u64,
    config_hash: String,
    config: serde_json::Value,
    #[serde(default)]
    decay: Vec<bool>,
    #[serde(default)]
    optimizer: Option<AdamWConfig>,
}

/// Hex sha256 of the canonical JSON form of `config`.
pub fn config_hash(config: &serde_json::Value) -> String {
    let text = serde_json::to_string(config).expect("json value serializes");
    hex(&Sha256::digest(text.as_bytes()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: serde_json::Value,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamW<f32>>,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, params: ParamStore<f32>, optimizer: Option<AdamW<f32>>) -> Self {
        Self {
            step: optimizer.as_ref().map_or(0, |o| o.step),
            config,
            params,
            optimizer,
        }
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.config)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut payload: Vec<&[f32]> = Vec::new();
        for (name, t) in self.params.iter() {
            names.push(name.to_string());
            shapes.push(t.shape.clone());
            payload.push(&t.data);
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [(OPT_M, opt.first_moments()), (OPT_V, opt.second_moments())] {
                for (i, m) in moments.iter().enumerate() {
                    names.push(format!("{prefix}{}", self.params.name(i)));
                    shapes.push(self.params.tensor(i).shape.clone());
                    payload.push(m);
                }
            }
        }
        let header = Header {
            names,
            shapes,
            dtype: "f32".into(),
            step: self.step,
            config_hash: self.config_hash(),
            config: self.config.clone(),
            decay: (0..self.params.len()).map(|i| self.params.decays(i)).collect(),
            optimizer: self.optimizer.as_ref().map(|o| o.config),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let n: usize = payload.iter().map(|p| p.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in payload {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing CTCKPT01 magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.dtype != "f32" {
            return Err(bad(&format!("unsupported dtype {}", header.dtype)));
        }
        if header.names.len() != header.shapes.len() {
            return Err(bad("names and shapes differ in length"));
        }
        if config_hash(&header.config) != header.config_hash {
            return Err(bad("config hash does not match embedded config"));
        }
        let mut off = 16 + hlen;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (idx, (name, shape)) in header.names.iter().zip(&header.shapes).enumerate() {
            let n: usize = shape.iter().product();
            let raw = bytes.get(off..off + 4 * n).ok_or_else(|| bad("truncated payload"))?;
            off += 4 * n;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if name.starts_with(OPT_M) {
                m.push(data);
            } else if name.starts_with(OPT_V) {
                v.push(data);
            } else {
                let decay = header.decay.get(idx).copied().unwrap_or(shape.len() > 1);
                params.insert(name.clone(), Tensor::new(shape.clone(), data), decay);
            }
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        let optimizer = match header.optimizer {
            Some(cfg) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(bad("optimizer moments do not cover every parameter"));
                }
                Some(AdamW::from_state(cfg, header.step, m, v)?)
            }
            None => None,
        };
        Ok(Self {
            step: header.step,
            config: header.config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
