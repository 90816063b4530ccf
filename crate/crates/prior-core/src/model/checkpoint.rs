//! Checkpoint file format: a small JSON header (config, shape manifest, RNG
//! provenance, format version) followed by the concatenated parameter arrays
//! as little-endian f64, in manifest order. Round-trips are lossless to the
//! bit.

use super::config::ModelConfig;
use super::transformer::{ParamSpec, Parameters};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

const MAGIC: &[u8; 4] = b"PRCK";
pub const FORMAT_VERSION: u32 = 1;

/// A complete serialized model: parameters plus everything needed to
/// reproduce or resume them.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBundle {
    pub config: ModelConfig,
    pub params: Parameters,
    /// Generator state at save time (init leaves the post-init state here,
    /// training the post-training state).
    pub rng_state: [u64; 4],
    pub format_version: u32,
}

#[derive(Serialize, Deserialize)]
struct HeaderParam {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    head_dim: usize,
    rng_state: String,
    params: Vec<HeaderParam>,
}

impl CheckpointBundle {
    pub fn new(config: ModelConfig, params: Parameters, rng_state: [u64; 4]) -> Self {
        CheckpointBundle {
            config,
            params,
            rng_state,
            format_version: FORMAT_VERSION,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: self.format_version,
            config: self.config.clone(),
            head_dim: self.config.head_dim(),
            rng_state: rng_state_hex(&self.rng_state),
            params: self
                .params
                .specs()
                .iter()
                .map(|s| HeaderParam {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                })
                .collect(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let data = self.params.data();
        let mut out = Vec::with_capacity(4 + 4 + header_json.len() + data.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::invalid("not a checkpoint file (bad magic)"));
        }
        let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() < 8 + header_len {
            return Err(Error::invalid("truncated checkpoint header"));
        }
        let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint format_version {}",
                header.format_version
            )));
        }
        let body = &bytes[8 + header_len..];
        if body.len() % 8 != 0 {
            return Err(Error::invalid("checkpoint data not a whole number of f64s"));
        }
        let data: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut offset = 0usize;
        let specs: Vec<ParamSpec> = header
            .params
            .iter()
            .map(|p| {
                let len: usize = p.shape.iter().product();
                let spec = ParamSpec {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    offset,
                    len,
                };
                offset += len;
                spec
            })
            .collect();
        let params = Parameters::from_parts(specs, data)?;
        Ok(CheckpointBundle {
            config: header.config,
            params,
            rng_state: rng_state_from_hex(&header.rng_state)?,
            format_version: header.format_version,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized bytes; used to tie scored corpora to the
    /// exact reference model that produced them.
    pub fn hash_hex(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_bytes());
        hex_string(&hasher.finalize())
    }
}

fn rng_state_hex(s: &[u64; 4]) -> String {
    let mut out = String::with_capacity(64);
    for w in s {
        for b in w.to_le_bytes() {
            out.push_str(&format!("{b:02x}"));
        }
    }
    out
}

fn rng_state_from_hex(s: &str) -> Result<[u64; 4]> {
    if s.len() != 64 {
        return Err(Error::invalid("rng_state must be 64 hex chars"));
    }
    let mut words = [0u64; 4];
    for (i, word) in words.iter_mut().enumerate() {
        let mut bytes = [0u8; 8];
        for (j, byte) in bytes.iter_mut().enumerate() {
            let pos = i * 16 + j * 2;
            *byte = u8::from_str_radix(&s[pos..pos + 2], 16)
                .map_err(|_| Error::invalid("rng_state is not hex"))?;
        }
        *word = u64::from_le_bytes(bytes);
    }
    Ok(words)
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
