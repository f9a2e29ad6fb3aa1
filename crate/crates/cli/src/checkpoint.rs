//! Binary checkpoints: `DNCE`, a `u32` version, a `u64` manifest length, a
//! JSON manifest, then every tensor as little-endian `f32` in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dance_core::autodiff::Tensor;
use dance_core::model::ModelParams;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: [u8; 4] = *b"DNCE";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tensors: Vec<TensorEntry>,
    pub config: RunConfig,
}

/// Trained parameters with the configuration that produced them. Values are
/// stored as `f32`, so a loaded checkpoint saves back to identical bytes.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ModelParams,
}

impl Checkpoint {
    /// `params` must have been built from `config.model`.
    pub fn new(config: RunConfig, params: ModelParams) -> Result<Self> {
        if params.config() != &config.model {
            return Err(CliError::Config(
                "model section does not match the parameter layout".into(),
            ));
        }
        Ok(Self { config, params })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut offset = 0u64;
        for (name, t) in self.params.named() {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += 4 * t.numel() as u64;
        }
        let manifest = serde_json::to_vec(&Manifest {
            tensors,
            config: self.config.clone(),
        })
        .expect("manifest serializes");

        let mut out = Vec::with_capacity(PREAMBLE + manifest.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in self.params.tensors() {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| CliError::format(path, m);
        if bytes.len() < PREAMBLE || bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (missing DNCE magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let manifest_end = usize::try_from(len)
            .ok()
            .and_then(|l| PREAMBLE.checked_add(l))
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad(format!("manifest length {len} exceeds the file")))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[PREAMBLE..manifest_end])
            .map_err(|e| bad(format!("bad manifest: {e}")))?;
        manifest
            .config
            .validate()
            .map_err(|e| bad(format!("manifest {e}")))?;

        let payload = &bytes[manifest_end..];
        let mut expected = 0u64;
        let mut named = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            if entry.offset != expected {
                return Err(bad(format!(
                    "tensor `{}` starts at byte {} but {} was expected",
                    entry.name, entry.offset, expected
                )));
            }
            let count = entry
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| bad(format!("tensor `{}` is too large", entry.name)))?;
            let start = expected as usize;
            let end = count
                .checked_mul(4)
                .and_then(|n| start.checked_add(n))
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| bad(format!("payload too short for tensor `{}`", entry.name)))?;
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect();
            let t = Tensor::new(entry.shape.clone(), data).map_err(|e| bad(e.to_string()))?;
            named.push((entry.name.clone(), t));
            expected = end as u64;
        }
        if expected != payload.len() as u64 {
            return Err(bad(format!(
                "payload holds {} bytes but the manifest describes {expected}",
                payload.len()
            )));
        }
        let params = ModelParams::from_named(&manifest.config.model, named)
            .map_err(|e| bad(e.to_string()))?;
        Ok(Self {
            config: manifest.config,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
