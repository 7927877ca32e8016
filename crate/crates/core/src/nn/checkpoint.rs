//! Self-describing checkpoint container.
//!
//! A checkpoint is a single safetensors file. The header metadata carries a
//! `format` tag, a `kind` (`vae`, `denoiser`, `text-encoder`, `classifier`,
//! ...), the JSON-encoded model config under `config`, and any extra string
//! fields (step counter, RNG state). Tensor names are the parameter names of
//! the model's [`ParamStore`](super::ParamStore).

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{de::DeserializeOwned, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "histodiff-checkpoint-v1";

pub struct Checkpoint {
    pub kind: String,
    pub metadata: HashMap<String, String>,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: &impl Serialize) -> Result<Self> {
        let mut metadata = HashMap::new();
        metadata.insert("config".to_string(), serde_json::to_string(config)?);
        Ok(Self { kind: kind.to_string(), metadata, tensors: HashMap::new() })
    }

    pub fn with_tensors(mut self, prefix: &str, tensors: Vec<(String, Tensor)>) -> Self {
        for (name, t) in tensors {
            self.tensors.insert(format!("{prefix}{name}"), t);
        }
        self
    }

    /// Tensors under `prefix`, with the prefix stripped.
    pub fn scoped(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
            .collect()
    }

    pub fn config<T: DeserializeOwned>(&self) -> Result<T> {
        let raw = self
            .metadata
            .get("config")
            .ok_or_else(|| Error::Config("checkpoint without config".into()))?;
        Ok(serde_json::from_str(raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let mut metadata = self.metadata.clone();
        metadata.insert("format".to_string(), FORMAT_TAG.to_string());
        metadata.insert("kind".to_string(), self.kind.clone());
        let mut entries: Vec<(&String, Tensor)> = self
            .tensors
            .iter()
            .map(|(k, v)| v.contiguous().map(|v| (k, v)))
            .collect::<candle_core::Result<_>>()?;
        entries.sort_by(|a, b| a.0.cmp(b.0));
        safetensors::serialize_to_file(entries, Some(metadata), path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint { path: path.to_path_buf(), reason };
        let bytes = std::fs::read(path)?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(e.to_string()))?;
        let mut metadata = header.metadata().clone().unwrap_or_default();
        if metadata.remove("format").as_deref() != Some(FORMAT_TAG) {
            return Err(bad("missing or unknown format tag".into()));
        }
        let kind = metadata.remove("kind").ok_or_else(|| bad("missing kind".into()))?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        Ok(Self { kind, metadata, tensors })
    }

    pub fn expect_kind(self, kind: &str, path: &Path) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("expected a {kind} checkpoint, found {}", self.kind),
            });
        }
        Ok(self)
    }
}
