//! Run configuration: one TOML tree nesting every module's config.
//!
//! ```toml
//! run_id = "toy"
//! out_dir = "runs"
//! seed = 0
//!
//! [vae]
//! downsample_factor = 4
//!
//! [train]
//! max_steps = 3000
//! ```
//!
//! Every table is optional and falls back to its defaults; unknown keys are
//! errors. Module `seed` fields are derived from the top-level `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ToyCorpusConfig;
use crate::denoiser::{DenoiserConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{ClassifierConfig, ClassifierTrainConfig};
use crate::schedule::SamplerConfig;
use crate::summarizer::SummarizerConfig;
use crate::vae::{VaeConfig, VaeTrainConfig};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// `linear` or `cosine`.
    pub kind: String,
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { kind: "linear".into(), steps: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub vocab_size: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self { vocab_size: 2048 }
    }
}

/// Settings shared by the evaluation and experiment commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated images per FID or CAS evaluation.
    pub n_samples: usize,
    /// Images per sampling chunk.
    pub sample_chunk: usize,
    /// Summaries requested per report.
    pub summary_variants: usize,
    /// Guidance scales visited by the sweep.
    pub guidance_sweep: Vec<f64>,
    /// Variants run by `ablate` when `--variants` is not given.
    pub variants: Vec<String>,
    /// Training recipe of the FID feature extractor.
    pub extractor: ClassifierConfig,
    pub extractor_train: ClassifierTrainConfig,
    /// Training recipe of the CAS classifier.
    pub cas_classifier: ClassifierConfig,
    pub cas_train: ClassifierTrainConfig,
    /// Training steps of the unconditional model that `finetune` variants start from.
    pub pretrain_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            sample_chunk: 500,
            summary_variants: 5,
            guidance_sweep: vec![0.1, 0.5, 1.0, 1.5, 1.75, 2.0, 2.5, 3.0],
            variants: vec!["matched".into(), "shuffled".into()],
            extractor: ClassifierConfig { aux_classes: crate::data::SlideStyle::COUNT, ..Default::default() },
            extractor_train: ClassifierTrainConfig::scaled(12, 128, 0),
            cas_classifier: ClassifierConfig { num_classes: 2, ..Default::default() },
            cas_train: ClassifierTrainConfig::scaled(12, 128, 0),
            pretrain_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub corpus: ToyCorpusConfig,
    pub tokenizer: TokenizerConfig,
    pub summarizer: SummarizerConfig,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            run_id: "default".into(),
            out_dir: PathBuf::from("runs"),
            seed: 0,
            corpus: ToyCorpusConfig::default(),
            tokenizer: TokenizerConfig::default(),
            summarizer: SummarizerConfig::default(),
            vae: VaeConfig::default(),
            vae_train: VaeTrainConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        };
        cfg.propagate_seed();
        cfg
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets the top-level seed and every module seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.propagate_seed();
    }

    fn propagate_seed(&mut self) {
        let s = self.seed;
        self.corpus.seed = s;
        self.vae_train.seed = s.wrapping_add(1);
        self.train.seed = s.wrapping_add(2);
        self.sampler.seed = s.wrapping_add(3);
        self.eval.extractor_train.seed = s.wrapping_add(4);
        self.eval.cas_train.seed = s.wrapping_add(5);
    }

    /// Applies `key.path=value`, where `value` is a TOML literal; bare words
    /// are taken as strings.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut tree = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let parts: Vec<&str> = key.split('.').collect();
        let (last, parents) = parts.split_last().expect("split yields at least one part");
        if *last == "seed" && !parents.is_empty() {
            return Err(Error::Config(format!("{key} is derived from the top-level seed; set `seed` instead")));
        }
        let mut node = &mut tree;
        for (i, part) in parents.iter().enumerate() {
            node = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{}` is not a table", parts[..i].join("."))))?
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        node.as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a table", parents.join("."))))?
            .insert(last.to_string(), value);
        let mut next: RunConfig = tree.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        next.propagate_seed();
        next.validate()?;
        *self = next;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(Error::Config(format!("run_id `{}` must be a plain name", self.run_id)));
        }
        self.vae.validate().map_err(|e| Error::Config(format!("vae: {e}")))?;
        self.denoiser.validate()?;
        self.train.validate()?;
        let (h, w, c) = self.vae.latent_shape();
        if self.vae.image_size != self.corpus.image_size {
            return Err(Error::Config(format!(
                "vae.image_size {} differs from corpus.image_size {}",
                self.vae.image_size, self.corpus.image_size
            )));
        }
        if self.denoiser.latent_shape() != (h, w, c) {
            return Err(Error::Config(format!(
                "denoiser latent {:?} does not match vae latent {:?}",
                self.denoiser.latent_shape(),
                (h, w, c)
            )));
        }
        if self.eval.n_samples == 0 || self.eval.sample_chunk == 0 || self.eval.summary_variants == 0 {
            return Err(Error::Config("eval counts must be positive".into()));
        }
        Ok(())
    }

    /// `out_dir/run_id`.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    /// Writes the effective config next to a run's outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_toml_string()?)?;
        Ok(path)
    }

    /// The same run at another downsampling factor, with the paired latent
    /// channel count (f=4 with c=3, f=8 with c=4) and a U-Net depth the latent
    /// side supports.
    pub fn with_downsample(&self, factor: usize) -> Result<Self> {
        let mut cfg = self.clone();
        cfg.vae.downsample_factor = factor;
        cfg.vae.latent_channels = if factor == 8 { 4 } else { 3 };
        cfg.denoiser.latent_size = cfg.vae.image_size / factor;
        cfg.denoiser.latent_channels = cfg.vae.latent_channels;
        let depth = cfg.denoiser.depth;
        while cfg.denoiser.depth > 1 && cfg.denoiser.latent_size % (1 << (cfg.denoiser.depth - 1)) != 0 {
            cfg.denoiser.depth -= 1;
        }
        if cfg.denoiser.depth != depth {
            cfg.denoiser.channel_mult.truncate(cfg.denoiser.depth);
            let last = cfg.denoiser.depth - 1;
            cfg.denoiser.attention_stages = cfg.denoiser.attention_stages.iter().map(|&s| s.min(last)).collect();
            cfg.denoiser.attention_stages.dedup();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
