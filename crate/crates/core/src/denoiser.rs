//! Latent U-Net noise predictor with cross-attention conditioning, and its
//! epsilon-prediction training loop with condition dropout.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ClassEmbedder, TextContext, TextEncoder, TextEncoderConfig, TokenSequence, NULL_CLASS};
use crate::error::{Error, Result};
use crate::nn::{
    attention, randn_tensor, scalar_mean, upsample_nearest2x, Adam, AdamConfig, Checkpoint, Conv2d, GroupNorm,
    KeyMask, LayerNorm, Linear, LrSchedule, ParamStore,
};
use crate::schedule::{cfg_combine, q_sample_batch, NoisePredictor, NoiseSchedule};
use crate::summarizer::{select_variant, SummaryPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditioningKind {
    Class,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub base_width: usize,
    /// Number of resolution stages.
    pub depth: usize,
    /// Width multiplier per stage; length `depth`.
    pub channel_mult: Vec<usize>,
    /// Stages with self- and cross-attention blocks.
    pub attention_stages: Vec<usize>,
    pub context_dim: usize,
    pub time_embed_dim: usize,
    pub heads: usize,
    pub groups: usize,
    pub num_timesteps: usize,
    pub conditioning: ConditioningKind,
    /// Used when `conditioning` is `text`; `d_model` must equal `context_dim`.
    pub text_encoder: TextEncoderConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 3,
            latent_size: 8,
            base_width: 32,
            depth: 3,
            channel_mult: vec![1, 2, 2],
            attention_stages: vec![2],
            context_dim: 128,
            time_embed_dim: 128,
            heads: 4,
            groups: 8,
            num_timesteps: 1000,
            conditioning: ConditioningKind::Class,
            text_encoder: TextEncoderConfig::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.channel_mult.len() != self.depth {
            return bad(format!("channel_mult {:?} must have depth {} entries", self.channel_mult, self.depth));
        }
        if let Some(s) = self.attention_stages.iter().find(|&&s| s >= self.depth) {
            return bad(format!("attention stage {s} outside 0..{}", self.depth));
        }
        if self.latent_size % (1 << (self.depth - 1)) != 0 {
            return bad(format!("latent size {} not divisible by 2^{}", self.latent_size, self.depth - 1));
        }
        if self.base_width == 0 || self.latent_channels == 0 || self.heads == 0 || self.time_embed_dim % 2 != 0 {
            return bad("widths, channels and heads must be positive, time_embed_dim even".into());
        }
        for m in &self.channel_mult {
            if (self.base_width * m) % self.heads != 0 {
                return bad(format!("width {} not divisible by {} heads", self.base_width * m, self.heads));
            }
        }
        if self.conditioning == ConditioningKind::Text && self.text_encoder.d_model != self.context_dim {
            return bad(format!(
                "text encoder width {} differs from context_dim {}",
                self.text_encoder.d_model, self.context_dim
            ));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        (self.latent_size, self.latent_size, self.latent_channels)
    }

    fn width(&self, stage: usize) -> usize {
        self.base_width * self.channel_mult[stage]
    }

    fn groups_for(&self, channels: usize) -> usize {
        (1..=self.groups.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
    }
}

/// Conditioning passed to the denoiser.
#[derive(Debug, Clone)]
pub enum Condition {
    /// Class ids `0..4`; [`NULL_CLASS`] selects the reserved null row.
    Class(Vec<u32>),
    /// Prompts encoded by the model's own text encoder.
    Tokens(Vec<TokenSequence>),
    /// Pre-encoded prompts.
    Text(TextContext),
    /// The unconditional branch for a batch of this size.
    Null(usize),
}

impl Condition {
    pub fn batch(&self) -> usize {
        match self {
            Condition::Class(ids) => ids.len(),
            Condition::Tokens(t) => t.len(),
            Condition::Text(ctx) => ctx.batch(),
            Condition::Null(n) => *n,
        }
    }
}

/// Cross-attention keys, `(B, L, context_dim)`, with optional padding mask.
struct Context {
    hidden: Tensor,
    mask: Option<KeyMask>,
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &DenoiserConfig, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), cfg.groups_for(cin), cin)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), cin, cout, 3, 1)?,
            time: Linear::new(store, &format!("{name}.time"), cfg.time_embed_dim, cout)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), cfg.groups_for(cout), cout)?,
            conv2: Conv2d::zero_init(store, &format!("{name}.conv2"), cout, cout, 3)?,
            skip: if cin != cout { Some(Conv2d::new(store, &format!("{name}.skip"), cin, cout, 1, 1)?) } else { None },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let (b, _, _, _) = x.dims4()?;
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time.forward(&temb.silu()?)?;
        let h = h.broadcast_add(&t.reshape((b, 1, 1, t.dim(1)?))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

struct AttnBlock {
    norm: GroupNorm,
    proj_in: Linear,
    norm1: LayerNorm,
    qkv: Linear,
    self_out: Linear,
    norm2: LayerNorm,
    q: Linear,
    kv: Linear,
    cross_out: Linear,
    norm3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    proj_out: Linear,
    heads: usize,
}

impl AttnBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &DenoiserConfig, c: usize) -> Result<Self> {
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            norm: GroupNorm::new(store, &n("norm"), cfg.groups_for(c), c)?,
            proj_in: Linear::new(store, &n("proj_in"), c, c)?,
            norm1: LayerNorm::new(store, &n("norm1"), c)?,
            qkv: Linear::no_bias(store, &n("qkv"), c, 3 * c)?,
            self_out: Linear::new(store, &n("self_out"), c, c)?,
            norm2: LayerNorm::new(store, &n("norm2"), c)?,
            q: Linear::no_bias(store, &n("q"), c, c)?,
            kv: Linear::no_bias(store, &n("kv"), cfg.context_dim, 2 * c)?,
            cross_out: Linear::new(store, &n("cross_out"), c, c)?,
            norm3: LayerNorm::new(store, &n("norm3"), c)?,
            ff1: Linear::new(store, &n("ff1"), c, 4 * c)?,
            ff2: Linear::new(store, &n("ff2"), 4 * c, c)?,
            proj_out: Linear::zero_init(store, &n("proj_out"), c, c)?,
            heads: cfg.heads,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Context) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let mut t = self.proj_in.forward(&self.norm.forward(x)?.reshape((b, h * w, c))?)?;
        let qkv = self.qkv.forward(&self.norm1.forward(&t)?)?;
        let (q, k, v) = (qkv.narrow(2, 0, c)?, qkv.narrow(2, c, c)?, qkv.narrow(2, 2 * c, c)?);
        t = (&t + self.self_out.forward(&attention(&q, &k, &v, self.heads, false, None)?)?)?;
        let q = self.q.forward(&self.norm2.forward(&t)?)?;
        let kv = self.kv.forward(&ctx.hidden)?;
        let (k, v) = (kv.narrow(2, 0, c)?, kv.narrow(2, c, c)?);
        t = (&t + self.cross_out.forward(&attention(&q, &k, &v, self.heads, false, ctx.mask.as_ref())?)?)?;
        let f = self.ff2.forward(&self.ff1.forward(&self.norm3.forward(&t)?)?.gelu_erf()?)?;
        t = (t + f)?;
        Ok((x + self.proj_out.forward(&t)?.reshape((b, h, w, c))?)?)
    }
}

struct Stage {
    blocks: Vec<(ResBlock, Option<AttnBlock>)>,
    resample: Option<Conv2d>,
}

pub struct Denoiser {
    config: DenoiserConfig,
    store: ParamStore,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<Stage>,
    mid: (ResBlock, AttnBlock, ResBlock),
    up: Vec<Stage>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    class_embedder: Option<ClassEmbedder>,
    text_encoder: Option<TextEncoder>,
    init: String,
}

/// Sinusoidal timestep features, `(B, dim)`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((step as f64 * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            v.push((step as f64 * freq).sin());
        }
    }
    Ok(Tensor::from_vec(v, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: DenoiserConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let s = &mut store;
        let te = config.time_embed_dim;
        let time1 = Linear::new(s, "time1", te, te)?;
        let time2 = Linear::new(s, "time2", te, te)?;
        let w0 = config.width(0);
        let conv_in = Conv2d::new(s, "conv_in", config.latent_channels, w0, 3, 1)?;
        let attn_at = |i: usize| config.attention_stages.contains(&i);
        let mut skips = vec![w0];
        let mut prev = w0;
        let mut down = Vec::new();
        for i in 0..config.depth {
            let w = config.width(i);
            let res = ResBlock::new(s, &format!("down{i}.res"), &config, prev, w)?;
            let attn = if attn_at(i) { Some(AttnBlock::new(s, &format!("down{i}.attn"), &config, w)?) } else { None };
            skips.push(w);
            prev = w;
            let resample = if i + 1 < config.depth {
                skips.push(w);
                Some(Conv2d::new(s, &format!("down{i}.downsample"), w, w, 3, 2)?)
            } else {
                None
            };
            down.push(Stage { blocks: vec![(res, attn)], resample });
        }
        let mid = (
            ResBlock::new(s, "mid.res1", &config, prev, prev)?,
            AttnBlock::new(s, "mid.attn", &config, prev)?,
            ResBlock::new(s, "mid.res2", &config, prev, prev)?,
        );
        let mut up = Vec::new();
        for i in (0..config.depth).rev() {
            let w = config.width(i);
            let mut blocks = Vec::new();
            for j in 0..2 {
                let skip = skips.pop().expect("skip stack is balanced");
                let res = ResBlock::new(s, &format!("up{i}.res{j}"), &config, prev + skip, w)?;
                let attn = if attn_at(i) { Some(AttnBlock::new(s, &format!("up{i}.attn{j}"), &config, w)?) } else { None };
                blocks.push((res, attn));
                prev = w;
            }
            let resample = if i > 0 { Some(Conv2d::new(s, &format!("up{i}.upsample"), w, w, 3, 1)?) } else { None };
            up.push(Stage { blocks, resample });
        }
        let norm_out = GroupNorm::new(s, "norm_out", config.groups_for(w0), w0)?;
        let conv_out = Conv2d::zero_init(s, "conv_out", w0, config.latent_channels, 3)?;
        let (class_embedder, text_encoder) = match config.conditioning {
            ConditioningKind::Class => (Some(ClassEmbedder::new(s, "class_embedder", config.context_dim)?), None),
            ConditioningKind::Text => {
                let enc_seed = seed.wrapping_add(0x7e47);
                (None, Some(TextEncoder::new(config.text_encoder.clone(), enc_seed, dtype)?))
            }
        };
        Ok(Self {
            config,
            store,
            time1,
            time2,
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
            class_embedder,
            text_encoder,
            init: format!("scratch(seed={seed})"),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// U-Net and class-embedder parameters; the text encoder has its own store.
    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn text_encoder(&self) -> Option<&TextEncoder> {
        self.text_encoder.as_ref()
    }

    /// How the weights were initialised (`scratch(seed=..)` or a checkpoint path).
    pub fn init_provenance(&self) -> &str {
        &self.init
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters() + self.text_encoder.as_ref().map_or(0, |e| e.params().num_parameters())
    }

    fn text_frozen(&self) -> bool {
        self.config.text_encoder.frozen
    }

    /// Trainable variables: the U-Net, plus the text encoder unless frozen.
    fn trainable(&self) -> Vec<candle_core::Var> {
        let mut vars = self.store.vars();
        if let (Some(enc), false) = (&self.text_encoder, self.text_frozen()) {
            vars.extend(enc.params().vars());
        }
        vars
    }

    /// Encodes prompts with the model's text encoder.
    pub fn encode_prompts(&self, prompts: &[TokenSequence]) -> Result<TextContext> {
        let enc = self
            .text_encoder
            .as_ref()
            .ok_or_else(|| Error::invalid("class-conditioned denoiser has no text encoder"))?;
        let mut ctx = enc.encode_batch(prompts)?;
        if self.text_frozen() {
            ctx = ctx.detach();
        }
        Ok(ctx)
    }

    fn null_text(&self, batch: usize) -> Result<Context> {
        let dtype = self.store.dtype();
        Ok(Context {
            hidden: Tensor::zeros((batch, 1, self.config.context_dim), dtype, &Device::Cpu)?,
            mask: Some(KeyMask(Tensor::zeros((batch, 1), dtype, &Device::Cpu)?)),
        })
    }

    fn resolve(&self, cond: &Condition) -> Result<Context> {
        let dtype = self.store.dtype();
        match (self.config.conditioning, cond) {
            (ConditioningKind::Class, Condition::Class(ids)) => {
                if let Some(bad) = ids.iter().find(|&&i| i > NULL_CLASS) {
                    return Err(Error::invalid(format!("class id {bad} outside 0..={NULL_CLASS}")));
                }
                let emb = self.class_embedder.as_ref().expect("class model has an embedder");
                Ok(Context { hidden: emb.context(ids)?, mask: None })
            }
            (ConditioningKind::Class, Condition::Null(n)) => self.resolve(&Condition::Class(vec![NULL_CLASS; *n])),
            (ConditioningKind::Text, Condition::Null(n)) => self.null_text(*n),
            (ConditioningKind::Text, Condition::Tokens(prompts)) => {
                let ctx = self.encode_prompts(prompts)?;
                Ok(Context { hidden: ctx.hidden, mask: Some(ctx.mask) })
            }
            (ConditioningKind::Text, Condition::Text(ctx)) => {
                let (_, _, d) = ctx.hidden.dims3()?;
                if d != self.config.context_dim {
                    return Err(Error::shape(self.config.context_dim, d));
                }
                Ok(Context { hidden: ctx.hidden.to_dtype(dtype)?, mask: Some(KeyMask(ctx.mask.0.to_dtype(dtype)?)) })
            }
            (kind, other) => Err(Error::invalid(format!("{kind:?} denoiser cannot use condition {}", variant_name(other)))),
        }
    }

    fn check_input(&self, x: &Tensor, t: &[usize]) -> Result<usize> {
        let (h, w, c) = self.config.latent_shape();
        let b = match x.dims() {
            [b, xh, xw, xc] if (*xh, *xw, *xc) == (h, w, c) => *b,
            other => return Err(Error::shape(format!("(B, {h}, {w}, {c})"), other)),
        };
        if t.len() != 1 && t.len() != b {
            return Err(Error::shape(b, t.len()));
        }
        if let Some(bad) = t.iter().find(|&&s| s == 0 || s > self.config.num_timesteps) {
            return Err(Error::invalid(format!("timestep {bad} outside [1, {}]", self.config.num_timesteps)));
        }
        Ok(b)
    }

    fn forward(&self, x: &Tensor, t: &[usize], ctx: &Context) -> Result<Tensor> {
        let b = self.check_input(x, t)?;
        if ctx.hidden.dim(0)? != b {
            return Err(Error::shape(b, ctx.hidden.dim(0)?));
        }
        let steps: Vec<usize> = if t.len() == 1 { vec![t[0]; b] } else { t.to_vec() };
        let temb = timestep_embedding(&steps, self.config.time_embed_dim, self.store.dtype())?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;
        let x = x.to_dtype(self.store.dtype())?;
        let mut h = self.conv_in.forward(&x)?;
        let mut skips = vec![h.clone()];
        for stage in &self.down {
            for (res, attn) in &stage.blocks {
                h = res.forward(&h, &temb)?;
                if let Some(a) = attn {
                    h = a.forward(&h, ctx)?;
                }
                skips.push(h.clone());
            }
            if let Some(down) = &stage.resample {
                h = down.forward(&h)?;
                skips.push(h.clone());
            }
        }
        h = self.mid.0.forward(&h, &temb)?;
        h = self.mid.1.forward(&h, ctx)?;
        h = self.mid.2.forward(&h, &temb)?;
        for stage in &self.up {
            for (res, attn) in &stage.blocks {
                let skip = skips.pop().expect("skip stack is balanced");
                h = res.forward(&Tensor::cat(&[&h, &skip], 3)?, &temb)?;
                if let Some(a) = attn {
                    h = a.forward(&h, ctx)?;
                }
            }
            if let Some(up) = &stage.resample {
                h = up.forward(&upsample_nearest2x(&h)?)?;
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }

    /// Loads every tensor of a denoiser checkpoint that this model also has.
    /// Tensors the checkpoint lacks keep their current values; shape
    /// differences are errors.
    pub fn load_weights(&mut self, path: &Path) -> Result<usize> {
        let ck = Checkpoint::load(path)?.expect_kind("denoiser", path)?;
        let mut loaded = self.store.assign_present(&ck.scoped("unet."))?;
        if let Some(enc) = &self.text_encoder {
            let text = ck.scoped("text.");
            if !text.is_empty() {
                enc.assign(&text)?;
                loaded += text.len();
            }
        }
        if loaded == 0 {
            return Err(Error::Checkpoint { path: path.to_path_buf(), reason: "no compatible tensors".into() });
        }
        self.init = format!("checkpoint({})", path.display());
        Ok(loaded)
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("denoiser", &self.config)?.with_tensors("unet.", self.store.tensors());
        if let Some(enc) = &self.text_encoder {
            ck = ck.with_tensors("text.", enc.checkpoint_tensors());
        }
        ck.metadata.insert("init".into(), self.init.clone());
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?.expect_kind("denoiser", path)?;
        let config: DenoiserConfig = ck.config()?;
        let dtype = ck.tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        let mut model = Self::with_dtype(config, 0, dtype)?;
        model.store.assign(&ck.scoped("unet."))?;
        if let Some(enc) = &model.text_encoder {
            enc.assign(&ck.scoped("text."))?;
        }
        model.init = ck.metadata.get("init").cloned().unwrap_or_default();
        Ok(model)
    }
}

fn variant_name(c: &Condition) -> &'static str {
    match c {
        Condition::Class(_) => "class",
        Condition::Tokens(_) => "tokens",
        Condition::Text(_) => "text",
        Condition::Null(_) => "null",
    }
}

/// Initialises from `"scratch"` (seeded) or from a checkpoint path.
pub fn load_init(config: DenoiserConfig, seed: u64, init: &str) -> Result<Denoiser> {
    let mut model = Denoiser::new(config, seed)?;
    if init != "scratch" {
        model.load_weights(Path::new(init))?;
    }
    Ok(model)
}

/// Pads a context to `len` keys with masked zeros.
fn pad_context(ctx: Context, len: usize) -> Result<Context> {
    let (b, l, d) = ctx.hidden.dims3()?;
    if l == len {
        return Ok(ctx);
    }
    let dtype = ctx.hidden.dtype();
    let mask = match ctx.mask {
        Some(m) => m.0,
        None => Tensor::ones((b, l), dtype, &Device::Cpu)?,
    };
    Ok(Context {
        hidden: Tensor::cat(&[ctx.hidden, Tensor::zeros((b, len - l, d), dtype, &Device::Cpu)?], 1)?,
        mask: Some(KeyMask(Tensor::cat(&[mask, Tensor::zeros((b, len - l), dtype, &Device::Cpu)?], 1)?)),
    })
}

impl NoisePredictor for Denoiser {
    type Cond = Condition;

    fn latent_shape(&self) -> (usize, usize, usize) {
        self.config.latent_shape()
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn cond_batch(&self, cond: &Condition) -> usize {
        cond.batch()
    }

    fn predict_eps(&self, x_t: &Tensor, t: &[usize], cond: &Condition) -> Result<Tensor> {
        self.forward(x_t, t, &self.resolve(cond)?)
    }

    /// Both branches run as one doubled batch.
    fn predict_guided(&self, x_t: &Tensor, t: &[usize], cond: &Condition, null: &Condition, scale: f64) -> Result<Tensor> {
        let b = x_t.dim(0)?;
        let (c, u) = (self.resolve(cond)?, self.resolve(null)?);
        let len = c.hidden.dim(1)?.max(u.hidden.dim(1)?);
        let (c, u) = if c.mask.is_none() && u.mask.is_none() && c.hidden.dim(1)? == u.hidden.dim(1)? {
            (c, u)
        } else {
            (pad_context(c, len)?, pad_context(u, len)?)
        };
        let mask = match (c.mask, u.mask) {
            (Some(a), Some(b)) => Some(KeyMask(Tensor::cat(&[a.0, b.0], 0)?)),
            _ => None,
        };
        let ctx = Context { hidden: Tensor::cat(&[c.hidden, u.hidden], 0)?, mask };
        let t2: Vec<usize> = if t.len() == 1 { t.to_vec() } else { [t, t].concat() };
        let eps = self.forward(&Tensor::cat(&[x_t, x_t], 0)?, &t2, &ctx)?;
        cfg_combine(&eps.narrow(0, b, b)?, &eps.narrow(0, 0, b)?, scale)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub p_uncond: f64,
    pub seed: u64,
    pub max_grad_norm: Option<f64>,
    /// How a patch with several summaries picks one each epoch.
    pub summary_policy: SummaryPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            warmup_steps: 10_000,
            batch_size: 64,
            max_steps: 20_000,
            p_uncond: 0.1,
            seed: 0,
            max_grad_norm: Some(1.0),
            summary_policy: SummaryPolicy::Fixed,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_uncond) {
            return Err(Error::Config(format!("p_uncond {} outside [0, 1)", self.p_uncond)));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("batch_size and lr must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample training conditions.
#[derive(Debug, Clone)]
pub enum TrainConditions {
    Class(Vec<u32>),
    /// `choices[i]` lists the caption rows patch `i` may use.
    Text { captions: Vec<TokenSequence>, choices: Vec<Vec<u32>> },
}

/// Pre-encoded latents with their conditions.
#[derive(Debug, Clone)]
pub struct LdmDataset {
    /// `(N, h, w, c)`, already multiplied by the autoencoder's scale factor.
    pub latents: Tensor,
    pub conditions: TrainConditions,
}

impl LdmDataset {
    pub fn len(&self) -> usize {
        self.latents.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Empty("training latents"));
        }
        let m = match &self.conditions {
            TrainConditions::Class(ids) => ids.len(),
            TrainConditions::Text { captions, choices } => {
                if choices.iter().flatten().any(|&c| c as usize >= captions.len()) || choices.iter().any(Vec::is_empty) {
                    return Err(Error::invalid("caption choice out of range or empty"));
                }
                choices.len()
            }
        };
        if m != n {
            return Err(Error::shape(n, m));
        }
        Ok(())
    }
}

/// One fully specified optimisation step.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub latents: Tensor,
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
    pub condition: Condition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Replaces each item's condition by the null condition with probability `p`.
pub fn apply_condition_dropout(cond: &Condition, p: f64, rng: &mut impl Rng) -> Result<Condition> {
    let drop: Vec<bool> = (0..cond.batch()).map(|_| rng.random_bool(p)).collect();
    Ok(match cond {
        Condition::Class(ids) => {
            Condition::Class(ids.iter().zip(&drop).map(|(&i, &d)| if d { NULL_CLASS } else { i }).collect())
        }
        Condition::Tokens(seqs) => Condition::Tokens(
            seqs.iter().zip(&drop).map(|(s, &d)| if d { TokenSequence::default() } else { s.clone() }).collect(),
        ),
        Condition::Text(ctx) => {
            let keep: Vec<f64> = drop.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
            let keep = Tensor::from_vec(keep, (drop.len(), 1), &Device::Cpu)?.to_dtype(ctx.mask.0.dtype())?;
            Condition::Text(TextContext {
                hidden: ctx.hidden.clone(),
                mask: KeyMask(ctx.mask.0.broadcast_mul(&keep)?),
                lengths: ctx.lengths.iter().zip(&drop).map(|(&l, &d)| if d { 0 } else { l }).collect(),
            })
        }
        Condition::Null(n) => Condition::Null(*n),
    })
}

/// Owns a denoiser and its optimiser state across steps.
///
/// Step `k` draws its batch, timesteps, noise and dropout from a ChaCha
/// stream keyed by `(seed, k)`, so a resumed run continues exactly.
pub struct LdmTrainer {
    model: Denoiser,
    config: TrainConfig,
    opt: Adam,
}

impl LdmTrainer {
    pub fn new(model: Denoiser, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamConfig { lr: config.lr, max_grad_norm: config.max_grad_norm, ..Default::default() };
        let schedule = LrSchedule::LinearWarmup { warmup_steps: config.warmup_steps };
        let opt = Adam::new(model.trainable(), adam, schedule)?;
        Ok(Self { model, config, opt })
    }

    pub fn model(&self) -> &Denoiser {
        &self.model
    }

    pub fn into_model(self) -> Denoiser {
        self.model
    }

    pub fn step_count(&self) -> usize {
        self.opt.step_count()
    }

    /// Mean squared error between `noise` and the prediction from the noised latents.
    pub fn loss(&self, batch: &TrainBatch, schedule: &NoiseSchedule) -> Result<Tensor> {
        let dtype = self.model.store.dtype();
        let noise = batch.noise.to_dtype(dtype)?;
        let x_t = q_sample_batch(&batch.latents.to_dtype(dtype)?, &batch.timesteps, &noise, schedule)?;
        let eps = self.model.predict_eps(&x_t, &batch.timesteps, &batch.condition)?;
        Ok((eps - noise)?.sqr()?.mean_all()?)
    }

    pub fn step_on(&mut self, batch: &TrainBatch, schedule: &NoiseSchedule) -> Result<LossRecord> {
        let step = self.opt.step_count();
        let lr = self.opt.current_lr();
        let loss = self.loss(batch, schedule)?;
        let value = scalar_mean(&loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        self.opt.backward_step(&loss)?;
        Ok(LossRecord { step, loss: value, lr })
    }

    fn draw_batch(&self, data: &LdmDataset, table: Option<&TextContext>, schedule: &NoiseSchedule) -> Result<TrainBatch> {
        let step = self.opt.step_count();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64);
        let n = data.len();
        let b = self.config.batch_size;
        let rows: Vec<u32> = (0..b).map(|_| rng.random_range(0..n as u32)).collect();
        let timesteps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=schedule.len())).collect();
        let (h, w, c) = self.model.config.latent_shape();
        let noise = randn_tensor(&mut rng, &[b, h, w, c], self.model.store.dtype())?;
        let idx = Tensor::from_slice(&rows, b, &Device::Cpu)?;
        let latents = data.latents.index_select(&idx, 0)?;
        let epoch = (step * b / n) as u64;
        let condition = match &data.conditions {
            TrainConditions::Class(ids) => Condition::Class(rows.iter().map(|&r| ids[r as usize]).collect()),
            TrainConditions::Text { captions, choices } => {
                let pick: Vec<u32> = rows
                    .iter()
                    .map(|&r| {
                        let options = &choices[r as usize];
                        let v = select_variant(self.config.summary_policy, options.len(), self.config.seed, epoch, r as u64);
                        options[v]
                    })
                    .collect();
                match table {
                    Some(table) => Condition::Text(table.select(&pick)?),
                    None => Condition::Tokens(pick.iter().map(|&p| captions[p as usize].clone()).collect()),
                }
            }
        };
        let condition = apply_condition_dropout(&condition, self.config.p_uncond, &mut rng)?;
        Ok(TrainBatch { latents, timesteps, noise, condition })
    }

    /// Encodes every caption once when the text encoder is frozen.
    fn caption_table(&self, data: &LdmDataset) -> Result<Option<TextContext>> {
        let TrainConditions::Text { captions, .. } = &data.conditions else { return Ok(None) };
        if !self.model.text_frozen() {
            return Ok(None);
        }
        let parts = captions.chunks(64).map(|c| self.model.encode_prompts(c)).collect::<Result<Vec<_>>>()?;
        let len = parts.iter().map(|p| p.hidden.dim(1).unwrap_or(1)).max().unwrap_or(1);
        let mut hidden = Vec::new();
        let mut masks = Vec::new();
        let mut lengths = Vec::new();
        for p in parts {
            let padded = pad_context(Context { hidden: p.hidden, mask: Some(p.mask) }, len)?;
            hidden.push(padded.hidden);
            masks.push(padded.mask.expect("padded contexts carry masks").0);
            lengths.extend(p.lengths);
        }
        Ok(Some(TextContext { hidden: Tensor::cat(&hidden, 0)?, mask: KeyMask(Tensor::cat(&masks, 0)?), lengths }))
    }

    /// Runs until `config.max_steps` steps have been taken in total.
    pub fn run(
        &mut self,
        data: &LdmDataset,
        schedule: &NoiseSchedule,
        mut on_step: impl FnMut(&LossRecord),
    ) -> Result<Vec<LossRecord>> {
        data.validate()?;
        let (h, w, c) = self.model.config.latent_shape();
        if data.latents.dims()[1..] != [h, w, c] {
            return Err(Error::shape((h, w, c), &data.latents.dims()[1..]));
        }
        let table = self.caption_table(data)?;
        let mut curve = Vec::new();
        while self.opt.step_count() < self.config.max_steps {
            let batch = self.draw_batch(data, table.as_ref(), schedule)?;
            let record = self.step_on(&batch, schedule)?;
            on_step(&record);
            curve.push(record);
        }
        Ok(curve)
    }

    /// Model, optimiser moments, step counter and training config.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (step, first, second) = self.opt.state();
        let mut ck = self.model.checkpoint()?;
        ck.metadata.insert("train_config".into(), serde_json::to_string(&self.config)?);
        ck.metadata.insert("step".into(), step.to_string());
        ck.metadata.insert("rng".into(), format!("chacha8 seed={} stream=step", self.config.seed));
        for (i, (m, v)) in first.into_iter().zip(second).enumerate() {
            ck.tensors.insert(format!("adam.m.{i:04}"), m);
            ck.tensors.insert(format!("adam.v.{i:04}"), v);
        }
        ck.save(path)
    }

    pub fn resume(path: &Path) -> Result<Self> {
        let model = Denoiser::load(path)?;
        let ck = Checkpoint::load(path)?;
        let bad = |r: &str| Error::Checkpoint { path: path.to_path_buf(), reason: r.to_string() };
        let config: TrainConfig = serde_json::from_str(ck.metadata.get("train_config").ok_or_else(|| bad("no train_config"))?)?;
        let step: usize = ck.metadata.get("step").and_then(|s| s.parse().ok()).ok_or_else(|| bad("no step"))?;
        let mut trainer = Self::new(model, config)?;
        let count = trainer.model.trainable().len();
        let get = |k: &str| ck.tensors.get(k).cloned().ok_or_else(|| bad("missing optimizer moments"));
        let first = (0..count).map(|i| get(&format!("adam.m.{i:04}"))).collect::<Result<Vec<_>>>()?;
        let second = (0..count).map(|i| get(&format!("adam.v.{i:04}"))).collect::<Result<Vec<_>>>()?;
        trainer.opt.restore(step, first, second)?;
        Ok(trainer)
    }
}

/// Trains `model` for `config.max_steps` steps and returns it with its loss curve.
pub fn train_ldm(
    model: Denoiser,
    data: &LdmDataset,
    schedule: &NoiseSchedule,
    config: TrainConfig,
    on_step: impl FnMut(&LossRecord),
) -> Result<(Denoiser, Vec<LossRecord>)> {
    let mut trainer = LdmTrainer::new(model, config)?;
    let curve = trainer.run(data, schedule, on_step)?;
    Ok((trainer.into_model(), curve))
}

/// Differences between two weight sets, keyed by parameter name.
pub fn weight_differences(a: &Denoiser, b: &Denoiser) -> Result<HashMap<String, f64>> {
    let other: HashMap<String, Tensor> = b.store.tensors().into_iter().collect();
    a.store
        .tensors()
        .into_iter()
        .map(|(name, t)| {
            let o = other.get(&name).ok_or_else(|| Error::invalid(format!("missing {name}")))?;
            let d = (t - o)?.abs()?.flatten_all()?.max(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            Ok((name, d))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::to_f64_vec;
    use crate::schedule::{make_schedule, sample_latents, SamplerConfig};

    pub(crate) fn tiny(kind: ConditioningKind) -> DenoiserConfig {
        DenoiserConfig {
            latent_channels: 3,
            latent_size: 4,
            base_width: 8,
            depth: 2,
            channel_mult: vec![1, 2],
            attention_stages: vec![1],
            context_dim: 16,
            time_embed_dim: 16,
            heads: 2,
            groups: 4,
            num_timesteps: 1000,
            conditioning: kind,
            text_encoder: TextEncoderConfig { vocab_size: 260, d_model: 16, layers: 1, heads: 2, frozen: true },
        }
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        to_f64_vec(a).unwrap().iter().zip(to_f64_vec(b).unwrap()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn randomise(model: &Denoiser, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fresh: HashMap<String, Tensor> = model
            .store
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, (randn_tensor(&mut rng, t.dims(), t.dtype()).unwrap() * 0.3).unwrap()))
            .collect();
        model.store.assign(&fresh).unwrap();
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::default().validate().is_ok());
        assert!(DenoiserConfig { attention_stages: vec![3], ..Default::default() }.validate().is_err());
        assert!(DenoiserConfig { channel_mult: vec![1, 2], ..Default::default() }.validate().is_err());
        assert!(DenoiserConfig { latent_size: 6, ..Default::default() }.validate().is_err());
        let text = DenoiserConfig { conditioning: ConditioningKind::Text, context_dim: 64, ..Default::default() };
        assert!(text.validate().is_err());
        assert!(TrainConfig { p_uncond: 1.0, ..Default::default() }.validate().is_err());
        let d = TrainConfig::default();
        assert_eq!((d.lr, d.warmup_steps, d.p_uncond), (2e-5, 10_000, 0.1));
    }

    #[test]
    fn shape_determinism_and_errors() -> Result<()> {
        let model = Denoiser::new(tiny(ConditioningKind::Class), 1)?;
        randomise(&model, 2);
        let x = Tensor::randn(0f32, 1.0, (3, 4, 4, 3), &Device::Cpu)?;
        let cond = Condition::Class(vec![0, 1, 3]);
        let a = model.predict_eps(&x, &[10, 500, 999], &cond)?;
        let b = model.predict_eps(&x, &[10, 500, 999], &cond)?;
        assert_eq!(a.dims(), x.dims());
        assert_eq!(max_diff(&a, &b), 0.0);
        let wrong = Tensor::zeros((1, 8, 8, 3), DType::F32, &Device::Cpu)?;
        assert!(model.predict_eps(&wrong, &[1], &Condition::Null(1)).is_err());
        assert!(model.predict_eps(&x, &[0], &cond).is_err());
        assert!(model.predict_eps(&x, &[5], &Condition::Tokens(vec![TokenSequence::default(); 3])).is_err());
        assert!(model.predict_eps(&x, &[5], &Condition::Class(vec![5, 0, 0])).is_err());
        Ok(())
    }

    #[test]
    fn guided_batch_matches_separate_branches() -> Result<()> {
        for kind in [ConditioningKind::Class, ConditioningKind::Text] {
            let model = Denoiser::with_dtype(tiny(kind), 1, DType::F64)?;
            randomise(&model, 5);
            let x = Tensor::randn(0f64, 1.0, (2, 4, 4, 3), &Device::Cpu)?;
            let cond = match kind {
                ConditioningKind::Class => Condition::Class(vec![2, 1]),
                ConditioningKind::Text => Condition::Tokens(vec![
                    TokenSequence::new(vec![1, 2, 3])?,
                    TokenSequence::new(vec![9; 80])?,
                ]),
            };
            let null = Condition::Null(2);
            let joint = model.predict_guided(&x, &[300], &cond, &null, 1.75)?;
            let u = model.predict_eps(&x, &[300], &null)?;
            let c = model.predict_eps(&x, &[300], &cond)?;
            assert!(max_diff(&joint, &cfg_combine(&u, &c, 1.75)?) < 1e-9, "{kind:?}");
        }
        Ok(())
    }

    #[test]
    fn full_dropout_ignores_caption() -> Result<()> {
        let model = Denoiser::new(tiny(ConditioningKind::Text), 1)?;
        randomise(&model, 8);
        let x = Tensor::randn(0f32, 1.0, (2, 4, 4, 3), &Device::Cpu)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Condition::Tokens(vec![TokenSequence::new(vec![5, 6])?, TokenSequence::new(vec![7])?]);
        let b = Condition::Tokens(vec![TokenSequence::new(vec![100; 30])?, TokenSequence::new(vec![3, 3])?]);
        let ea = model.predict_eps(&x, &[50], &apply_condition_dropout(&a, 1.0, &mut rng)?)?;
        let eb = model.predict_eps(&x, &[50], &apply_condition_dropout(&b, 1.0, &mut rng)?)?;
        assert_eq!(max_diff(&ea, &eb), 0.0);
        let en = model.predict_eps(&x, &[50], &Condition::Null(2))?;
        assert!(max_diff(&ea, &en) < 1e-6);
        assert!(max_diff(&ea, &model.predict_eps(&x, &[50], &a)?) > 0.0);
        Ok(())
    }

    #[test]
    fn checkpoint_and_scratch_init() -> Result<()> {
        let dir = tempfile::tempdir()?;
        let a = load_init(tiny(ConditioningKind::Text), 4, "scratch")?;
        let b = load_init(tiny(ConditioningKind::Text), 4, "scratch")?;
        assert_eq!(a.store.max_abs_diff(&b.store)?, 0.0);
        randomise(&a, 1);
        let path = dir.path().join("d.safetensors");
        a.save(&path)?;
        let c = Denoiser::load(&path)?;
        let x = Tensor::randn(0f32, 1.0, (1, 4, 4, 3), &Device::Cpu)?;
        let cond = Condition::Tokens(vec![TokenSequence::new(vec![4, 5, 6])?]);
        assert_eq!(max_diff(&a.predict_eps(&x, &[7], &cond)?, &c.predict_eps(&x, &[7], &cond)?), 0.0);
        let d = load_init(tiny(ConditioningKind::Text), 9, path.to_str().unwrap())?;
        assert_eq!(d.store.max_abs_diff(&a.store)?, 0.0);
        assert!(d.init_provenance().starts_with("checkpoint("));
        // Class model from a text checkpoint: shared U-Net tensors load, the embedder stays seeded.
        let e = load_init(tiny(ConditioningKind::Class), 9, path.to_str().unwrap())?;
        let same = |n: &str| e.store.get(n).unwrap().as_tensor().clone() - a.store.get(n).unwrap().as_tensor();
        assert_eq!(to_f64_vec(&same("conv_in.weight")?.abs()?)?.iter().sum::<f64>(), 0.0);
        assert_eq!(to_f64_vec(&same("mid.attn.kv.weight")?.abs()?)?.iter().sum::<f64>(), 0.0);
        assert!(weight_differences(&e, &a).is_err(), "class embedder has no counterpart");
        let wide = DenoiserConfig { base_width: 16, ..tiny(ConditioningKind::Text) };
        assert!(load_init(wide, 0, path.to_str().unwrap()).is_err());
        Ok(())
    }

    #[test]
    fn zero_dropout_still_samples_at_scale_zero() -> Result<()> {
        let model = Denoiser::new(tiny(ConditioningKind::Class), 3)?;
        let schedule = make_schedule("linear", 1000)?;
        let data = LdmDataset {
            latents: Tensor::randn(0f32, 1.0, (4, 4, 4, 3), &Device::Cpu)?,
            conditions: TrainConditions::Class(vec![0, 1, 2, 3]),
        };
        let cfg = TrainConfig { p_uncond: 0.0, max_steps: 3, batch_size: 2, lr: 1e-3, warmup_steps: 0, ..Default::default() };
        let (model, curve) = train_ldm(model, &data, &schedule, cfg, |_| {})?;
        assert_eq!(curve.len(), 3);
        let sampler = SamplerConfig { num_steps: 5, guidance_scale: 0.0, ..Default::default() };
        let z = sample_latents(&model, &Condition::Class(vec![1]), &Condition::Null(1), &sampler, &schedule)?;
        assert!(to_f64_vec(&z)?.iter().all(|v| v.is_finite()));
        Ok(())
    }

    #[test]
    fn resumed_training_matches_uninterrupted() -> Result<()> {
        let dir = tempfile::tempdir()?;
        let schedule = make_schedule("linear", 1000)?;
        let data = LdmDataset {
            latents: Tensor::randn(0f32, 1.0, (6, 4, 4, 3), &Device::Cpu)?,
            conditions: TrainConditions::Class(vec![0, 1, 2, 3, 0, 1]),
        };
        let cfg = |steps| TrainConfig { max_steps: steps, batch_size: 3, lr: 1e-3, warmup_steps: 2, ..Default::default() };
        let mut straight = LdmTrainer::new(Denoiser::new(tiny(ConditioningKind::Class), 0)?, cfg(6))?;
        straight.run(&data, &schedule, |_| {})?;

        let mut first = LdmTrainer::new(Denoiser::new(tiny(ConditioningKind::Class), 0)?, cfg(3))?;
        first.run(&data, &schedule, |_| {})?;
        let path = dir.path().join("t.safetensors");
        first.save(&path)?;
        let mut resumed = LdmTrainer::resume(&path)?;
        assert_eq!(resumed.step_count(), 3);
        resumed.config.max_steps = 6;
        resumed.run(&data, &schedule, |_| {})?;
        assert_eq!(resumed.model.store.max_abs_diff(&straight.model.store)?, 0.0);
        Ok(())
    }
}
