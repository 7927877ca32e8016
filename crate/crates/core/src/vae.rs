//! Vector-quantised autoencoder with a configurable downsampling factor.
//!
//! Images are channels-last `(B, H, W, 3)` tensors with values in `[0, 1]`.
//! Latents are `(B, H/f, W/f, c)`. Quantisation snaps each latent vector to
//! its nearest codebook row (Euclidean); training uses the straight-through
//! estimator.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{scalar_mean, Adam, AdamConfig, Checkpoint, Conv2d, LrSchedule, ParamStore};
use crate::schedule::LatentDecoder;

/// Weight of the commitment term in the VQ objective.
pub const COMMITMENT_WEIGHT: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub downsample_factor: usize,
    pub latent_channels: usize,
    pub codebook_size: usize,
    pub base_width: usize,
    pub image_size: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { downsample_factor: 4, latent_channels: 3, codebook_size: 512, base_width: 16, image_size: 32 }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.downsample_factor, 4 | 8) {
            return Err(Error::invalid(format!("downsample factor must be 4 or 8, got {}", self.downsample_factor)));
        }
        if self.latent_channels == 0 || self.codebook_size == 0 || self.base_width == 0 {
            return Err(Error::invalid("latent channels, codebook size and base width must be positive"));
        }
        if self.image_size == 0 || self.image_size % self.downsample_factor != 0 {
            return Err(Error::invalid(format!(
                "image size {} not divisible by {}",
                self.image_size, self.downsample_factor
            )));
        }
        Ok(())
    }

    /// `(h, w, c)` of one latent.
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let side = self.image_size / self.downsample_factor;
        (side, side, self.latent_channels)
    }

    fn levels(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    /// Channel width at each resolution level, level 0 being full resolution.
    fn widths(&self) -> Vec<usize> {
        (0..=self.levels()).map(|l| if l == 0 { self.base_width } else { 2 * self.base_width }).collect()
    }
}

/// Encoded image batch with its provenance.
#[derive(Debug, Clone)]
pub struct LatentTensor {
    /// `(B, h, w, c)`
    pub data: Tensor,
    pub downsample_factor: usize,
    pub quantized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub ssim: f64,
    pub mse: f64,
    pub n_images: usize,
    pub config: VaeConfig,
}

/// Result of snapping latent vectors to a codebook.
#[derive(Debug, Clone)]
pub struct Quantized {
    pub z_q: Tensor,
    pub indices: Vec<u32>,
    pub commitment_loss: f64,
}

/// Index of the nearest codebook row for each row of `z`, by exhaustive scan.
pub fn nearest_codes(z: &[f32], codebook: &[f32], dim: usize) -> Vec<u32> {
    let norms: Vec<f32> = codebook.chunks_exact(dim).map(|e| e.iter().map(|v| v * v).sum()).collect();
    z.chunks_exact(dim)
        .map(|v| {
            let mut best = (f32::INFINITY, 0u32);
            for (k, e) in codebook.chunks_exact(dim).enumerate() {
                // |v - e|^2 minus the |v|^2 term shared by all candidates.
                let dot: f32 = v.iter().zip(e).map(|(a, b)| a * b).sum();
                let d = norms[k] - 2.0 * dot;
                if d < best.0 {
                    best = (d, k as u32);
                }
            }
            best.1
        })
        .collect()
}

/// Replaces each vector along the last axis of `z` by its nearest codebook row.
pub fn quantize(z: &Tensor, codebook: &Tensor) -> Result<Quantized> {
    let (k, dim) = codebook.dims2()?;
    if k == 0 {
        return Err(Error::Empty("codebook"));
    }
    if z.dims().last() != Some(&dim) {
        return Err(Error::shape(dim, z.dims()));
    }
    let flat = z.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let book = codebook.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let indices = nearest_codes(&flat, &book, dim);
    let idx = Tensor::from_slice(&indices, indices.len(), z.device())?;
    let z_q = codebook.detach().index_select(&idx, 0)?.reshape(z.dims())?.to_dtype(z.dtype())?;
    let commitment_loss = scalar_mean(&(z.detach() - &z_q)?.sqr()?)?;
    Ok(Quantized { z_q, indices, commitment_loss })
}

struct ResConv {
    a: Conv2d,
    b: Conv2d,
}

impl ResConv {
    fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            a: Conv2d::new(store, &format!("{name}.a"), width, width, 3, 1)?,
            b: Conv2d::new(store, &format!("{name}.b"), width, width, 3, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.b.forward(&self.a.forward(&x.silu()?)?.silu()?)?;
        Ok((x + h)?)
    }
}

pub struct VqVae {
    config: VaeConfig,
    store: ParamStore,
    enc_in: Conv2d,
    enc_down: Vec<(Conv2d, ResConv)>,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_mid: ResConv,
    dec_up: Vec<Conv2d>,
    dec_out: Conv2d,
    codebook: Tensor,
    /// Multiplier mapping quantised latents to roughly unit variance for diffusion.
    scale_factor: f64,
}

impl VqVae {
    pub fn new(config: VaeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed, DType::F32);
        let widths = config.widths();
        let c = config.latent_channels;
        let enc_in = Conv2d::new(&mut store, "enc.in", 3, widths[0], 3, 1)?;
        let mut enc_down = Vec::new();
        for l in 0..config.levels() {
            let down = Conv2d::new(&mut store, &format!("enc.down{l}"), widths[l], widths[l + 1], 3, 2)?;
            let res = ResConv::new(&mut store, &format!("enc.res{l}"), widths[l + 1])?;
            enc_down.push((down, res));
        }
        let last = *widths.last().unwrap();
        let enc_out = Conv2d::new(&mut store, "enc.out", last, c, 3, 1)?;
        let dec_in = Conv2d::new(&mut store, "dec.in", c, last, 3, 1)?;
        let dec_mid = ResConv::new(&mut store, "dec.mid", last)?;
        let mut dec_up = Vec::new();
        for l in (0..config.levels()).rev() {
            dec_up.push(Conv2d::new(&mut store, &format!("dec.up{l}"), widths[l + 1], widths[l], 3, 1)?);
        }
        let dec_out = Conv2d::new(&mut store, "dec.out", widths[0], 3, 3, 1)?;
        let codebook = store.randn("codebook", &[config.codebook_size, c], 1.0)?;
        Ok(Self { config, store, enc_in, enc_down, enc_out, dec_in, dec_mid, dec_up, dec_out, codebook, scale_factor: 1.0 })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn codebook(&self) -> &Tensor {
        &self.codebook
    }

    pub fn scale_factor(&self) -> f64 {
        self.scale_factor
    }

    fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = self.config.image_size;
        match images.dims() {
            [_, h, w, 3] if *h == s && *w == s => Ok(()),
            other => Err(Error::shape(format!("(B, {s}, {s}, 3)"), other)),
        }
    }

    fn check_latents(&self, z: &Tensor) -> Result<()> {
        let (h, w, c) = self.config.latent_shape();
        match z.dims() {
            [_, a, b, d] if (*a, *b, *d) == (h, w, c) => Ok(()),
            other => Err(Error::shape(format!("(B, {h}, {w}, {c})"), other)),
        }
    }

    /// Pre-quantisation encoder output.
    fn encode_raw(&self, images: &Tensor) -> Result<Tensor> {
        let x = ((images * 2.0)? - 1.0)?;
        let mut h = self.enc_in.forward(&x)?;
        for (down, res) in &self.enc_down {
            h = res.forward(&down.forward(&h.silu()?)?)?;
        }
        self.enc_out.forward(&h.silu()?)
    }

    /// Decoder output before clamping.
    fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.dec_mid.forward(&self.dec_in.forward(z)?)?;
        for up in &self.dec_up {
            h = up.forward(&crate::nn::upsample_nearest2x(&h.silu()?)?)?;
        }
        let out = self.dec_out.forward(&h.silu()?)?;
        Ok(((out + 1.0)? * 0.5)?)
    }

    /// Encodes `(B, H, W, 3)` images into latents, snapped to the codebook when `quantize` is set.
    pub fn encode(&self, images: &Tensor, quantize_latents: bool) -> Result<LatentTensor> {
        self.check_images(images)?;
        let z = self.encode_raw(images)?.detach();
        let data = if quantize_latents { quantize(&z, &self.codebook)?.z_q } else { z };
        Ok(LatentTensor { data, downsample_factor: self.config.downsample_factor, quantized: quantize_latents })
    }

    /// Decodes latents to images clamped to `[0, 1]`. Unquantised latents are snapped first.
    pub fn decode(&self, latent: &LatentTensor) -> Result<Tensor> {
        if latent.downsample_factor != self.config.downsample_factor {
            return Err(Error::shape(self.config.downsample_factor, latent.downsample_factor));
        }
        self.check_latents(&latent.data)?;
        let z = if latent.quantized { latent.data.clone() } else { quantize(&latent.data, &self.codebook)?.z_q };
        Ok(self.decode_raw(&z)?.clamp(0f32, 1f32)?.detach())
    }

    /// Encode then decode, in chunks to bound memory.
    pub fn reconstruct(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.dim(0)?;
        let mut out = Vec::new();
        for start in (0..n).step_by(256) {
            let chunk = images.narrow(0, start, (n - start).min(256))?;
            out.push(self.decode(&self.encode(&chunk, true)?)?.detach());
        }
        Ok(Tensor::cat(&out, 0)?)
    }

    /// Quantised latents in diffusion space (multiplied by the scale factor), chunked.
    pub fn encode_for_diffusion(&self, images: &Tensor) -> Result<Tensor> {
        let n = images.dim(0)?;
        let mut out = Vec::new();
        for start in (0..n).step_by(256) {
            let chunk = images.narrow(0, start, (n - start).min(256))?;
            out.push((self.encode(&chunk, true)?.data * self.scale_factor)?.detach());
        }
        Ok(Tensor::cat(&out, 0)?)
    }

    /// Sets the diffusion scale factor to `1 / std` of the quantised latents of `images`.
    pub fn calibrate_scale(&mut self, images: &Tensor) -> Result<f64> {
        self.scale_factor = 1.0;
        let z = self.encode_for_diffusion(images)?;
        let std = scalar_mean(&z.broadcast_sub(&z.mean_all()?)?.sqr()?)?.sqrt();
        self.scale_factor = if std > 1e-8 { 1.0 / std } else { 1.0 };
        Ok(self.scale_factor)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new("vae", &self.config)?.with_tensors("", self.store.tensors());
        ck.metadata.insert("scale_factor".into(), self.scale_factor.to_string());
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?.expect_kind("vae", path)?;
        let mut vae = Self::new(ck.config()?, 0)?;
        vae.store.assign(&ck.tensors)?;
        vae.scale_factor = ck
            .metadata
            .get("scale_factor")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint { path: path.to_path_buf(), reason: "missing scale_factor".into() })?;
        Ok(vae)
    }
}

/// The decoder consumes diffusion-space latents (scaled by the calibration factor).
impl LatentDecoder for VqVae {
    fn decode_latents(&self, z: &Tensor) -> Result<Tensor> {
        let data = (z / self.scale_factor)?.to_dtype(DType::F32)?;
        self.decode(&LatentTensor { data, downsample_factor: self.config.downsample_factor, quantized: false })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Re-seed codebook rows unused over this many steps from live encoder outputs (0 disables).
    pub dead_code_interval: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self { steps: 1200, batch_size: 16, lr: 2e-3, seed: 0, dead_code_interval: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeLossRecord {
    pub step: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub commitment: f64,
}

/// Trains a fresh VQ autoencoder on `(N, H, W, 3)` images.
///
/// Objective: pixel MSE + codebook term + 0.25 · commitment. `on_step` sees
/// every loss record and may persist checkpoints.
pub fn train_vae(
    images: &Tensor,
    config: &VaeConfig,
    train: &VaeTrainConfig,
    mut on_step: impl FnMut(&VqVae, &VaeLossRecord) -> Result<()>,
) -> Result<(VqVae, Vec<VaeLossRecord>)> {
    let vae = VqVae::new(config.clone(), train.seed)?;
    vae.check_images(images)?;
    let n = images.dim(0)?;
    if n == 0 {
        return Err(Error::Empty("training images"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed_7a1e);
    let batch = train.batch_size.min(n).max(1);
    let (_, _, c) = config.latent_shape();

    // Data-dependent codebook init: rows drawn from encoder outputs.
    {
        let probe = images.index_select(&batch_indices(&mut rng, n, batch.max(8).min(n))?, 0)?;
        let z = vae.encode_raw(&probe)?.reshape(((), c))?;
        reseed_codes(&vae, &z, &(0..config.codebook_size as u32).collect::<Vec<_>>(), &mut rng)?;
    }

    let adam = AdamConfig { lr: train.lr, ..Default::default() };
    let mut opt = Adam::new(vae.store.vars(), adam, LrSchedule::Constant)?;
    let mut usage = vec![0u32; config.codebook_size];
    let mut curve = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let idx = batch_indices(&mut rng, n, batch)?;
        let x = images.index_select(&idx, 0)?;
        let z = vae.encode_raw(&x)?;
        let q = quantize(&z, &vae.codebook)?;
        for &i in &q.indices {
            usage[i as usize] += 1;
        }
        // Gradient-carrying codebook lookup for the codebook term.
        let idx_t = Tensor::from_slice(&q.indices, q.indices.len(), &Device::Cpu)?;
        let z_q = vae.codebook.index_select(&idx_t, 0)?.reshape(z.dims())?;
        let z_st = (&z + (&z_q - &z)?.detach())?;
        let recon = vae.decode_raw(&z_st)?;
        let rec_loss = (recon - &x)?.sqr()?.mean_all()?;
        let codebook_loss = (&z_q - z.detach())?.sqr()?.mean_all()?;
        let commit = (&z - z_q.detach())?.sqr()?.mean_all()?;
        let loss = ((&rec_loss + codebook_loss)? + (&commit * COMMITMENT_WEIGHT)?)?;
        let value = scalar_mean(&loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        opt.backward_step(&loss)?;
        let record = VaeLossRecord {
            step,
            loss: value,
            reconstruction: scalar_mean(&rec_loss)?,
            commitment: q.commitment_loss,
        };
        on_step(&vae, &record)?;
        curve.push(record);

        if train.dead_code_interval > 0 && (step + 1) % train.dead_code_interval == 0 && step + 1 < train.steps {
            let dead: Vec<u32> = (0..config.codebook_size as u32).filter(|&i| usage[i as usize] == 0).collect();
            if !dead.is_empty() {
                reseed_codes(&vae, &z.detach().reshape(((), c))?, &dead, &mut rng)?;
            }
            usage.iter_mut().for_each(|u| *u = 0);
        }
    }
    Ok((vae, curve))
}

fn batch_indices(rng: &mut impl Rng, n: usize, batch: usize) -> Result<Tensor> {
    let idx: Vec<u32> = if batch >= n {
        (0..n as u32).collect()
    } else {
        sample_indices(rng, n, batch).into_iter().map(|i| i as u32).collect()
    };
    Ok(Tensor::from_slice(&idx, idx.len(), &Device::Cpu)?)
}

/// Overwrites the given codebook rows with jittered rows of `z` `(N, c)`.
fn reseed_codes(vae: &VqVae, z: &Tensor, rows: &[u32], rng: &mut impl Rng) -> Result<()> {
    let var = vae.store.get("codebook").expect("codebook parameter");
    let c = z.dim(1)?;
    let src = z.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let n = src.len() / c;
    let mut book = var.as_tensor().flatten_all()?.to_vec1::<f32>()?;
    for &r in rows {
        let pick = rng.random_range(0..n);
        for j in 0..c {
            let jitter: f32 = rng.random_range(-1e-2..1e-2);
            book[r as usize * c + j] = src[pick * c + j] + jitter;
        }
    }
    var.set(&Tensor::from_vec(book, var.dims(), &Device::Cpu)?)?;
    Ok(())
}

/// Mean SSIM and mean 8-bit-scale MSE of reconstructions over `images`.
pub fn reconstruction_report(vae: &VqVae, images: &Tensor) -> Result<ReconstructionReport> {
    let n = images.dim(0)?;
    if n == 0 {
        return Err(Error::Empty("reconstruction dataset"));
    }
    let recon = vae.reconstruct(images)?;
    let (ssim, mse) = metrics::mean_ssim_mse(images, &recon)?;
    Ok(ReconstructionReport { ssim, mse, n_images: n, config: vae.config.clone() })
}
