//! Noise schedules, forward noising, DDIM reverse steps, classifier-free
//! guidance and the full sampling loop.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`, with `ᾱ_0 = 1` so that a DDIM step to
//! `t_prev = 0` returns the predicted clean sample.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::randn_tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind {other:?}"))),
        }
    }
}

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;

/// Per-timestep β, α = 1 − β and ᾱ_t = Π_{s≤t} α_s.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::invalid(format!("a noise schedule needs T >= 2, got {steps}")));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    LINEAR_BETA_START + (LINEAR_BETA_END - LINEAR_BETA_START) * i as f64 / (steps - 1) as f64
                })
                .collect(),
            ScheduleKind::Cosine => {
                let offset = 0.008;
                let f = |t: f64| ((t / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, 0.999))
                    .collect()
            }
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { kind, betas, alphas, alpha_bars })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.len() || (!allow_zero && t == 0) {
            return Err(Error::invalid(format!("timestep {t} outside [1, {}]", self.len())));
        }
        Ok(())
    }
}

/// Builds a schedule from its family name, e.g. `"linear"`.
pub fn make_schedule(kind: &str, steps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::new(kind.parse()?, steps)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    Ok(())
}

/// Forward noising `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps` at a single timestep
/// (`t = 0` returns `x0`).
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    same_shape(x0, eps)?;
    schedule.check_t(t, true)?;
    let ab = schedule.alpha_bar(t);
    Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Forward noising with one timestep per leading-axis item.
pub fn q_sample_batch(x0: &Tensor, ts: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    same_shape(x0, eps)?;
    let b = x0.dim(0)?;
    if ts.len() != b {
        return Err(Error::shape(b, ts.len()));
    }
    for &t in ts {
        schedule.check_t(t, true)?;
    }
    let mut coeff_shape = vec![1usize; x0.rank()];
    coeff_shape[0] = b;
    let col = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> {
        let v: Vec<f64> = ts.iter().map(|&t| f(schedule.alpha_bar(t))).collect();
        Ok(Tensor::from_vec(v, coeff_shape.as_slice(), x0.device())?.to_dtype(x0.dtype())?)
    };
    let signal = col(&|ab| ab.sqrt())?;
    let noise = col(&|ab| (1.0 - ab).sqrt())?;
    Ok((x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}

/// DDIM noise scale σ for a step `t → t_prev` at stochasticity `eta`.
pub fn ddim_sigma(schedule: &NoiseSchedule, t: usize, t_prev: usize, eta: f64) -> f64 {
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt()
}

/// One DDIM reverse step from `t` to `t_prev < t`.
///
/// `noise` must be supplied iff `eta > 0`.
pub fn ddim_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    eta: f64,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    same_shape(x_t, eps_hat)?;
    schedule.check_t(t, false)?;
    schedule.check_t(t_prev, true)?;
    if t_prev >= t {
        return Err(Error::invalid(format!("DDIM step needs t_prev < t, got {t_prev} >= {t}")));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::invalid(format!("eta {eta} outside [0, 1]")));
    }
    let ab = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t_prev);
    let sigma = ddim_sigma(schedule, t, t_prev, eta);
    let x0_pred = ((x_t - (eps_hat * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let mut out = ((x0_pred * ab_prev.sqrt())? + (eps_hat * dir)?)?;
    match (eta > 0.0, noise) {
        (true, Some(n)) => {
            same_shape(x_t, n)?;
            out = (out + (n * sigma)?)?;
        }
        (true, None) => return Err(Error::invalid("eta > 0 requires a noise tensor")),
        (false, _) => {}
    }
    Ok(out)
}

/// Classifier-free guidance: `eps_uncond + scale·(eps_cond − eps_uncond)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    same_shape(eps_uncond, eps_cond)?;
    Ok((eps_uncond + ((eps_cond - eps_uncond)? * scale)?)?)
}

/// Uniformly strided DDIM timesteps in decreasing order, starting at `T`.
pub fn ddim_timesteps(total: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > total {
        return Err(Error::invalid(format!("num_steps {num_steps} must lie in [1, {total}]")));
    }
    Ok((0..num_steps).rev().map(|i| (i + 1) * total / num_steps).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub guidance_scale: f64,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: 50, guidance_scale: 1.75, eta: 0.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > schedule.len() {
            return Err(Error::invalid(format!(
                "num_steps {} must lie in [1, {}]",
                self.num_steps,
                schedule.len()
            )));
        }
        if !(self.guidance_scale >= 0.0 && self.guidance_scale.is_finite()) {
            return Err(Error::invalid(format!("guidance scale {} must be >= 0", self.guidance_scale)));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }
}

/// A conditional noise predictor over channels-last latents.
pub trait NoisePredictor {
    type Cond;

    /// Shape `(h, w, c)` of one latent.
    fn latent_shape(&self) -> (usize, usize, usize);

    fn dtype(&self) -> DType {
        DType::F32
    }

    /// Batch size implied by a condition.
    fn cond_batch(&self, cond: &Self::Cond) -> usize;

    /// `x_t` is `(B, h, w, c)`; `t` holds one timestep per item or a single shared one.
    fn predict_eps(&self, x_t: &Tensor, t: &[usize], cond: &Self::Cond) -> Result<Tensor>;

    /// Guided prediction. Implementations may batch both branches together.
    fn predict_guided(
        &self,
        x_t: &Tensor,
        t: &[usize],
        cond: &Self::Cond,
        null_cond: &Self::Cond,
        scale: f64,
    ) -> Result<Tensor> {
        let eps_u = self.predict_eps(x_t, t, null_cond)?;
        let eps_c = self.predict_eps(x_t, t, cond)?;
        cfg_combine(&eps_u, &eps_c, scale)
    }
}

/// Maps a batch of latents to images.
pub trait LatentDecoder {
    fn decode_latents(&self, z: &Tensor) -> Result<Tensor>;
}

/// Runs the DDIM loop and returns final latents `(B, h, w, c)`.
pub fn sample_latents<P: NoisePredictor>(
    denoiser: &P,
    cond: &P::Cond,
    null_cond: &P::Cond,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    config.validate(schedule)?;
    let batch = denoiser.cond_batch(cond);
    if denoiser.cond_batch(null_cond) != batch {
        return Err(Error::shape(batch, denoiser.cond_batch(null_cond)));
    }
    let (h, w, c) = denoiser.latent_shape();
    let shape = [batch, h, w, c];
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = randn_tensor(&mut rng, &shape, denoiser.dtype())?;
    let steps = ddim_timesteps(schedule.len(), config.num_steps)?;
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        // Inference only: without the detach each step would keep every earlier step's graph alive.
        let eps = denoiser.predict_guided(&x, &[t], cond, null_cond, config.guidance_scale)?.detach();
        let noise = if config.eta > 0.0 {
            Some(randn_tensor(&mut rng, &shape, denoiser.dtype())?)
        } else {
            None
        };
        x = ddim_step(&x, &eps, t, t_prev, schedule, config.eta, noise.as_ref())?;
    }
    Ok(x)
}

/// Full sampler: seeded noise, guided DDIM steps, then decoding to images.
pub fn sample<P: NoisePredictor, V: LatentDecoder>(
    denoiser: &P,
    decoder: &V,
    cond: &P::Cond,
    null_cond: &P::Cond,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let z = sample_latents(denoiser, cond, null_cond, config, schedule)?;
    decoder.decode_latents(&z)
}
