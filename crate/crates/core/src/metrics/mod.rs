//! Evaluation kernels: Gaussian moment fits, Fréchet distance and FID, SSIM,
//! MSE and the classification accuracy score.

mod classifier;
mod report;

pub use classifier::{
    cas, evaluate_accuracy, majority_prior, train_classifier, CasReport, ClassifierConfig, ClassifierTrainConfig,
    ImageClassifier, ToyClassifier,
};
pub use report::{append_jsonl, save_image_grid, save_line_plot, MetricReport, Provenance};

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Sample mean and covariance of a feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub n: usize,
}

/// Fits mean and unbiased covariance (denominator `n − 1`) to `(n, d)` features.
pub fn gaussian_fit(features: &DMatrix<f64>) -> Result<GaussianStats> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::invalid(format!("gaussian_fit needs at least 2 rows, got {n}")));
    }
    let mu = features.row_mean().transpose();
    let mut centered = features.clone();
    for mut row in centered.row_iter_mut() {
        row -= mu.transpose();
    }
    let mut sigma = centered.transpose() * &centered / (n as f64 - 1.0);
    sigma = (&sigma + sigma.transpose()) * 0.5;
    Ok(GaussianStats { mu, sigma, n })
}

/// Eigenvalue floor: values in `(-tol, 0)` are treated as zero, anything lower is a failure.
fn clamp_eigenvalues(values: &DVector<f64>) -> Option<DVector<f64>> {
    let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-6 * scale;
    if values.iter().any(|&v| v < -tol) {
        return None;
    }
    Some(values.map(|v| v.max(0.0)))
}

fn sym_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = clamp_eigenvalues(&eig.eigenvalues)?;
    let d = DMatrix::from_diagonal(&vals.map(f64::sqrt));
    Some(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// `trace((Σa Σb)^{1/2})` via the symmetric form `Σa^{1/2} Σb Σa^{1/2}`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    let ra = sym_sqrt(a)?;
    let m = &ra * b * &ra;
    let m = (&m + m.transpose()) * 0.5;
    let vals = clamp_eigenvalues(&SymmetricEigen::new(m).eigenvalues)?;
    Some(vals.iter().map(|v| v.sqrt()).sum())
}

/// Fréchet distance between two Gaussians:
/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa Σb)^{1/2})`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let d = a.mu.len();
    if b.mu.len() != d || a.sigma.shape() != (d, d) || b.sigma.shape() != (d, d) {
        return Err(Error::shape(d, b.mu.len()));
    }
    let mean_term = (&a.mu - &b.mu).norm_squared();
    let tr = a.sigma.trace() + b.sigma.trace();
    let covmean = match trace_sqrt_product(&a.sigma, &b.sigma) {
        Some(v) => v,
        None => {
            let jitter = DMatrix::<f64>::identity(d, d) * 1e-10;
            trace_sqrt_product(&(&a.sigma + &jitter), &(&b.sigma + &jitter))
                .ok_or_else(|| Error::Numerical("matrix square root failed after jitter".into()))?
        }
    };
    let dist = mean_term + tr - 2.0 * covmean;
    if dist < -1e-6 {
        return Err(Error::Numerical(format!("negative Fréchet distance {dist}")));
    }
    Ok(dist.max(0.0))
}

/// Maps an image batch `(N, H, W, 3)` to an `(N, d)` feature matrix.
pub trait FeatureExtractor {
    fn id(&self) -> String;
    fn feature_dim(&self) -> usize;
    fn extract(&self, images: &Tensor) -> Result<DMatrix<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidResult {
    pub fid: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub extractor: String,
}

/// FID between two image sets under a feature extractor.
pub fn fid(real: &Tensor, fake: &Tensor, extractor: &dyn FeatureExtractor) -> Result<FidResult> {
    let n_real = real.dim(0)?;
    let n_fake = fake.dim(0)?;
    if n_real == 0 || n_fake == 0 {
        return Err(Error::Empty("fid image set"));
    }
    let fr = extractor.extract(real)?;
    let ff = extractor.extract(fake)?;
    let value = frechet_distance(&gaussian_fit(&fr)?, &gaussian_fit(&ff)?)?;
    Ok(FidResult { fid: value, n_real, n_fake, extractor: extractor.id() })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable 'valid' Gaussian filter of one channel plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Per-channel local SSIM maps split into luminance and contrast-structure factors.
fn ssim_components(x: &[f64], y: &[f64], h: usize, w: usize, c: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    let k = gaussian_kernel();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    (0..c)
        .map(|ch| {
            let px: Vec<f64> = (0..h * w).map(|i| x[i * c + ch]).collect();
            let py: Vec<f64> = (0..h * w).map(|i| y[i * c + ch]).collect();
            let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
            let mx = filter_valid(&px, h, w, &k);
            let my = filter_valid(&py, h, w, &k);
            let sxx = filter_valid(&prod(&px, &px), h, w, &k);
            let syy = filter_valid(&prod(&py, &py), h, w, &k);
            let sxy = filter_valid(&prod(&px, &py), h, w, &k);
            let mut lum = Vec::with_capacity(mx.len());
            let mut cs = Vec::with_capacity(mx.len());
            for i in 0..mx.len() {
                let vx = sxx[i] - mx[i] * mx[i];
                let vy = syy[i] - my[i] * my[i];
                let cov = sxy[i] - mx[i] * my[i];
                lum.push((2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1));
                cs.push((2.0 * cov + c2) / (vx + vy + c2));
            }
            (lum, cs)
        })
        .collect()
}

fn image_parts(x: &Tensor) -> Result<(Vec<f64>, usize, usize, usize)> {
    let (h, w, c) = x.dims3()?;
    Ok((x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?, h, w, c))
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::shape(x.dims(), y.dims()));
    }
    Ok(())
}

/// Mean local SSIM of two `(H, W, C)` images in `[0, 1]`, averaged over channels.
///
/// Gaussian window 11, σ = 1.5, K1 = 0.01, K2 = 0.03, data range 1, valid-mode filtering.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y)?;
    let (a, h, w, c) = image_parts(x)?;
    let (b, ..) = image_parts(y)?;
    ssim_raw(&a, &b, h, w, c)
}

pub(crate) fn ssim_raw(x: &[f64], y: &[f64], h: usize, w: usize, c: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let parts = ssim_components(x, y, h, w, c);
    let per_channel: Vec<f64> = parts
        .iter()
        .map(|(l, s)| l.iter().zip(s).map(|(a, b)| a * b).sum::<f64>() / l.len() as f64)
        .collect();
    Ok(per_channel.iter().sum::<f64>() / c as f64)
}

/// Mean contrast-structure factor of SSIM (the part without the luminance term).
pub fn ssim_contrast_structure(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y)?;
    let (a, h, w, c) = image_parts(x)?;
    let (b, ..) = image_parts(y)?;
    let parts = ssim_components(&a, &b, h, w, c);
    let n = parts[0].1.len() as f64;
    Ok(parts.iter().map(|(_, s)| s.iter().sum::<f64>() / n).sum::<f64>() / c as f64)
}

/// Mean squared error on the 0–255 scale of two `[0, 1]` images.
pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y)?;
    let d = ((x - y)? * 255.0)?.to_dtype(DType::F64)?;
    Ok(d.sqr()?.mean_all()?.to_scalar::<f64>()?)
}

/// Mean SSIM and mean 0–255 MSE over aligned `(N, H, W, C)` batches.
pub fn mean_ssim_mse(x: &Tensor, y: &Tensor) -> Result<(f64, f64)> {
    check_pair(x, y)?;
    let n = x.dim(0)?;
    if n == 0 {
        return Err(Error::Empty("image batch"));
    }
    let mut s = 0.0;
    let mut m = 0.0;
    for i in 0..n {
        let (a, b) = (x.get(i)?, y.get(i)?);
        s += ssim(&a, &b)?;
        m += mse(&a, &b)?;
    }
    Ok((s / n as f64, m / n as f64))
}
