use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use histodiff::metrics::{
    cas, evaluate_accuracy, frechet_distance, gaussian_fit, mse, ssim, ClassifierConfig, ClassifierTrainConfig,
    GaussianStats, ImageClassifier,
};

fn image(seed: u64, h: usize, w: usize, c: usize) -> (Vec<f64>, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..h * w * c).map(|_| rng.random::<f64>()).collect();
    let t = Tensor::from_slice(&v, (h, w, c), &Device::Cpu).unwrap();
    (v, t)
}

/// Plain 2-D window SSIM, one window at a time.
fn ssim_oracle(x: &[f64], y: &[f64], h: usize, w: usize, c: usize) -> f64 {
    let n = 11;
    let g: Vec<f64> = (0..n).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let gsum: f64 = g.iter().sum();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        let mut count = 0;
        for i in 0..=h - n {
            for j in 0..=w - n {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..n {
                    for b in 0..n {
                        let k = g[a] * g[b] / (gsum * gsum);
                        let p = x[((i + a) * w + j + b) * c + ch];
                        let q = y[((i + a) * w + j + b) * c + ch];
                        mx += k * p;
                        my += k * q;
                        xx += k * p * p;
                        yy += k * q * q;
                        xy += k * p * q;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / c as f64
}

#[test]
fn ssim_matches_window_oracle() {
    for (seed, h, w, c) in [(1, 16, 16, 3), (2, 11, 11, 1), (3, 13, 20, 2)] {
        let (a, ta) = image(seed, h, w, c);
        let (b0, _) = image(seed + 100, h, w, c);
        // Correlated pair so the score is far from zero.
        let b: Vec<f64> = a.iter().zip(&b0).map(|(p, q)| 0.7 * p + 0.3 * q).collect();
        let tb = Tensor::from_slice(&b, (h, w, c), &Device::Cpu).unwrap();
        let got = ssim(&ta, &tb).unwrap();
        let want = ssim_oracle(&a, &b, h, w, c);
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }
}

#[test]
fn mse_matches_loop() {
    let (a, ta) = image(7, 9, 5, 3);
    let (b, tb) = image(8, 9, 5, 3);
    let want = a.iter().zip(&b).map(|(p, q)| ((p - q) * 255.0).powi(2)).sum::<f64>() / a.len() as f64;
    assert!((mse(&ta, &tb).unwrap() - want).abs() < 1e-9 * want);
    assert_eq!(mse(&ta, &ta).unwrap(), 0.0);
}

fn stats_from(seed: u64, n: usize, d: usize, shift: f64) -> GaussianStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = DMatrix::from_fn(n, d, |_, j| rng.random::<f64>() * (1.0 + j as f64) + shift);
    gaussian_fit(&m).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ssim_bounds_and_identity(seed in 0u64..1000, other in 0u64..1000) {
        let (_, a) = image(seed, 12, 12, 3);
        let (_, b) = image(other + 5000, 12, 12, 3);
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frechet_is_symmetric(a in 0u64..500, b in 0u64..500, d in 1usize..6, shift in -2.0f64..2.0) {
        let sa = stats_from(a, 40, d, 0.0);
        let sb = stats_from(b + 1000, 40, d, shift);
        let ab = frechet_distance(&sa, &sb).unwrap();
        let ba = frechet_distance(&sb, &sa).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.abs().max(1.0));
        prop_assert!(ab >= -1e-9);
    }
}

#[test]
fn frechet_of_mean_shift_is_squared_norm() {
    let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    let a = GaussianStats { mu: DVector::from_vec(vec![0.0, 0.0]), sigma: sigma.clone(), n: 0 };
    let b = GaussianStats { mu: DVector::from_vec(vec![3.0, 4.0]), sigma, n: 0 };
    assert!((frechet_distance(&a, &b).unwrap() - 25.0).abs() < 1e-8);
}

struct Fixed(Vec<u32>);

impl ImageClassifier for Fixed {
    fn predict(&self, _: &Tensor) -> histodiff::Result<Vec<u32>> {
        Ok(self.0.clone())
    }
}

#[test]
fn accuracy_counts_matches() {
    let images = Tensor::zeros((4, 2, 2, 3), DType::F32, &Device::Cpu).unwrap();
    let acc = evaluate_accuracy(&Fixed(vec![0, 1, 2, 3]), &images, &[0, 1, 0, 0]).unwrap();
    assert_eq!(acc, 0.5);
    assert!(evaluate_accuracy(&Fixed(vec![0]), &images, &[0, 1, 0, 0]).is_err());
}

#[test]
fn cas_is_bounded_and_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 24;
    let labels: Vec<u32> = (0..n).map(|i| (i % 3) as u32).collect();
    let v: Vec<f32> = labels
        .iter()
        .flat_map(|&l| (0..8 * 8 * 3).map(|_| 0.25 * l as f32 + 0.2 * rng.random::<f32>()).collect::<Vec<_>>())
        .collect();
    let images = Tensor::from_vec(v, (n, 8, 8, 3), &Device::Cpu).unwrap();
    let cfg = ClassifierConfig { image_size: 8, width: 2, num_classes: 3, aux_classes: 0 };
    let train = ClassifierTrainConfig::scaled(3, 8, 9);
    let a = cas(&images, &labels, &images, &labels, &cfg, &train).unwrap();
    let b = cas(&images, &labels, &images, &labels, &cfg, &train).unwrap();
    assert!((0.0..=1.0).contains(&a.accuracy));
    assert_eq!(a, b);
    assert_eq!((a.n_train, a.n_val, a.num_classes), (n, n, 3));
}
