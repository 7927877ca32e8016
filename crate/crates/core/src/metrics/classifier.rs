//! Small convolutional classifier used both as the desk-scale FID feature
//! extractor and as the classifier behind the accuracy score.

use std::collections::BTreeSet;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FeatureExtractor;
use crate::error::{Error, Result};
use crate::nn::{scalar_mean, Adam, AdamConfig, Checkpoint, Conv2d, Linear, LrSchedule, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub image_size: usize,
    /// Width of the first stage; the penultimate feature has `4 * width` dimensions.
    pub width: usize,
    pub num_classes: usize,
    /// Optional auxiliary head (0 disables), trained jointly on a second label set.
    pub aux_classes: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { image_size: 32, width: 16, num_classes: 4, aux_classes: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the rate is multiplied by `lr_factor`.
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    /// The 40-epoch recipe: 1e-3, divided by ten at epochs 20 and 30.
    fn default() -> Self {
        Self { epochs: 40, batch_size: 256, lr: 1e-3, lr_milestones: vec![20, 30], lr_factor: 0.1, seed: 0 }
    }
}

impl ClassifierTrainConfig {
    /// Same schedule shape compressed to `epochs`, milestones at 50% and 75%.
    pub fn scaled(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            lr_milestones: vec![epochs / 2, epochs * 3 / 4],
            seed,
            ..Default::default()
        }
    }
}

pub struct ToyClassifier {
    config: ClassifierConfig,
    store: ParamStore,
    convs: Vec<Conv2d>,
    head: Linear,
    aux_head: Option<Linear>,
}

impl ToyClassifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        if config.num_classes < 2 || config.width == 0 || config.image_size < 8 {
            return Err(Error::invalid("classifier needs >= 2 classes, positive width and images >= 8px"));
        }
        let mut store = ParamStore::new(seed, DType::F32);
        let w = config.width;
        let convs = vec![
            Conv2d::new(&mut store, "conv0", 3, w, 3, 1)?,
            Conv2d::new(&mut store, "conv1", w, 2 * w, 3, 2)?,
            Conv2d::new(&mut store, "conv2", 2 * w, 4 * w, 3, 2)?,
            Conv2d::new(&mut store, "conv3", 4 * w, 4 * w, 3, 2)?,
        ];
        let head = Linear::new(&mut store, "head", 4 * w, config.num_classes)?;
        let aux_head = if config.aux_classes > 0 {
            Some(Linear::new(&mut store, "aux_head", 4 * w, config.aux_classes)?)
        } else {
            None
        };
        Ok(Self { config, store, convs, head, aux_head })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    /// Penultimate features `(N, 4·width)`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        let s = self.config.image_size;
        match images.dims() {
            [_, h, w, 3] if *h == s && *w == s => {}
            other => return Err(Error::shape(format!("(N, {s}, {s}, 3)"), other)),
        }
        let mut h = ((images * 2.0)? - 1.0)?;
        for conv in &self.convs {
            h = conv.forward(&h)?.silu()?;
        }
        Ok(h.mean(1)?.mean(1)?)
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.features(images)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::new("classifier", &self.config)?.with_tensors("", self.store.tensors()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?.expect_kind("classifier", path)?;
        let clf = Self::new(ck.config()?, 0)?;
        clf.store.assign(&ck.tensors)?;
        Ok(clf)
    }

    fn fingerprint(&self) -> String {
        let sum: f64 = self
            .store
            .named_vars()
            .map(|(_, v)| scalar_mean(&v.as_tensor().abs().unwrap()).unwrap_or(0.0))
            .sum();
        format!("{:08x}", (sum * 1e6) as u64 & 0xffff_ffff)
    }
}

/// Anything that assigns a class id to each image of a batch.
pub trait ImageClassifier {
    fn predict(&self, images: &Tensor) -> Result<Vec<u32>>;
}

impl ImageClassifier for ToyClassifier {
    fn predict(&self, images: &Tensor) -> Result<Vec<u32>> {
        let n = images.dim(0)?;
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(512) {
            let chunk = images.narrow(0, start, (n - start).min(512))?;
            out.extend(self.logits(&chunk)?.argmax(D::Minus1)?.to_vec1::<u32>()?);
        }
        Ok(out)
    }
}

impl FeatureExtractor for ToyClassifier {
    fn id(&self) -> String {
        format!("toy-classifier-{}d-{}", self.feature_dim(), self.fingerprint())
    }

    fn feature_dim(&self) -> usize {
        4 * self.config.width
    }

    fn extract(&self, images: &Tensor) -> Result<DMatrix<f64>> {
        let n = images.dim(0)?;
        let d = self.feature_dim();
        let mut values = Vec::with_capacity(n * d);
        for start in (0..n).step_by(512) {
            let chunk = images.narrow(0, start, (n - start).min(512))?;
            values.extend(self.features(&chunk)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
        }
        Ok(DMatrix::from_row_slice(n, d, &values))
    }
}

fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let classes = logits.dim(1)?;
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let logp = shifted.broadcast_sub(&shifted.exp()?.sum_keepdim(D::Minus1)?.log()?)?;
    let mut onehot = vec![0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * classes + l as usize] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (labels.len(), classes), &Device::Cpu)?.to_dtype(logp.dtype())?;
    Ok((logp * onehot)?.sum(1)?.neg()?.mean_all()?)
}

fn check_labels(labels: &[u32], classes: usize, what: &str) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::invalid(format!("{what} label {bad} outside [0, {classes})")));
    }
    Ok(())
}

/// Trains a fresh classifier; returns it with the mean loss of each epoch.
pub fn train_classifier(
    images: &Tensor,
    labels: &[u32],
    aux_labels: Option<&[u32]>,
    config: &ClassifierConfig,
    train: &ClassifierTrainConfig,
) -> Result<(ToyClassifier, Vec<f64>)> {
    let n = images.dim(0)?;
    if n == 0 {
        return Err(Error::Empty("classifier training set"));
    }
    if labels.len() != n {
        return Err(Error::shape(n, labels.len()));
    }
    check_labels(labels, config.num_classes, "class")?;
    match (aux_labels, config.aux_classes) {
        (Some(aux), k) if k > 0 => {
            if aux.len() != n {
                return Err(Error::shape(n, aux.len()));
            }
            check_labels(aux, k, "auxiliary")?;
        }
        (None, 0) => {}
        _ => return Err(Error::invalid("auxiliary labels and aux_classes must be given together")),
    }
    let clf = ToyClassifier::new(config.clone(), train.seed)?;
    let batch = train.batch_size.clamp(1, n);
    let steps_per_epoch = n.div_ceil(batch);
    let schedule = LrSchedule::Staged {
        milestones: train.lr_milestones.iter().map(|e| e * steps_per_epoch).collect(),
        factor: train.lr_factor,
    };
    let adam = AdamConfig { lr: train.lr, max_grad_norm: None, ..Default::default() };
    let mut opt = Adam::new(clf.store.vars(), adam, schedule)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xc1a5_5);
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut curve = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let idx = Tensor::from_slice(chunk, chunk.len(), &Device::Cpu)?;
            let x = images.index_select(&idx, 0)?;
            let y: Vec<u32> = chunk.iter().map(|&i| labels[i as usize]).collect();
            let feats = clf.features(&x)?;
            let mut loss = cross_entropy(&clf.head.forward(&feats)?, &y)?;
            if let (Some(head), Some(aux)) = (&clf.aux_head, aux_labels) {
                let ya: Vec<u32> = chunk.iter().map(|&i| aux[i as usize]).collect();
                loss = (loss + cross_entropy(&head.forward(&feats)?, &ya)?)?;
            }
            let value = scalar_mean(&loss)?;
            if !value.is_finite() {
                return Err(Error::Divergence { step: epoch, loss: value });
            }
            opt.backward_step(&loss)?;
            total += value * chunk.len() as f64;
        }
        curve.push(total / n as f64);
    }
    Ok((clf, curve))
}

/// Fraction of `labels` predicted correctly.
pub fn evaluate_accuracy(clf: &dyn ImageClassifier, images: &Tensor, labels: &[u32]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let pred = clf.predict(images)?;
    if pred.len() != labels.len() {
        return Err(Error::shape(labels.len(), pred.len()));
    }
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Share of the most frequent label.
pub fn majority_prior(labels: &[u32]) -> f64 {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    counts.values().max().copied().unwrap_or(0) as f64 / labels.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasReport {
    pub accuracy: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub num_classes: usize,
    pub train_loss: Vec<f64>,
}

/// Classification accuracy score: train on (synthetic) images, evaluate on real ones.
pub fn cas(
    train_images: &Tensor,
    train_labels: &[u32],
    val_images: &Tensor,
    val_labels: &[u32],
    config: &ClassifierConfig,
    train: &ClassifierTrainConfig,
) -> Result<CasReport> {
    if train_labels.is_empty() || val_labels.is_empty() {
        return Err(Error::Empty("CAS image set"));
    }
    let a: BTreeSet<_> = train_labels.iter().collect();
    let b: BTreeSet<_> = val_labels.iter().collect();
    if a != b {
        return Err(Error::invalid(format!("label spaces differ: {a:?} vs {b:?}")));
    }
    let (clf, train_loss) = train_classifier(train_images, train_labels, None, config, train)?;
    let accuracy = evaluate_accuracy(&clf, val_images, val_labels)?;
    Ok(CasReport {
        accuracy,
        n_train: train_labels.len(),
        n_val: val_labels.len(),
        num_classes: config.num_classes,
        train_loss,
    })
}
