//! The binary classifier and the test-time novelty score.
//!
//! The classifier is a small convolutional net (stride-2 stages, global
//! average pooling, one linear head) emitting a single logit per image. The
//! novelty score of a query runs the query through the frozen reconstructor,
//! mixes query and reconstruction with the shared mixing operation, and reads
//! the classifier's positive-class probability; novelty is its complement.

use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::connective::{connective_positive, ConnectiveDataset};
use crate::error::{Error, Result};
use crate::nn::{
    fixed_chunks, global_avg_pool, global_avg_pool_backward, relu, relu_backward, sigmoid, Adam,
    AdamParams, Conv2d, Conv2dGrad, FlatParams, Linear, LinearGrad,
};
use crate::reconstructor::{reconstruct, ReconstructorModel, TrainHistory};

/// Default per-stage widths of the classifier.
pub const DEFAULT_CLF_WIDTHS: [usize; 3] = [32, 64, 128];

/// Architecture descriptor for checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfArch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
}

/// Convolutional binary classifier: per image, one logit; probability is its
/// logistic.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    arch: ClfArch,
    convs: Vec<Conv2d>,
    fc: Linear,
}

#[derive(Debug, Clone)]
pub struct ClfGrads {
    convs: Vec<Conv2dGrad>,
    fc: LinearGrad,
}

impl ClfGrads {
    pub fn zeros_like(m: &ClassifierModel) -> Self {
        Self {
            convs: m.convs.iter().map(Conv2dGrad::zeros_like).collect(),
            fc: LinearGrad::zeros_like(&m.fc),
        }
    }

    pub fn accumulate(&mut self, other: &Self) {
        let mut mine = self.flat_mut();
        let theirs = other.flat();
        for (m, t) in mine.iter_mut().zip(theirs.iter()) {
            for (a, b) in m.iter_mut().zip(t.iter()) {
                *a += *b;
            }
        }
    }
}

impl FlatParams for ClassifierModel {
    fn flat(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.extend(c.flat());
        }
        out.extend(self.fc.flat());
        out
    }

    fn flat_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.extend(c.flat_mut());
        }
        out.extend(self.fc.flat_mut());
        out
    }
}

impl FlatParams for ClfGrads {
    fn flat(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.extend(c.flat());
        }
        out.extend(self.fc.flat());
        out
    }

    fn flat_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.extend(c.flat_mut());
        }
        out.extend(self.fc.flat_mut());
        out
    }
}

/// Build a classifier with explicit stage widths.
pub fn build_classifier_with_widths(
    image_shape: (usize, usize, usize),
    widths: &[usize],
    seed: u64,
) -> Result<ClassifierModel> {
    let (channels, height, width) = image_shape;
    if channels == 0 || height == 0 || width == 0 {
        return Err(Error::Config("image shape must be nonzero".into()));
    }
    if widths.is_empty() || widths.iter().any(|&w| w == 0) {
        return Err(Error::Config("classifier widths must be positive".into()));
    }
    // Every stride-2 stage must leave at least one spatial position.
    let (mut h, mut w) = (height, width);
    for _ in widths {
        h = (h + 2 - 3) / 2 + 1;
        w = (w + 2 - 3) / 2 + 1;
        if h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "image {height}x{width} too small for {} stride-2 stages",
                widths.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut convs = Vec::with_capacity(widths.len());
    let mut in_ch = channels;
    for &w in widths {
        convs.push(Conv2d::new(in_ch, w, 3, 2, 1, &mut rng));
        in_ch = w;
    }
    let fc = Linear::new(in_ch, 1, &mut rng);
    Ok(ClassifierModel {
        arch: ClfArch {
            channels,
            height,
            width,
            widths: widths.to_vec(),
        },
        convs,
        fc,
    })
}

/// Build a classifier with the default widths; deterministic in `seed`.
pub fn build_classifier(image_shape: (usize, usize, usize), seed: u64) -> Result<ClassifierModel> {
    build_classifier_with_widths(image_shape, &DEFAULT_CLF_WIDTHS, seed)
}

struct ClfCache {
    conv_cols: Vec<(Array2<f32>, (usize, usize))>,
    pre_relu: Vec<Array3<f32>>,
    gap_in_hw: (usize, usize),
    features: Array1<f32>,
    logit: f32,
}

impl ClassifierModel {
    pub fn arch(&self) -> &ClfArch {
        &self.arch
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.arch.channels, self.arch.height, self.arch.width)
    }

    /// Width of the penultimate (pooled feature) layer.
    pub fn feature_dim(&self) -> usize {
        *self.arch.widths.last().unwrap()
    }

    /// Pooled feature vector for one image (input to the linear head).
    pub fn features_image(&self, x: &ArrayView3<f32>) -> Array1<f32> {
        let mut h = x.to_owned();
        for conv in &self.convs {
            let z = conv.forward(&h.view());
            h = relu(&z.view());
        }
        global_avg_pool(&h.view())
    }

    /// Raw logit for one image.
    pub fn logit_image(&self, x: &ArrayView3<f32>) -> f32 {
        let feats = self.features_image(x);
        self.fc.forward(&feats)[0]
    }

    fn forward_cached(&self, x: &ArrayView3<f32>) -> ClfCache {
        let mut conv_cols = Vec::with_capacity(self.convs.len());
        let mut pre_relu = Vec::with_capacity(self.convs.len());
        let mut h = x.to_owned();
        for conv in &self.convs {
            let in_hw = (h.dim().1, h.dim().2);
            let (z, cols) = conv.forward_cached(&h.view());
            conv_cols.push((cols, in_hw));
            h = relu(&z.view());
            pre_relu.push(z);
        }
        let gap_in_hw = (h.dim().1, h.dim().2);
        let features = global_avg_pool(&h.view());
        let logit = self.fc.forward(&features)[0];
        ClfCache {
            conv_cols,
            pre_relu,
            gap_in_hw,
            features,
            logit,
        }
    }

    fn backward(&self, cache: &ClfCache, d_logit: f32, grads: &mut ClfGrads) {
        let dy = ndarray::arr1(&[d_logit]);
        let d_feat = self.fc.backward(&cache.features, &dy, &mut grads.fc);
        let mut dh = global_avg_pool_backward(&d_feat, cache.gap_in_hw.0, cache.gap_in_hw.1);
        for i in (0..self.convs.len()).rev() {
            let dz = relu_backward(&cache.pre_relu[i].view(), &dh.view());
            let (cols, in_hw) = &cache.conv_cols[i];
            dh = self.convs[i].backward(cols, &dz.view(), *in_hw, &mut grads.convs[i]);
        }
    }
}

/// Positive-class probabilities for a batch (parallel over images).
pub fn classify_probs(model: &ClassifierModel, batch: &ImageBatch) -> Result<Vec<f32>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    if batch.image_shape() != model.image_shape() {
        return Err(Error::shape(
            format!("{:?}", model.image_shape()),
            format!("{:?}", batch.image_shape()),
        ));
    }
    Ok((0..batch.len())
        .into_par_iter()
        .map(|i| sigmoid(model.logit_image(&batch.image(i))))
        .collect())
}

/// Pooled features for a batch, one row per image.
pub fn classifier_features(model: &ClassifierModel, batch: &ImageBatch) -> Result<Array2<f32>> {
    if batch.image_shape() != model.image_shape() {
        return Err(Error::shape(
            format!("{:?}", model.image_shape()),
            format!("{:?}", batch.image_shape()),
        ));
    }
    let rows: Vec<Array1<f32>> = (0..batch.len())
        .into_par_iter()
        .map(|i| model.features_image(&batch.image(i)))
        .collect();
    let mut out = Array2::zeros((batch.len(), model.feature_dim()));
    for (i, r) in rows.iter().enumerate() {
        out.row_mut(i).assign(r);
    }
    Ok(out)
}

/// Training hyperparameters for the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClfTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for ClfTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Binary cross-entropy with logits, numerically stable.
fn bce_with_logits(logit: f32, label: f32) -> f64 {
    let z = logit as f64;
    let y = label as f64;
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// One epoch over `(images, labels)` in the given order; returns per-step
/// mean losses.
fn run_epoch(
    model: &mut ClassifierModel,
    adam: &mut Adam,
    images: &ImageBatch,
    labels: &[u8],
    order: &[usize],
    batch_size: usize,
) -> Vec<f64> {
    let mut step_losses = Vec::new();
    for batch_idx in order.chunks(batch_size) {
        let n = batch_idx.len();
        let chunks = fixed_chunks(n);
        let partials: Vec<(ClfGrads, f64)> = chunks
            .par_iter()
            .map(|range| {
                let mut grads = ClfGrads::zeros_like(model);
                let mut loss = 0.0f64;
                for k in range.clone() {
                    let idx = batch_idx[k];
                    let x = images.image(idx);
                    let y = labels[idx] as f32;
                    let cache = model.forward_cached(&x);
                    loss += bce_with_logits(cache.logit, y);
                    let d_logit = (sigmoid(cache.logit) - y) / n as f32;
                    model.backward(&cache, d_logit, &mut grads);
                }
                (grads, loss)
            })
            .collect();
        let mut total = ClfGrads::zeros_like(model);
        let mut loss_sum = 0.0f64;
        for (g, l) in &partials {
            total.accumulate(g);
            loss_sum += l;
        }
        let flat_grads = total.flat();
        let mut flat_params = model.flat_mut();
        adam.step(&mut flat_params, &flat_grads);
        step_losses.push(loss_sum / n as f64);
    }
    step_losses
}

/// Train on a materialized connective dataset (or any labeled image set).
/// Shuffles each epoch from the seed; deterministic regardless of threads.
pub fn train_classifier_arrays(
    mut model: ClassifierModel,
    images: &ImageBatch,
    labels: &[u8],
    cfg: &ClfTrainConfig,
) -> Result<(ClassifierModel, TrainHistory)> {
    if images.len() != labels.len() {
        return Err(Error::shape(
            format!("{} labels", images.len()),
            format!("{} labels", labels.len()),
        ));
    }
    if images.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if images.image_shape() != model.image_shape() {
        return Err(Error::shape(
            format!("{:?}", model.image_shape()),
            format!("{:?}", images.image_shape()),
        ));
    }
    let has_pos = labels.iter().any(|&l| l == 1);
    let has_neg = labels.iter().any(|&l| l == 0);
    if !(has_pos && has_neg) {
        return Err(Error::Config(
            "training set must contain both labels".into(),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }

    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamParams::with_learning_rate(cfg.learning_rate));
    let mut order: Vec<usize> = (0..images.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let steps = run_epoch(&mut model, &mut adam, images, labels, &order, cfg.batch_size);
        let mean = steps.iter().sum::<f64>() / steps.len() as f64;
        history.step_losses.extend(steps);
        history.epoch_mean_loss.push(mean);
    }
    Ok((model, history))
}

/// Train on a [`ConnectiveDataset`].
pub fn train_classifier(
    model: ClassifierModel,
    dataset: &ConnectiveDataset,
    cfg: &ClfTrainConfig,
) -> Result<(ClassifierModel, TrainHistory)> {
    train_classifier_arrays(model, &dataset.images, &dataset.labels, cfg)
}

/// Train while regenerating the connective set every epoch (epoch `e` uses a
/// seed derived from the dataset seed and `e`). Trades reproducibility of a
/// materialized file for fresh negatives per epoch; still fully deterministic.
pub fn train_classifier_per_epoch(
    mut model: ClassifierModel,
    recon: &ReconstructorModel,
    positives: &ImageBatch,
    mix: &crate::connective::MixConfig,
    corr: &crate::corruptions::CorruptionConfig,
    dataset_seed: u64,
    cfg: &ClfTrainConfig,
) -> Result<(ClassifierModel, TrainHistory)> {
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamParams::with_learning_rate(cfg.learning_rate));
    for epoch in 0..cfg.epochs {
        let ds = crate::connective::build_connective_dataset(
            recon,
            positives,
            mix,
            corr,
            dataset_seed.wrapping_add(epoch as u64),
        )?;
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        let steps = run_epoch(&mut model, &mut adam, &ds.images, &ds.labels, &order, cfg.batch_size);
        let mean = steps.iter().sum::<f64>() / steps.len() as f64;
        history.step_losses.extend(steps);
        history.epoch_mean_loss.push(mean);
    }
    Ok((model, history))
}

/// Test-time score: probability that `x` is in-distribution, computed as the
/// classifier's logistic output on the mix of `x` with its reconstruction.
/// Novelty is `1 - score`. Pure given frozen models.
pub fn novelty_score(
    recon: &ReconstructorModel,
    clf: &ClassifierModel,
    batch: &ImageBatch,
    lambda: f32,
) -> Result<Vec<f32>> {
    let x_rec = reconstruct(recon, batch)?;
    // Single source of truth: the same mixing operation used for dataset
    // synthesis.
    let mixed = connective_positive(batch, &x_rec, lambda)?;
    classify_probs(clf, &mixed)
}

/// Threshold probabilities into binary labels; 1 iff `score >= threshold`.
pub fn predict_label(scores: &[f32], threshold: f32) -> Result<Vec<u8>> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(Error::parameter("threshold", "must be in (0, 1)"));
    }
    Ok(scores
        .iter()
        .map(|&s| if s >= threshold { 1 } else { 0 })
        .collect())
}

/// Fraction of predictions matching labels at threshold 0.5.
pub fn training_accuracy(model: &ClassifierModel, images: &ImageBatch, labels: &[u8]) -> Result<f64> {
    let probs = classify_probs(model, images)?;
    let preds = predict_label(&probs, 0.5)?;
    let correct = preds
        .iter()
        .zip(labels.iter())
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reconstructor::build_reconstructor;
    use ndarray::Array4;

    fn random_batch(n: usize, c: usize, h: usize, w: usize, seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arr = Array4::<f32>::zeros((n, c, h, w));
        for v in arr.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        ImageBatch::new(arr).unwrap()
    }

    #[test]
    fn forward_yields_one_logit_per_image() {
        let model = build_classifier((1, 28, 28), 3).unwrap();
        let batch = random_batch(5, 1, 28, 28, 1);
        let probs = classify_probs(&model, &batch).unwrap();
        assert_eq!(probs.len(), 5);
        assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn build_is_deterministic() {
        let a = build_classifier((1, 28, 28), 3).unwrap();
        let b = build_classifier((1, 28, 28), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rgb_shape_contract() {
        let model = build_classifier((3, 64, 64), 5).unwrap();
        let batch = random_batch(2, 3, 64, 64, 2);
        let probs = classify_probs(&model, &batch).unwrap();
        assert_eq!(probs.len(), 2);
        assert_eq!(model.feature_dim(), 128);
    }

    #[test]
    fn separable_dataset_reaches_full_accuracy() {
        // All-zero images labeled 0, all-0.9 images labeled 1.
        let mut arr = Array4::<f32>::zeros((32, 1, 8, 8));
        let mut labels = Vec::new();
        for i in 0..32 {
            if i % 2 == 0 {
                labels.push(0u8);
            } else {
                for v in arr.index_axis_mut(ndarray::Axis(0), i).iter_mut() {
                    *v = 0.9;
                }
                labels.push(1u8);
            }
        }
        let images = ImageBatch::new(arr).unwrap();
        let model = build_classifier_with_widths((1, 8, 8), &[8, 16], 7).unwrap();
        let cfg = ClfTrainConfig {
            epochs: 5,
            batch_size: 8,
            learning_rate: 5e-3,
            seed: 1,
        };
        let (trained, history) = train_classifier_arrays(model, &images, &labels, &cfg).unwrap();
        assert_eq!(training_accuracy(&trained, &images, &labels).unwrap(), 1.0);
        assert!(history.epoch_mean_loss.last().unwrap() < &history.epoch_mean_loss[0]);
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let images = random_batch(4, 1, 8, 8, 3);
        let labels = vec![0, 1, 0, 1];
        let model = build_classifier_with_widths((1, 8, 8), &[4], 9).unwrap();
        let before = model.clone();
        let cfg = ClfTrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (after, history) = train_classifier_arrays(model, &images, &labels, &cfg).unwrap();
        assert_eq!(before, after);
        assert!(history.step_losses.is_empty());
    }

    #[test]
    fn single_label_dataset_rejected() {
        let images = random_batch(4, 1, 8, 8, 4);
        let labels = vec![1, 1, 1, 1];
        let model = build_classifier_with_widths((1, 8, 8), &[4], 9).unwrap();
        assert!(train_classifier_arrays(model, &images, &labels, &ClfTrainConfig::default()).is_err());
    }

    #[test]
    fn training_is_replayable() {
        let images = random_batch(12, 1, 8, 8, 5);
        let labels: Vec<u8> = (0..12).map(|i| (i % 2) as u8).collect();
        let cfg = ClfTrainConfig {
            epochs: 2,
            batch_size: 4,
            learning_rate: 1e-3,
            seed: 11,
        };
        let m1 = build_classifier_with_widths((1, 8, 8), &[4, 8], 2).unwrap();
        let m2 = build_classifier_with_widths((1, 8, 8), &[4, 8], 2).unwrap();
        let (t1, h1) = train_classifier_arrays(m1, &images, &labels, &cfg).unwrap();
        let (t2, h2) = train_classifier_arrays(m2, &images, &labels, &cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn lambda_one_score_equals_classifier_on_raw_input() {
        let recon = build_reconstructor((1, 8, 8), &[4, 8], 1).unwrap();
        let clf = build_classifier_with_widths((1, 8, 8), &[4, 8], 2).unwrap();
        let batch = random_batch(3, 1, 8, 8, 6);
        let scores = novelty_score(&recon, &clf, &batch, 1.0).unwrap();
        let direct = classify_probs(&clf, &batch).unwrap();
        assert_eq!(scores, direct);
    }

    #[test]
    fn score_is_pure() {
        let recon = build_reconstructor((1, 8, 8), &[4, 8], 3).unwrap();
        let clf = build_classifier_with_widths((1, 8, 8), &[4, 8], 4).unwrap();
        let batch = random_batch(3, 1, 8, 8, 7);
        let a = novelty_score(&recon, &clf, &batch, 0.5).unwrap();
        let b = novelty_score(&recon, &clf, &batch, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn score_composes_mixing_and_classifier() {
        // Eq-by-eq composition: score == classifier(mix(x, reconstruct(x))).
        let recon = build_reconstructor((1, 8, 8), &[4, 8], 5).unwrap();
        let clf = build_classifier_with_widths((1, 8, 8), &[4, 8], 6).unwrap();
        let batch = random_batch(4, 1, 8, 8, 8);
        let lambda = 0.5;
        let scores = novelty_score(&recon, &clf, &batch, lambda).unwrap();
        let x_rec = reconstruct(&recon, &batch).unwrap();
        let mixed = connective_positive(&batch, &x_rec, lambda).unwrap();
        let direct = classify_probs(&clf, &mixed).unwrap();
        assert_eq!(scores, direct);
    }

    #[test]
    fn predict_label_tie_goes_to_positive() {
        let labels = predict_label(&[0.9, 0.1, 0.5], 0.5).unwrap();
        assert_eq!(labels, vec![1, 0, 1]);
        let all_ties = predict_label(&[0.5, 0.5], 0.5).unwrap();
        assert_eq!(all_ties, vec![1, 1]);
    }

    #[test]
    fn predict_label_threshold_domain() {
        assert!(predict_label(&[0.5], 0.0).is_err());
        assert!(predict_label(&[0.5], 1.0).is_err());
    }

    #[test]
    fn features_have_penultimate_width() {
        let clf = build_classifier_with_widths((1, 8, 8), &[4, 8], 2).unwrap();
        let batch = random_batch(5, 1, 8, 8, 9);
        let feats = classifier_features(&clf, &batch).unwrap();
        assert_eq!(feats.dim(), (5, 8));
    }
}
