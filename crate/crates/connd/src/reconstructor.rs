//! The reconstructor: a UNet-style autoencoder whose skip connections are all
//! local (residual blocks inside each stage). There is deliberately no
//! encoder-to-decoder connection: every path from input to output runs
//! through the bottleneck, so input corruption cannot tunnel past the latent
//! representation. Trained by denoising corrupted positives against the clean
//! image under the Charbonnier loss.

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::corruptions::{add_gaussian_noise, coarse_dropout, CorruptionConfig};
use crate::error::{Error, Result};
use crate::nn::{
    fixed_chunks, relu, relu_backward, sigmoid, upsample2x, upsample2x_backward, Adam, AdamParams,
    Conv2d, Conv2dGrad, FlatParams,
};

/// Pre-activation residual block: `y = skip(x) + conv2(relu(conv1(relu(x))))`
/// where `skip` is the identity, or a 1x1 projection when widths differ.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub proj: Option<Conv2d>,
}

#[derive(Debug, Clone)]
pub struct ResBlockGrad {
    pub conv1: Conv2dGrad,
    pub conv2: Conv2dGrad,
    pub proj: Option<Conv2dGrad>,
}

pub(crate) struct ResBlockCache {
    x: Array3<f32>,
    cols1: Array2<f32>,
    z1: Array3<f32>,
    cols2: Array2<f32>,
    proj_cols: Option<Array2<f32>>,
}

impl ResBlock {
    fn new<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv2d::new(in_ch, out_ch, 3, 1, 1, rng),
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, rng),
            proj: if in_ch == out_ch {
                None
            } else {
                Some(Conv2d::new(in_ch, out_ch, 1, 1, 0, rng))
            },
        }
    }

    fn forward(&self, x: &ArrayView3<f32>) -> Array3<f32> {
        let h0 = relu(x);
        let z1 = self.conv1.forward(&h0.view());
        let h1 = relu(&z1.view());
        let z2 = self.conv2.forward(&h1.view());
        match &self.proj {
            Some(p) => z2 + p.forward(x),
            None => z2 + x,
        }
    }

    fn forward_cached(&self, x: &ArrayView3<f32>) -> (Array3<f32>, ResBlockCache) {
        let h0 = relu(x);
        let (z1, cols1) = self.conv1.forward_cached(&h0.view());
        let h1 = relu(&z1.view());
        let (z2, cols2) = self.conv2.forward_cached(&h1.view());
        let (y, proj_cols) = match &self.proj {
            Some(p) => {
                let (s, pc) = p.forward_cached(x);
                (z2 + s, Some(pc))
            }
            None => (z2 + x, None),
        };
        (
            y,
            ResBlockCache {
                x: x.to_owned(),
                cols1,
                z1,
                cols2,
                proj_cols,
            },
        )
    }

    fn backward(
        &self,
        cache: &ResBlockCache,
        dy: &ArrayView3<f32>,
        grad: &mut ResBlockGrad,
    ) -> Array3<f32> {
        let (_, h, w) = cache.z1.dim();
        let dh1 = self.conv2.backward(&cache.cols2, dy, (h, w), &mut grad.conv2);
        let dz1 = relu_backward(&cache.z1.view(), &dh1.view());
        let (_, xh, xw) = cache.x.dim();
        let dh0 = self
            .conv1
            .backward(&cache.cols1, &dz1.view(), (xh, xw), &mut grad.conv1);
        let dx_branch = relu_backward(&cache.x.view(), &dh0.view());
        let dx_skip = match (&self.proj, &cache.proj_cols, &mut grad.proj) {
            (Some(p), Some(pc), Some(pg)) => p.backward(pc, dy, (xh, xw), pg),
            _ => dy.to_owned(),
        };
        dx_branch + dx_skip
    }
}

impl ResBlockGrad {
    fn zeros_like(b: &ResBlock) -> Self {
        Self {
            conv1: Conv2dGrad::zeros_like(&b.conv1),
            conv2: Conv2dGrad::zeros_like(&b.conv2),
            proj: b.proj.as_ref().map(Conv2dGrad::zeros_like),
        }
    }
}

/// One decoder stage: nearest-neighbor upsample, a 3x3 width-reducing
/// convolution, then a residual block at the restored resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DecStage {
    pub conv: Conv2d,
    pub block: ResBlock,
}

#[derive(Debug, Clone)]
pub struct DecStageGrad {
    pub conv: Conv2dGrad,
    pub block: ResBlockGrad,
}

/// Architecture descriptor: enough to rebuild the parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconArch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
}

/// The short-skip UNet. Stage `i` runs at 1/2^i of the input resolution;
/// the first stage keeps full resolution, so `widths.len() - 1` is the number
/// of downsampling steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructorModel {
    arch: ReconArch,
    enc_blocks: Vec<ResBlock>,
    down_convs: Vec<Conv2d>,
    bottleneck: ResBlock,
    dec_stages: Vec<DecStage>,
    head: Conv2d,
}

pub(crate) struct ReconCache {
    enc_block_caches: Vec<ResBlockCache>,
    down_cols: Vec<(Array2<f32>, (usize, usize))>,
    bottleneck_cache: ResBlockCache,
    dec_caches: Vec<(Array2<f32>, (usize, usize), ResBlockCache)>,
    head_cols: Array2<f32>,
    head_in_hw: (usize, usize),
    output: Array3<f32>,
}

#[derive(Debug, Clone)]
pub struct ReconGrads {
    enc_blocks: Vec<ResBlockGrad>,
    down_convs: Vec<Conv2dGrad>,
    bottleneck: ResBlockGrad,
    dec_stages: Vec<DecStageGrad>,
    head: Conv2dGrad,
}

impl ReconGrads {
    pub fn zeros_like(m: &ReconstructorModel) -> Self {
        Self {
            enc_blocks: m.enc_blocks.iter().map(ResBlockGrad::zeros_like).collect(),
            down_convs: m.down_convs.iter().map(Conv2dGrad::zeros_like).collect(),
            bottleneck: ResBlockGrad::zeros_like(&m.bottleneck),
            dec_stages: m
                .dec_stages
                .iter()
                .map(|s| DecStageGrad {
                    conv: Conv2dGrad::zeros_like(&s.conv),
                    block: ResBlockGrad::zeros_like(&s.block),
                })
                .collect(),
            head: Conv2dGrad::zeros_like(&m.head),
        }
    }

    /// Elementwise accumulate another gradient buffer (fixed order).
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

fn flat_block<'a>(b: &'a ResBlock, out: &mut Vec<&'a [f32]>) {
    out.extend(b.conv1.flat());
    out.extend(b.conv2.flat());
    if let Some(p) = &b.proj {
        out.extend(p.flat());
    }
}

fn flat_block_mut<'a>(b: &'a mut ResBlock, out: &mut Vec<&'a mut [f32]>) {
    out.extend(b.conv1.flat_mut());
    out.extend(b.conv2.flat_mut());
    if let Some(p) = &mut b.proj {
        out.extend(p.flat_mut());
    }
}

fn flat_block_grad<'a>(b: &'a ResBlockGrad, out: &mut Vec<&'a [f32]>) {
    out.extend(b.conv1.flat());
    out.extend(b.conv2.flat());
    if let Some(p) = &b.proj {
        out.extend(p.flat());
    }
}

fn flat_block_grad_mut<'a>(b: &'a mut ResBlockGrad, out: &mut Vec<&'a mut [f32]>) {
    out.extend(b.conv1.flat_mut());
    out.extend(b.conv2.flat_mut());
    if let Some(p) = &mut b.proj {
        out.extend(p.flat_mut());
    }
}

impl FlatParams for ReconstructorModel {
    fn flat(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for (i, b) in self.enc_blocks.iter().enumerate() {
            if i > 0 {
                out.extend(self.down_convs[i - 1].flat());
            }
            flat_block(b, &mut out);
        }
        flat_block(&self.bottleneck, &mut out);
        for s in &self.dec_stages {
            out.extend(s.conv.flat());
            flat_block(&s.block, &mut out);
        }
        out.extend(self.head.flat());
        out
    }

    fn flat_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        let n = self.enc_blocks.len();
        let mut down_iter = self.down_convs.iter_mut();
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            if i > 0 && i < n {
                out.extend(down_iter.next().expect("down conv per deeper stage").flat_mut());
            }
            flat_block_mut(b, &mut out);
        }
        flat_block_mut(&mut self.bottleneck, &mut out);
        for s in &mut self.dec_stages {
            out.extend(s.conv.flat_mut());
            flat_block_mut(&mut s.block, &mut out);
        }
        out.extend(self.head.flat_mut());
        out
    }
}

impl FlatParams for ReconGrads {
    fn flat(&self) -> Vec<&[f32]> {
        let mut out = Vec::new();
        for (i, b) in self.enc_blocks.iter().enumerate() {
            if i > 0 {
                out.extend(self.down_convs[i - 1].flat());
            }
            flat_block_grad(b, &mut out);
        }
        flat_block_grad(&self.bottleneck, &mut out);
        for s in &self.dec_stages {
            out.extend(s.conv.flat());
            flat_block_grad(&s.block, &mut out);
        }
        out.extend(self.head.flat());
        out
    }

    fn flat_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::new();
        let n = self.enc_blocks.len();
        let mut down_iter = self.down_convs.iter_mut();
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            if i > 0 && i < n {
                out.extend(down_iter.next().expect("down conv per deeper stage").flat_mut());
            }
            flat_block_grad_mut(b, &mut out);
        }
        flat_block_grad_mut(&mut self.bottleneck, &mut out);
        for s in &mut self.dec_stages {
            out.extend(s.conv.flat_mut());
            flat_block_grad_mut(&mut s.block, &mut out);
        }
        out.extend(self.head.flat_mut());
        out
    }
}

/// Build a reconstructor for images of `image_shape = (channels, height,
/// width)` with per-stage channel widths. Height and width must be divisible
/// by `2^(widths.len() - 1)`. Initialization is deterministic in `seed`.
pub fn build_reconstructor(
    image_shape: (usize, usize, usize),
    widths: &[usize],
    seed: u64,
) -> Result<ReconstructorModel> {
    let (channels, height, width) = image_shape;
    if widths.is_empty() {
        return Err(Error::Config("widths must not be empty".into()));
    }
    if widths.iter().any(|&w| w == 0) || channels == 0 {
        return Err(Error::Config("channel widths must be positive".into()));
    }
    let down_steps = widths.len() - 1;
    let factor = 1usize << down_steps;
    if height == 0 || width == 0 || height % factor != 0 || width % factor != 0 {
        return Err(Error::Config(format!(
            "spatial dims ({height}, {width}) must be divisible by 2^{down_steps} = {factor}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc_blocks = Vec::with_capacity(widths.len());
    let mut down_convs = Vec::with_capacity(down_steps);
    enc_blocks.push(ResBlock::new(channels, widths[0], &mut rng));
    for i in 1..widths.len() {
        down_convs.push(Conv2d::new(widths[i - 1], widths[i], 3, 2, 1, &mut rng));
        enc_blocks.push(ResBlock::new(widths[i], widths[i], &mut rng));
    }
    let bottleneck = ResBlock::new(*widths.last().unwrap(), *widths.last().unwrap(), &mut rng);
    let mut dec_stages = Vec::with_capacity(down_steps);
    for i in (0..down_steps).rev() {
        dec_stages.push(DecStage {
            conv: Conv2d::new(widths[i + 1], widths[i], 3, 1, 1, &mut rng),
            block: ResBlock::new(widths[i], widths[i], &mut rng),
        });
    }
    let head = Conv2d::new(widths[0], channels, 3, 1, 1, &mut rng);

    Ok(ReconstructorModel {
        arch: ReconArch {
            channels,
            height,
            width,
            widths: widths.to_vec(),
        },
        enc_blocks,
        down_convs,
        bottleneck,
        dec_stages,
        head,
    })
}

impl ReconstructorModel {
    pub fn arch(&self) -> &ReconArch {
        &self.arch
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.arch.channels, self.arch.height, self.arch.width)
    }

    /// Forward one image; output is sigmoid-squashed into (0, 1).
    pub fn forward_image(&self, x: &ArrayView3<f32>) -> Array3<f32> {
        let mut h = self.enc_blocks[0].forward(x);
        for i in 0..self.down_convs.len() {
            h = self.down_convs[i].forward(&h.view());
            h = self.enc_blocks[i + 1].forward(&h.view());
        }
        h = self.bottleneck.forward(&h.view());
        for stage in &self.dec_stages {
            h = upsample2x(&h.view());
            h = stage.conv.forward(&h.view());
            h = stage.block.forward(&h.view());
        }
        let z = self.head.forward(&h.view());
        z.mapv(sigmoid)
    }

    pub(crate) fn forward_cached(&self, x: &ArrayView3<f32>) -> ReconCache {
        let mut enc_block_caches = Vec::with_capacity(self.enc_blocks.len());
        let mut down_cols = Vec::with_capacity(self.down_convs.len());
        let (mut h, c0) = self.enc_blocks[0].forward_cached(x);
        enc_block_caches.push(c0);
        for i in 0..self.down_convs.len() {
            let in_hw = (h.dim().1, h.dim().2);
            let (h2, cols) = self.down_convs[i].forward_cached(&h.view());
            down_cols.push((cols, in_hw));
            let (h3, bc) = self.enc_blocks[i + 1].forward_cached(&h2.view());
            enc_block_caches.push(bc);
            h = h3;
        }
        let (mut h, bottleneck_cache) = self.bottleneck.forward_cached(&h.view());
        let mut dec_caches = Vec::with_capacity(self.dec_stages.len());
        for stage in &self.dec_stages {
            let up = upsample2x(&h.view());
            let up_hw = (up.dim().1, up.dim().2);
            let (h2, cols) = stage.conv.forward_cached(&up.view());
            let (h3, bc) = stage.block.forward_cached(&h2.view());
            dec_caches.push((cols, up_hw, bc));
            h = h3;
        }
        let head_in_hw = (h.dim().1, h.dim().2);
        let (z, head_cols) = self.head.forward_cached(&h.view());
        let output = z.mapv(sigmoid);
        ReconCache {
            enc_block_caches,
            down_cols,
            bottleneck_cache,
            dec_caches,
            head_cols,
            head_in_hw,
            output,
        }
    }

    /// Backward from dL/d(output). Accumulates into `grads`.
    pub(crate) fn backward(&self, cache: &ReconCache, d_out: &Array3<f32>, grads: &mut ReconGrads) {
        // Through the final sigmoid: dz = dy * y * (1 - y).
        let mut dh: Array3<f32> = d_out * &cache.output * &(1.0 - &cache.output);
        dh = self
            .head
            .backward(&cache.head_cols, &dh.view(), cache.head_in_hw, &mut grads.head);
        for (i, stage) in self.dec_stages.iter().enumerate().rev() {
            let (cols, up_hw, bc) = &cache.dec_caches[i];
            dh = stage.block.backward(bc, &dh.view(), &mut grads.dec_stages[i].block);
            dh = stage
                .conv
                .backward(cols, &dh.view(), *up_hw, &mut grads.dec_stages[i].conv);
            dh = upsample2x_backward(&dh.view());
        }
        dh = self
            .bottleneck
            .backward(&cache.bottleneck_cache, &dh.view(), &mut grads.bottleneck);
        for i in (0..self.down_convs.len()).rev() {
            dh = self.enc_blocks[i + 1].backward(
                &cache.enc_block_caches[i + 1],
                &dh.view(),
                &mut grads.enc_blocks[i + 1],
            );
            let (cols, in_hw) = &cache.down_cols[i];
            dh = self.down_convs[i].backward(cols, &dh.view(), *in_hw, &mut grads.down_convs[i]);
        }
        self.enc_blocks[0].backward(
            &cache.enc_block_caches[0],
            &dh.view(),
            &mut grads.enc_blocks[0],
        );
    }

    /// Stage-level dataflow graph as `(node, inputs)` pairs. Used by the
    /// checkpoint descriptor and by structural tests that verify the absence
    /// of encoder-to-decoder connections.
    pub fn wiring(&self) -> Vec<(String, Vec<String>)> {
        let mut nodes: Vec<(String, Vec<String>)> = vec![("input".into(), vec![])];
        let mut prev = "input".to_string();
        for i in 0..self.enc_blocks.len() {
            if i > 0 {
                let name = format!("enc_down{}", i - 1);
                nodes.push((name.clone(), vec![prev.clone()]));
                prev = name;
            }
            let name = format!("enc_block{i}");
            nodes.push((name.clone(), vec![prev.clone()]));
            prev = name;
        }
        nodes.push(("bottleneck".into(), vec![prev.clone()]));
        prev = "bottleneck".into();
        for i in 0..self.dec_stages.len() {
            let up = format!("dec_up{i}");
            nodes.push((up.clone(), vec![prev.clone()]));
            let name = format!("dec_block{i}");
            nodes.push((name.clone(), vec![up]));
            prev = name;
        }
        nodes.push(("head".into(), vec![prev]));
        nodes.push(("output".into(), vec!["head".into()]));
        nodes
    }
}

/// Run the reconstructor over a batch (inference only, parallel over images).
pub fn reconstruct(model: &ReconstructorModel, batch: &ImageBatch) -> Result<ImageBatch> {
    let shape = model.image_shape();
    if batch.is_empty() {
        let (c, h, w) = shape;
        return Ok(ImageBatch::zeros(0, c, h, w));
    }
    if batch.image_shape() != shape {
        return Err(Error::shape(
            format!("{shape:?}"),
            format!("{:?}", batch.image_shape()),
        ));
    }
    let images: Vec<Array3<f32>> = (0..batch.len())
        .into_par_iter()
        .map(|i| model.forward_image(&batch.image(i)))
        .collect();
    let (c, h, w) = shape;
    let mut out = Array4::zeros((batch.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    ImageBatch::new(out)
}

/// Mean Charbonnier loss `mean(sqrt((target - pred)^2 + eps^2))`, accumulated
/// in f64. Smooth everywhere; equals `eps` exactly when `pred == target`.
pub fn charbonnier_loss(pred: &ImageBatch, target: &ImageBatch, eps: f32) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::parameter("eps", "must be > 0"));
    }
    if pred.data().dim() != target.data().dim() {
        return Err(Error::shape(
            format!("{:?}", target.data().dim()),
            format!("{:?}", pred.data().dim()),
        ));
    }
    let eps2 = (eps as f64) * (eps as f64);
    let mut acc = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(target.data().iter()) {
        let d = (t as f64) - (p as f64);
        acc += (d * d + eps2).sqrt();
    }
    Ok(acc / pred.data().len() as f64)
}

/// Per-element gradient of [`charbonnier_loss`] with respect to `pred`:
/// `(pred - target) / sqrt(d^2 + eps^2) / n`.
pub fn charbonnier_grad(pred: &ArrayView3<f32>, target: &ArrayView3<f32>, eps: f32, n_total: usize) -> Array3<f32> {
    let eps2 = eps * eps;
    let scale = 1.0 / n_total as f32;
    let mut g = Array3::<f32>::zeros(pred.raw_dim());
    ndarray::Zip::from(&mut g)
        .and(pred)
        .and(target)
        .for_each(|gv, &p, &t| {
            let d = p - t;
            *gv = d / (d * d + eps2).sqrt() * scale;
        });
    g
}

/// Training hyperparameters for the reconstructor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub charbonnier_eps: f32,
    pub seed: u64,
}

impl Default for ReconTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            charbonnier_eps: 1e-3,
            seed: 0,
        }
    }
}

/// Loss trace of a training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean per-sample loss of each optimization step, in step order.
    pub step_losses: Vec<f64>,
    /// Mean per-sample loss of each epoch.
    pub epoch_mean_loss: Vec<f64>,
}

/// Corrupt a clean batch the way the training loop does: Gaussian noise
/// first, coarse dropout second. The training target stays the clean batch.
pub fn make_training_input<R: Rng>(
    clean: &ImageBatch,
    corr: &CorruptionConfig,
    rng: &mut R,
) -> Result<ImageBatch> {
    let noisy = add_gaussian_noise(clean, corr.noise_sigma, rng)?;
    let (corrupted, _mask) = coarse_dropout(&noisy, corr, rng)?;
    Ok(corrupted)
}

/// Train the reconstructor on positive-class images.
///
/// Each step draws a shuffled batch `x`, corrupts it (noise then dropout),
/// runs the model on the corrupted input, and minimizes the Charbonnier loss
/// against the *clean* `x`. Returns the trained model and the loss history.
/// Deterministic in `cfg.seed` regardless of thread count.
pub fn train_reconstructor(
    mut model: ReconstructorModel,
    positives: &ImageBatch,
    corr: &CorruptionConfig,
    cfg: &ReconTrainConfig,
) -> Result<(ReconstructorModel, TrainHistory)> {
    if positives.is_empty() {
        return Err(Error::Config("training source is empty".into()));
    }
    if positives.image_shape() != model.image_shape() {
        return Err(Error::shape(
            format!("{:?}", model.image_shape()),
            format!("{:?}", positives.image_shape()),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    corr.validate(positives.height(), positives.width())?;
    if !(cfg.charbonnier_eps > 0.0) {
        return Err(Error::Config("charbonnier_eps must be > 0".into()));
    }

    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamParams::with_learning_rate(cfg.learning_rate));
    let n = positives.len();
    let mut indices: Vec<usize> = (0..n).collect();

    for _epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_count = 0usize;
        for batch_idx in indices.chunks(cfg.batch_size) {
            let clean = positives.select(batch_idx);
            let corrupted = make_training_input(&clean, corr, &mut rng)?;
            let (grads, loss_sum) = batch_grads(&model, &corrupted, &clean, cfg.charbonnier_eps);
            let flat_grads = grads.flat();
            let mut flat_params = model.flat_mut();
            adam.step(&mut flat_params, &flat_grads);
            let batch_mean = loss_sum / clean.len() as f64;
            history.step_losses.push(batch_mean);
            epoch_loss += loss_sum;
            epoch_count += clean.len();
        }
        history.epoch_mean_loss.push(epoch_loss / epoch_count as f64);
    }
    Ok((model, history))
}

/// Forward/backward over one batch, parallel over fixed-size chunks with
/// in-order reduction. Returns summed gradients (already scaled to the batch
/// mean) and the summed per-sample mean loss.
fn batch_grads(
    model: &ReconstructorModel,
    corrupted: &ImageBatch,
    clean: &ImageBatch,
    eps: f32,
) -> (ReconGrads, f64) {
    let n = corrupted.len();
    let per_image = clean.channels() * clean.height() * clean.width();
    let n_total = n * per_image;
    let chunks = fixed_chunks(n);
    let partials: Vec<(ReconGrads, f64)> = chunks
        .par_iter()
        .map(|range| {
            let mut grads = ReconGrads::zeros_like(model);
            let mut loss = 0.0f64;
            for i in range.clone() {
                let x = corrupted.image(i);
                let target = clean.image(i);
                let cache = model.forward_cached(&x);
                let eps2 = (eps as f64) * (eps as f64);
                let mut sample_loss = 0.0f64;
                for (&p, &t) in cache.output.iter().zip(target.iter()) {
                    let d = (t as f64) - (p as f64);
                    sample_loss += (d * d + eps2).sqrt();
                }
                loss += sample_loss / per_image as f64;
                let d_out = charbonnier_grad(&cache.output.view(), &target, eps, n_total);
                model.backward(&cache, &d_out, &mut grads);
            }
            (grads, loss)
        })
        .collect();
    let mut total_grads = ReconGrads::zeros_like(model);
    let mut total_loss = 0.0f64;
    for (g, l) in &partials {
        total_grads.accumulate(g);
        total_loss += l;
    }
    (total_grads, total_loss)
}
