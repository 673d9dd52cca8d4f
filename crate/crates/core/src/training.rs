//! Loss, optimiser, the three training stages and checkpoints.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distillation_data::ExpressionFrame;
use crate::error::{ensure, Error, Result};
use crate::image::Image;
use crate::linalg::{Mat, Real};
use crate::model::{ArchConfig, ModelBundle, ParamGroup, SR_SCALE};
use crate::nelf_renderer::image_to_map;
use crate::nn::{leaky_backward_inplace, leaky_inplace, Conv2d, FeatureMap, Module};
use crate::pipeline::{backward_frames, backward_rays, forward_frames_train, forward_rays_train, RayGroup};
use crate::ray_geometry::{generate_rays_with, RotationCheck};
use crate::seed::child_rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the perceptual term.
    pub lambda: f64,
    /// Weight of the robust displacement prior on warped frames.
    pub displacement: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.005, displacement: 0.01 }
    }
}

/// Seed of the perceptual extractor weights.
pub const PERCEPTUAL_SEED: u64 = 0x5EED_0F_FEA7;
pub const PERCEPTUAL_CHANNELS: [usize; 4] = [3, 8, 16, 32];

/// Fixed random convolutional pyramid: three stride-2 3×3 convolutions with
/// leaky activations. Used as a stand-in for a pretrained perceptual network.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor<T> {
    pub stages: Vec<Conv2d<T>>,
}

pub struct PerceptualCache<T> {
    inputs: Vec<(usize, usize)>,
    cols: Vec<Mat<T>>,
    outputs: Vec<FeatureMap<T>>,
}

impl<T: Real> Default for PerceptualExtractor<T> {
    fn default() -> Self {
        Self::new(PERCEPTUAL_SEED)
    }
}

impl<T: Real> PerceptualExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stages = PERCEPTUAL_CHANNELS
            .windows(2)
            .enumerate()
            .map(|(i, c)| {
                let std = (2.0 / (9 * c[0]) as f64).sqrt();
                Conv2d::new(&format!("perceptual.{i}"), c[0], c[1], 3, 2, 1, std, &mut rng)
            })
            .collect();
        PerceptualExtractor { stages }
    }

    pub fn features(&self, x: &FeatureMap<T>) -> Vec<FeatureMap<T>> {
        self.features_cached(x).outputs
    }

    pub fn features_cached(&self, x: &FeatureMap<T>) -> PerceptualCache<T> {
        let mut cache = PerceptualCache { inputs: Vec::new(), cols: Vec::new(), outputs: Vec::new() };
        let mut h = x.clone();
        for conv in &self.stages {
            cache.inputs.push((h.height, h.width));
            let (mut y, cols) = conv.forward(&h);
            leaky_inplace(&mut y.data);
            cache.cols.push(cols);
            cache.outputs.push(y.clone());
            h = y;
        }
        cache
    }

    /// Input gradient given gradients on every stage output.
    pub fn backward(&self, cache: &PerceptualCache<T>, d_feats: &[FeatureMap<T>]) -> FeatureMap<T> {
        let mut carry: Option<FeatureMap<T>> = None;
        for (s, conv) in self.stages.iter().enumerate().rev() {
            let mut d = d_feats[s].clone();
            if let Some(c) = &carry {
                d.add_assign(c);
            }
            leaky_backward_inplace(&mut d.data, &cache.outputs[s].data);
            let mut scratch = conv.clone();
            carry = conv.backward(cache.inputs[s], &cache.cols[s], &d, &mut scratch, true);
        }
        carry.expect("extractor has stages")
    }
}

fn check_same_shape<T>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<()> {
    ensure!(
        (a.channels, a.height, a.width) == (b.channels, b.height, b.width),
        Validation,
        "image shapes differ: {}×{}×{} vs {}×{}×{}",
        a.channels,
        a.height,
        a.width,
        b.channels,
        b.height,
        b.width
    );
    Ok(())
}

/// Mean squared error plus `λ ×` the stage-averaged mean squared feature
/// distance, with its gradient with respect to `pred`.
pub fn loss_and_grad<T: Real>(
    pred: &FeatureMap<T>,
    target: &FeatureMap<T>,
    cfg: &LossConfig,
    extractor: &PerceptualExtractor<T>,
) -> Result<(f64, FeatureMap<T>)> {
    check_same_shape(pred, target)?;
    let n = pred.data.len() as f64;
    let mut mse = 0.0;
    let mut grad = pred.clone();
    for (g, (&p, &t)) in grad.data.iter_mut().zip(pred.data.iter().zip(&target.data)) {
        let d = (p - t).to_f64_lossy();
        mse += d * d;
        *g = T::from_f64_lossy(2.0 * d / n);
    }
    let mut loss = mse / n;
    if cfg.lambda > 0.0 {
        let cache = extractor.features_cached(pred);
        let tf = extractor.features(target);
        let stages = tf.len() as f64;
        let mut d_feats = Vec::with_capacity(tf.len());
        let mut perc = 0.0;
        for (f, t) in cache.outputs.iter().zip(&tf) {
            let m = f.data.len() as f64;
            let mut d = f.clone();
            let mut acc = 0.0;
            for (dv, (&a, &b)) in d.data.iter_mut().zip(f.data.iter().zip(&t.data)) {
                let diff = (a - b).to_f64_lossy();
                acc += diff * diff;
                *dv = T::from_f64_lossy(cfg.lambda * 2.0 * diff / (m * stages));
            }
            perc += acc / m;
            d_feats.push(d);
        }
        loss += cfg.lambda * perc / stages;
        grad.add_assign(&extractor.backward(&cache, &d_feats));
    }
    Ok((loss, grad))
}

/// Loss between two images.
pub fn photometric_perceptual_loss(pred: &Image, target: &Image, cfg: &LossConfig) -> Result<f64> {
    ensure!(cfg.lambda >= 0.0, Validation, "perceptual weight must be ≥ 0");
    let extractor = PerceptualExtractor::<f64>::default();
    Ok(loss_and_grad(&image_to_map::<f64>(pred), &image_to_map::<f64>(target), cfg, &extractor)?.0)
}

/// Feature stack of an image under the default extractor.
pub fn perceptual_features(img: &Image) -> Vec<FeatureMap<f64>> {
    PerceptualExtractor::<f64>::default().features(&image_to_map(img))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments for every tensor of a bundle, in bundle order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new<T: Real>(bundle: &ModelBundle<T>) -> Self {
        let m: Vec<Vec<f32>> = bundle.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam { step: 0, v: m.clone(), m }
    }

    /// One update of the tensors belonging to `groups`, each paired with a
    /// multiplier on `lr`.
    pub fn update(
        &mut self,
        params: &mut ModelBundle<f32>,
        grads: &ModelBundle<f32>,
        groups: &[(ParamGroup, f64)],
        lr: f64,
        cfg: &AdamConfig,
    ) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let mut offset = 0;
        for g in ParamGroup::ALL {
            let count = params.group_tensors(g).len();
            if let Some(&(_, scale)) = groups.iter().find(|(x, _)| *x == g) {
                let lr = lr * scale;
                let grad_ts = grads.group_tensors(g);
                for (k, p) in params.group_tensors_mut(g).into_iter().enumerate() {
                    let (m, v) = (&mut self.m[offset + k], &mut self.v[offset + k]);
                    for (i, (w, &gr)) in p.data.iter_mut().zip(&grad_ts[k].data).enumerate() {
                        let gr = gr as f64;
                        let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * gr;
                        let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * gr * gr;
                        m[i] = mi as f32;
                        v[i] = vi as f32;
                        let step = lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
                        *w = (*w as f64 - step) as f32;
                    }
                }
            }
            offset += count;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSchedule {
    pub iters: u64,
    /// Initial learning rate.
    pub lr: f64,
    /// Iterations per multiplicative decay step.
    pub decay_period: u64,
    /// Frames per batch.
    pub batch_frames: usize,
    /// Rays drawn per frame (ray-based stage only).
    #[serde(default)]
    pub rays_per_frame: usize,
    /// Share of real frames per batch (finetuning only).
    #[serde(default)]
    pub real_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    /// Learning-rate multiplier applied once per decay period.
    pub decay: f64,
    pub adam: AdamConfig,
    pub loss: LossConfig,
    pub stage1: StageSchedule,
    pub stage2: StageSchedule,
    pub finetune: StageSchedule,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainSchedule {
    pub fn desk() -> Self {
        TrainSchedule {
            decay: 0.2,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            stage1: StageSchedule {
                iters: 30_000,
                lr: 5e-4,
                decay_period: 30_000,
                batch_frames: 64,
                rays_per_frame: 64,
                real_fraction: 0.0,
            },
            stage2: StageSchedule {
                iters: 10_000,
                lr: 1e-4,
                decay_period: 30_000,
                batch_frames: 8,
                rays_per_frame: 0,
                real_fraction: 0.0,
            },
            finetune: StageSchedule {
                iters: 2_000,
                lr: 1e-5,
                decay_period: 30_000,
                batch_frames: 8,
                rays_per_frame: 0,
                real_fraction: 0.5,
            },
        }
    }

    /// Settings at full scale.
    pub fn full() -> Self {
        let mut s = Self::desk();
        s.stage1.iters = 500_000;
        s.stage1.decay_period = 500_000;
        s.stage1.batch_frames = 256;
        s.stage1.rays_per_frame = 64;
        s.stage2.iters = 500_000;
        s.stage2.decay_period = 500_000;
        s.stage2.batch_frames = 16;
        s.finetune.decay_period = 500_000;
        s.finetune.batch_frames = 16;
        s
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.decay > 0.0 && self.decay <= 1.0, Config, "decay multiplier must be in (0, 1]");
        ensure!(self.loss.lambda >= 0.0, Config, "perceptual weight must be ≥ 0");
        ensure!(self.loss.displacement >= 0.0, Config, "displacement weight must be ≥ 0");
        let a = &self.adam;
        ensure!(
            (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0,
            Config,
            "invalid Adam hyperparameters"
        );
        for (name, s) in [("stage1", &self.stage1), ("stage2", &self.stage2), ("finetune", &self.finetune)] {
            ensure!(s.lr >= 0.0 && s.lr.is_finite(), Config, "{name}: learning rate must be ≥ 0");
            ensure!(s.decay_period >= 1, Config, "{name}: decay_period must be ≥ 1");
            ensure!(s.batch_frames >= 1, Config, "{name}: batch_frames must be ≥ 1");
        }
        ensure!(self.stage1.rays_per_frame >= 1, Config, "stage1: rays_per_frame must be ≥ 1");
        ensure!(
            (0.0..=1.0).contains(&self.finetune.real_fraction),
            Config,
            "finetune: real_fraction must be in [0, 1]"
        );
        Ok(())
    }
}

/// `lr₀ · decay^(it / period)`.
pub fn learning_rate(stage: &StageSchedule, decay: f64, iteration: u64) -> f64 {
    stage.lr * decay.powf(iteration as f64 / stage.decay_period as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Freshly initialised parameters.
    Init,
    Stage1,
    Stage2,
    Finetune,
}

impl Stage {
    fn code(self) -> u8 {
        match self {
            Stage::Init => 0,
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
            Stage::Finetune => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Stage::Init,
            1 => Stage::Stage1,
            2 => Stage::Stage2,
            3 => Stage::Finetune,
            _ => return Err(Error::Format(format!("unknown training stage {c}"))),
        })
    }

    fn stream(self) -> u64 {
        10 + self.code() as u64
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub bundle: ModelBundle<f32>,
    /// Stage the iteration counter and optimiser state belong to.
    pub stage: Stage,
    pub iteration: u64,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        let bundle = ModelBundle::new(arch, seed)?;
        let optimizer = Adam::new(&bundle);
        Ok(Checkpoint { bundle, stage: Stage::Init, iteration: 0, optimizer })
    }

    pub fn config_hash(&self) -> u64 {
        self.bundle.arch.hash()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub stage: Stage,
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Run control: optional early stop and a per-step observer.
pub struct TrainHooks<'a> {
    /// Stop once the stage iteration counter reaches this value.
    pub stop_at: Option<u64>,
    pub on_step: Box<dyn FnMut(&StepReport) + 'a>,
}

impl Default for TrainHooks<'_> {
    fn default() -> Self {
        TrainHooks { stop_at: None, on_step: Box::new(|_| {}) }
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss of every step run in this call.
    pub losses: Vec<f64>,
}

/// Resets the counter when entering a new stage; resumes otherwise.
fn enter_stage(mut ckpt: Checkpoint, stage: Stage, allowed_from: &[Stage]) -> Result<Checkpoint> {
    if ckpt.stage == stage {
        return Ok(ckpt);
    }
    if !allowed_from.contains(&ckpt.stage) {
        return Err(Error::Usage(format!(
            "{stage:?} training needs a checkpoint from {:?}, got {:?}",
            allowed_from, ckpt.stage
        )));
    }
    ckpt.stage = stage;
    ckpt.iteration = 0;
    ckpt.optimizer = Adam::new(&ckpt.bundle);
    Ok(ckpt)
}

fn check_frames(arch: &ArchConfig, frames: &[ExpressionFrame], what: &str) -> Result<()> {
    ensure!(!frames.is_empty(), Validation, "{what} set is empty");
    for f in frames {
        ensure!(
            f.e.len() == arch.expr_dim,
            Incompatible,
            "{what} frame has code dimension {}, model expects {}",
            f.e.len(),
            arch.expr_dim
        );
        if arch.shoulder {
            ensure!(f.shoulder_rotation.is_some(), Validation, "shoulder model needs shoulder rotations in the {what} set");
        }
    }
    Ok(())
}

fn run_loop<'a>(
    mut ckpt: Checkpoint,
    sched: &TrainSchedule,
    stage_sched: &StageSchedule,
    groups: &[(ParamGroup, f64)],
    seed: u64,
    mut hooks: TrainHooks<'a>,
    mut step: impl FnMut(&ModelBundle<f32>, &mut ChaCha8Rng, &mut ModelBundle<f32>) -> Result<f64>,
) -> Result<TrainOutcome> {
    let end = hooks.stop_at.map_or(stage_sched.iters, |s| s.min(stage_sched.iters));
    let mut grad = ckpt.bundle.zeros_like();
    let mut losses = Vec::new();
    while ckpt.iteration < end {
        let it = ckpt.iteration;
        let mut rng = child_rng(seed, ckpt.stage.stream(), it);
        grad.zero_all();
        let loss = step(&ckpt.bundle, &mut rng, &mut grad)?;
        ensure!(loss.is_finite(), Validation, "loss became non-finite at iteration {it}");
        let lr = learning_rate(stage_sched, sched.decay, it);
        ckpt.optimizer.update(&mut ckpt.bundle, &grad, groups, lr, &sched.adam);
        ckpt.iteration += 1;
        losses.push(loss);
        (hooks.on_step)(&StepReport { stage: ckpt.stage, iteration: it, lr, loss });
    }
    Ok(TrainOutcome { checkpoint: ckpt, losses })
}

/// Random pixel rays of randomly chosen frames with their target colours.
pub fn sample_ray_batch<R: Rng>(
    frames: &[ExpressionFrame],
    batch_frames: usize,
    rays_per_frame: usize,
    rng: &mut R,
) -> (Vec<RayGroup>, Vec<f32>) {
    let mut groups = Vec::with_capacity(batch_frames);
    let mut target = Vec::with_capacity(batch_frames * rays_per_frame * 3);
    for _ in 0..batch_frames {
        let f = &frames[rng.gen_range(0..frames.len())];
        let rays = (0..rays_per_frame)
            .map(|_| {
                let x = rng.gen_range(0..f.camera.width);
                let y = rng.gen_range(0..f.camera.height);
                target.extend_from_slice(&f.image.pixel(y, x));
                f.camera.ray_through(x as f64 + 0.5, y as f64 + 0.5)
            })
            .collect();
        groups.push(RayGroup::new(f.e.clone(), rays, f.shoulder_rotation, None));
    }
    (groups, target)
}

/// Mean squared ray-colour error and its gradient.
pub fn ray_loss<T: Real>(rgb: &Mat<T>, target: &[f32]) -> (f64, Mat<T>) {
    let n = rgb.data.len() as f64;
    let mut d = Mat::zeros(rgb.rows, rgb.cols);
    let mut loss = 0.0;
    for ((g, &p), &t) in d.data.iter_mut().zip(&rgb.data).zip(target) {
        let diff = p.to_f64_lossy() - t as f64;
        loss += diff * diff;
        *g = T::from_f64_lossy(2.0 * diff / n);
    }
    (loss / n, d)
}

/// Ray-level distillation without the SR network.
pub fn train_stage1(
    frames: &[ExpressionFrame],
    ckpt: Checkpoint,
    sched: &TrainSchedule,
    seed: u64,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    sched.validate()?;
    check_frames(&ckpt.bundle.arch, frames, "pseudo")?;
    let ckpt = enter_stage(ckpt, Stage::Stage1, &[Stage::Init])?;
    let s = sched.stage1;
    let groups = [ParamGroup::LocalFeature, ParamGroup::Attention, ParamGroup::Nelf].map(|g| (g, 1.0));
    run_loop(ckpt, sched, &s, &groups, seed, hooks, |bundle, rng, grad| {
        let (batch, target) = sample_ray_batch(frames, s.batch_frames, s.rays_per_frame, rng);
        let (rgb, tape) = forward_rays_train(bundle, &batch, false)?;
        let (loss, d) = ray_loss(&rgb, &target);
        backward_rays(bundle, &tape, &d, grad);
        Ok(loss)
    })
}

/// One frame prepared for image-level training.
pub struct FrameSample<T> {
    pub group: RayGroup,
    pub lr_hw: (usize, usize),
    pub target: FeatureMap<T>,
}

pub fn frame_sample<T: Real>(f: &ExpressionFrame) -> Result<FrameSample<T>> {
    let lr = f.camera.downscaled(SR_SCALE)?;
    let rays = generate_rays_with(&lr, RotationCheck::Relaxed)?;
    let index = f.frame_index.map(|i| i as usize);
    Ok(FrameSample {
        group: RayGroup::new(f.e.clone(), rays, f.shoulder_rotation, index),
        lr_hw: (lr.height, lr.width),
        target: image_to_map(&f.image),
    })
}

/// Mean image loss over `samples` (all at one resolution), accumulating the
/// parameter gradient into `grad`.
pub fn image_batch_step<T: Real>(
    bundle: &ModelBundle<T>,
    samples: &[FrameSample<T>],
    warp: bool,
    loss_cfg: &LossConfig,
    extractor: &PerceptualExtractor<T>,
    grad: &mut ModelBundle<T>,
) -> Result<f64> {
    ensure!(!samples.is_empty(), Validation, "empty image batch");
    let lr_hw = samples[0].lr_hw;
    ensure!(samples.iter().all(|s| s.lr_hw == lr_hw), Validation, "image batch mixes resolutions");
    let groups: Vec<RayGroup> = samples.iter().map(|s| s.group.clone()).collect();
    let (outs, mut tape) = forward_frames_train(bundle, &groups, lr_hw, warp)?;
    let b = samples.len() as f64;
    let scale = T::from_f64_lossy(1.0 / b);
    let mut total = if warp && loss_cfg.displacement > 0.0 { tape.penalize_displacement(loss_cfg.displacement) } else { 0.0 };
    let mut d_out = Vec::with_capacity(samples.len());
    for (o, s) in outs.iter().zip(samples) {
        let (l, mut d) = loss_and_grad(o, &s.target, loss_cfg, extractor)?;
        d.data.iter_mut().for_each(|v| *v = *v * scale);
        total += l / b;
        d_out.push(d);
    }
    backward_frames(bundle, &tape, &d_out, grad);
    Ok(total)
}

/// Image-level distillation jointly with the SR network.
pub fn train_stage2(
    frames: &[ExpressionFrame],
    ckpt: Checkpoint,
    sched: &TrainSchedule,
    seed: u64,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    sched.validate()?;
    check_frames(&ckpt.bundle.arch, frames, "pseudo")?;
    let ckpt = enter_stage(ckpt, Stage::Stage2, &[Stage::Stage1])?;
    let s = sched.stage2;
    let extractor = PerceptualExtractor::default();
    let groups = [ParamGroup::LocalFeature, ParamGroup::Attention, ParamGroup::Nelf, ParamGroup::Sr].map(|g| (g, 1.0));
    run_loop(ckpt, sched, &s, &groups, seed, hooks, |bundle, rng, grad| {
        let samples = (0..s.batch_frames)
            .map(|_| frame_sample(&frames[rng.gen_range(0..frames.len())]))
            .collect::<Result<Vec<_>>>()?;
        image_batch_step(bundle, &samples, false, &sched.loss, &extractor, grad)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneOptions {
    /// Route real frames through the warping field.
    pub warp: bool,
    /// Learning-rate multiplier for the warping network and the latent table,
    /// which start untrained at this stage.
    pub warp_lr_scale: f64,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        FinetuneOptions { warp: true, warp_lr_scale: 100.0 }
    }
}

/// Finetuning on mixed real and pseudo frames; all groups are optimised.
pub fn finetune_real(
    real: &[ExpressionFrame],
    pseudo: &[ExpressionFrame],
    ckpt: Checkpoint,
    sched: &TrainSchedule,
    seed: u64,
    opts: FinetuneOptions,
    hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    sched.validate()?;
    ensure!(
        opts.warp_lr_scale > 0.0 && opts.warp_lr_scale.is_finite(),
        Config,
        "finetune.warp_lr_scale must be positive, got {}",
        opts.warp_lr_scale
    );
    let arch = ckpt.bundle.arch.clone();
    check_frames(&arch, real, "real")?;
    let s = sched.finetune;
    let n_real = ((s.batch_frames as f64 * s.real_fraction).round() as usize).min(s.batch_frames);
    if n_real < s.batch_frames {
        check_frames(&arch, pseudo, "pseudo")?;
    }
    for f in real {
        let i = f.frame_index.ok_or_else(|| Error::Usage("real frame without a frame index".into()))?;
        if (i as usize) >= arch.latent_count {
            return Err(Error::Usage(format!(
                "real frame index {i} has no latent (table holds {})",
                arch.latent_count
            )));
        }
    }
    let ckpt = enter_stage(ckpt, Stage::Finetune, &[Stage::Stage2])?;
    let extractor = PerceptualExtractor::default();
    let groups = ParamGroup::ALL.map(|g| {
        let scale = if matches!(g, ParamGroup::Warp | ParamGroup::Latents) { opts.warp_lr_scale } else { 1.0 };
        (g, scale)
    });
    run_loop(ckpt, sched, &s, &groups, seed, hooks, |bundle, rng, grad| {
        let mut samples = Vec::with_capacity(s.batch_frames);
        for k in 0..s.batch_frames {
            let f = if k < n_real {
                &real[rng.gen_range(0..real.len())]
            } else {
                &pseudo[rng.gen_range(0..pseudo.len())]
            };
            samples.push(frame_sample(f)?);
        }
        image_batch_step(bundle, &samples, opts.warp, &sched.loss, &extractor, grad)
    })
}

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"LAVCK1\0";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn put_f32s<W: Write>(w: &mut W, v: &[f32]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Layout: magic, version `u16`, config hash `u64`, stage `u8`, iteration
/// `u64`, architecture as TOML, then per group its name and tensors (name,
/// shape, `f32` data), then the optimiser step and both moment buffers.
pub fn write_checkpoint_to<W: Write>(ckpt: &Checkpoint, mut w: W) -> Result<()> {
    let b = &ckpt.bundle;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&ckpt.config_hash().to_le_bytes())?;
    w.write_all(&[ckpt.stage.code()])?;
    w.write_all(&ckpt.iteration.to_le_bytes())?;
    put_str(&mut w, &toml::to_string(&b.arch).map_err(|e| Error::Format(e.to_string()))?)?;
    w.write_all(&(ParamGroup::ALL.len() as u32).to_le_bytes())?;
    for g in ParamGroup::ALL {
        put_str(&mut w, g.name())?;
        let ts = b.group_tensors(g);
        w.write_all(&(ts.len() as u32).to_le_bytes())?;
        for t in ts {
            put_str(&mut w, &t.name)?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            put_f32s(&mut w, &t.data)?;
        }
    }
    let opt = &ckpt.optimizer;
    w.write_all(&opt.step.to_le_bytes())?;
    w.write_all(&(opt.m.len() as u32).to_le_bytes())?;
    for (m, v) in opt.m.iter().zip(&opt.v) {
        w.write_all(&(m.len() as u32).to_le_bytes())?;
        put_f32s(&mut w, m)?;
        put_f32s(&mut w, v)?;
    }
    Ok(())
}

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        ensure!(n <= 1 << 31, Format, "implausible checkpoint field length {n}");
        let mut b = vec![0u8; n];
        self.0.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("checkpoint file is truncated".into()),
            _ => Error::Io(e),
        })?;
        Ok(b)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.bytes(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

pub fn read_checkpoint_from<R: Read>(r: R) -> Result<Checkpoint> {
    let mut r = Reader(r);
    ensure!(&r.bytes(7)?[..] == CHECKPOINT_MAGIC, Format, "not a checkpoint file (bad magic)");
    let version = r.u16()?;
    ensure!(version == CHECKPOINT_VERSION, Incompatible, "unsupported checkpoint version {version}");
    let hash = r.u64()?;
    let stage = Stage::from_code(r.u8()?)?;
    let iteration = r.u64()?;
    let arch: ArchConfig =
        toml::from_str(&r.string()?).map_err(|e| Error::Format(format!("checkpoint architecture: {e}")))?;
    ensure!(arch.hash() == hash, Incompatible, "checkpoint config hash does not match its architecture");
    let mut bundle = ModelBundle::<f32>::new(&arch, 0)?;
    let n_groups = r.u32()? as usize;
    ensure!(n_groups == ParamGroup::ALL.len(), Format, "checkpoint has {n_groups} parameter groups");
    for _ in 0..n_groups {
        let name = r.string()?;
        let g = ParamGroup::from_name(&name).ok_or_else(|| Error::Format(format!("unknown parameter group {name}")))?;
        let count = r.u32()? as usize;
        let mut dst = bundle.group_tensors_mut(g);
        ensure!(count == dst.len(), Incompatible, "group {name} holds {count} tensors, expected {}", dst.len());
        for t in dst.iter_mut() {
            let tname = r.string()?;
            ensure!(tname == t.name, Incompatible, "tensor {tname} found where {} was expected", t.name);
            let nd = r.u32()? as usize;
            let shape = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            ensure!(shape == t.shape, Incompatible, "tensor {tname} has shape {shape:?}, expected {:?}", t.shape);
            let data = r.f32s(t.len())?;
            t.data = data;
        }
    }
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let lens: Vec<usize> = bundle.tensors().iter().map(|t| t.len()).collect();
    ensure!(n == lens.len(), Format, "optimiser state covers {n} tensors, expected {}", lens.len());
    let mut optimizer = Adam { step, m: Vec::with_capacity(n), v: Vec::with_capacity(n) };
    for len in lens {
        let l = r.u32()? as usize;
        ensure!(l == len, Format, "optimiser moment length {l}, expected {len}");
        optimizer.m.push(r.f32s(l)?);
        optimizer.v.push(r.f32s(l)?);
    }
    let mut probe = [0u8; 1];
    ensure!(matches!(r.0.read(&mut probe), Ok(0)), Format, "trailing bytes after checkpoint");
    Ok(Checkpoint { bundle, stage, iteration, optimizer })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint_to(ckpt, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint_from(BufReader::new(File::open(path)?))
}

/// Loads a checkpoint and requires it to match `arch`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, arch: &ArchConfig) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    ensure!(
        ckpt.config_hash() == arch.hash(),
        Incompatible,
        "checkpoint architecture {:016x} does not match the configured one {:016x}",
        ckpt.config_hash(),
        arch.hash()
    );
    Ok(ckpt)
}
