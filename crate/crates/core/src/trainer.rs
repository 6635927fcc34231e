//! Optimisation loop: Adam with element-wise gradient clipping, a step
//! learning-rate schedule, synchronized geometric augmentation, CSV logging
//! and resumable checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data_io::{Normalization, RgbdSample, SampleBatch};
use crate::model::{total_loss, BbsNet};
use crate::nn::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip: bool,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum fraction of each border removed before resizing back.
    pub crop_frac: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip: true,
            rotation_deg: 15.0,
            crop_frac: 0.1,
        }
    }
}

/// Learning rate of [`TrainConfig::toy`]; the published 1e-4 assumes a
/// pretrained backbone.
pub const TOY_LR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// The learning rate is divided by this factor every `lr_decay_every` epochs.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch: usize,
    /// Gradients are clamped element-wise to `[-clip, clip]`.
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub side: usize,
    pub loss_alpha: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps, whatever the epoch count.
    pub max_iters: Option<usize>,
    /// Write a checkpoint every this many epochs (and after the last one).
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay_factor: 10.0,
            lr_decay_every: 60,
            epochs: 150,
            batch: 10,
            clip: 0.5,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            side: 352,
            loss_alpha: 0.5,
            seed: 0,
            max_iters: None,
            checkpoint_every: 1,
            augment: AugmentConfig::default(),
            normalization: Normalization::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale recipe for the toy backbone trained from scratch: the
    /// optimizer settings above with a larger step, no decay, batches of two
    /// and an iteration cap instead of an epoch count.
    pub fn toy(side: usize, iters: usize, seed: u64) -> Self {
        Self {
            lr: TOY_LR,
            lr_decay_every: usize::MAX,
            epochs: usize::MAX,
            batch: 2,
            side,
            seed,
            max_iters: Some(iters),
            checkpoint_every: usize::MAX,
            augment: AugmentConfig {
                enabled: false,
                ..AugmentConfig::default()
            },
            normalization: Normalization::identity(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.lr > 0.0) || !(self.lr_decay_factor > 0.0) || !(self.clip > 0.0) || !(self.adam_eps > 0.0) {
            return bad("lr, lr_decay_factor, clip and adam_eps must be positive");
        }
        if self.lr_decay_every == 0 || self.epochs == 0 || self.batch == 0 || self.side == 0 {
            return bad("lr_decay_every, epochs, batch and side must be positive");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.loss_alpha) {
            return bad("loss_alpha must lie in [0, 1]");
        }
        if !(0.0..0.5).contains(&self.augment.crop_frac) || self.augment.rotation_deg < 0.0 {
            return bad("crop_frac must lie in [0, 0.5) and rotation_deg be non-negative");
        }
        Ok(())
    }
}

/// Step schedule: `lr / factor^(epoch / every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr / cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

pub fn clip_gradient(g: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    Ok(g.clamp(lo, hi)?)
}

/// Element-wise clamp of every gradient in `grads`.
pub fn clip_gradients(grads: &BTreeMap<String, Tensor>, lo: f64, hi: f64) -> Result<BTreeMap<String, Tensor>> {
    grads
        .iter()
        .map(|(k, g)| Ok((k.clone(), clip_gradient(g, lo, hi)?)))
        .collect()
}

/// Upper bound on `|update| / lr` of one Adam step at step `t >= 1`.
///
/// With bias-corrected moments, Cauchy-Schwarz over the gradient history
/// gives `|m_hat| / sqrt(v_hat) <= (1 - b1) / (1 - b1^t) * sqrt((1 - b2^t) /
/// (1 - b2)) * sqrt(sum_{i<t} (b1^2 / b2)^i)`; independently, clipping gives
/// `|m_hat| <= clip` and hence `|update| <= lr * clip / eps`.
pub fn adam_step_bound(t: u64, beta1: f64, beta2: f64, clip: f64, eps: f64) -> f64 {
    let t = t.max(1) as i32;
    let r = beta1 * beta1 / beta2;
    let geo: f64 = (0..t).map(|i| r.powi(i)).sum();
    let cs = (1.0 - beta1) / (1.0 - beta1.powi(t)) * ((1.0 - beta2.powi(t)) / (1.0 - beta2)).sqrt() * geo.sqrt();
    cs.min(clip / eps)
}

/// Adam. Non-zero weight decay is added to the clipped gradient as an L2 term.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            clip: cfg.clip,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Clips the gradients of every trainable tensor and applies one update.
    /// Returns the largest absolute parameter change.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<f64> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut max_change: f64 = 0.0;
        for (name, var) in store.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let theta = var.as_tensor().detach();
            let mut g = clip_gradient(g, -self.clip, self.clip)?;
            if self.weight_decay > 0.0 {
                g = (g + (&theta * self.weight_decay)?)?;
            }
            let m_prev = match self.m.get(&name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.v.get(&name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_prev * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            let v = ((v_prev * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?.affine(lr, 0.0)?;
            max_change = max_change.max(update.abs()?.flatten_all()?.max(0)?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?);
            var.set(&(theta - update)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(max_change)
    }

    fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let m = self.m.iter().map(|(k, t)| (format!("adam.m.{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("adam.v.{k}"), t.clone()));
        m.chain(v).collect()
    }

    fn restore(&mut self, step: u64, tensors: &BTreeMap<String, Tensor>) {
        self.step = step;
        self.m.clear();
        self.v.clear();
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix("adam.m.") {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("adam.v.") {
                self.v.insert(name.to_string(), t.clone());
            }
        }
    }
}

/// One geometric transform shared by the three maps of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub angle_deg: f64,
    /// Crop box `(x0, y0, x1, y1)` as fractions of the source side.
    pub crop: (f64, f64, f64, f64),
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            flip: false,
            angle_deg: 0.0,
            crop: (0.0, 0.0, 1.0, 1.0),
        }
    }

    pub fn sample(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        let f = cfg.crop_frac;
        let mut crop = || if f > 0.0 { rng.random_range(0.0..f) } else { 0.0 };
        let (l, t, r, b) = (crop(), crop(), crop(), crop());
        Self {
            flip: cfg.flip && rng.random_bool(0.5),
            angle_deg: if cfg.rotation_deg > 0.0 {
                rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg)
            } else {
                0.0
            },
            crop: (l, t, 1.0 - r, 1.0 - b),
        }
    }

    /// Source coordinates (pixel units, centres at integers) of output pixel
    /// `(u, v)` of an `out`-sided result taken from an `h x w` source.
    pub fn source_coords(&self, u: usize, v: usize, out: usize, h: usize, w: usize) -> (f64, f64) {
        let (x0, y0, x1, y1) = self.crop;
        let (wf, hf) = (w as f64, h as f64);
        // crop + resize
        let mut x = x0 * wf + (u as f64 + 0.5) * ((x1 - x0) * wf) / out as f64 - 0.5;
        let mut y = y0 * hf + (v as f64 + 0.5) * ((y1 - y0) * hf) / out as f64 - 0.5;
        if self.angle_deg != 0.0 {
            let (cx, cy) = ((wf - 1.0) / 2.0, (hf - 1.0) / 2.0);
            let (s, c) = self.angle_deg.to_radians().sin_cos();
            let (dx, dy) = (x - cx, y - cy);
            x = cx + c * dx - s * dy;
            y = cy + s * dx + c * dy;
        }
        if self.flip {
            x = wf - 1.0 - x;
        }
        (x, y)
    }
}

fn sample_bilinear(src: &Array2<f32>, x: f64, y: f64) -> f32 {
    let (h, w) = src.dim();
    if x < -0.5 || y < -0.5 || x > w as f64 - 0.5 || y > h as f64 - 0.5 {
        return 0.0;
    }
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (xl, yl) = (x.floor() as usize, y.floor() as usize);
    let (xh, yh) = ((xl + 1).min(w - 1), (yl + 1).min(h - 1));
    let (fx, fy) = ((x - xl as f64) as f32, (y - yl as f64) as f32);
    let top = src[[yl, xl]] * (1.0 - fx) + src[[yl, xh]] * fx;
    let bot = src[[yh, xl]] * (1.0 - fx) + src[[yh, xh]] * fx;
    top * (1.0 - fy) + bot * fy
}

fn sample_nearest(src: &Array2<f32>, x: f64, y: f64) -> f32 {
    let (h, w) = src.dim();
    let (xr, yr) = (x.round(), y.round());
    if xr < 0.0 || yr < 0.0 || xr >= w as f64 || yr >= h as f64 {
        return 0.0;
    }
    src[[yr as usize, xr as usize]]
}

/// Applies `p` to all three maps, producing `out x out` results. RGB and
/// depth are sampled bilinearly, the mask by nearest neighbour; regions
/// rotated in from outside the image are zero.
pub fn apply_augment(sample: &RgbdSample, p: &AugmentParams, out: usize) -> Result<RgbdSample> {
    let (h, w) = (sample.height(), sample.width());
    let channels: Vec<Array2<f32>> = (0..3)
        .map(|c| sample.rgb.index_axis(ndarray::Axis(2), c).to_owned())
        .collect();
    let mut rgb = Array3::<f32>::zeros((out, out, 3));
    let mut depth = Array2::<f32>::zeros((out, out));
    let mut gt = Array2::<f32>::zeros((out, out));
    for v in 0..out {
        for u in 0..out {
            let (x, y) = p.source_coords(u, v, out, h, w);
            for (c, ch) in channels.iter().enumerate() {
                rgb[[v, u, c]] = sample_bilinear(ch, x, y);
            }
            depth[[v, u]] = sample_bilinear(&sample.depth, x, y);
            gt[[v, u]] = sample_nearest(&sample.gt, x, y);
        }
    }
    RgbdSample::new(sample.id.clone(), rgb, depth, gt)
}

/// Random flip, rotation and border crop, resized back to the input side.
pub fn augment(sample: &RgbdSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<RgbdSample> {
    let p = AugmentParams::sample(cfg, rng);
    apply_augment(sample, &p, sample.height())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub iter: usize,
    pub loss_s1: f64,
    pub loss_s2: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
    pub epochs_completed: usize,
    pub iters: usize,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Training state that can be checkpointed and resumed.
pub struct Trainer<'a> {
    pub net: &'a BbsNet,
    pub cfg: TrainConfig,
    pub opt: Adam,
    /// Next epoch to run.
    pub epoch: usize,
    pub iter: usize,
    out_dir: Option<PathBuf>,
    last_good: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(net: &'a BbsNet, cfg: TrainConfig, out_dir: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            net,
            opt: Adam::new(&cfg),
            cfg,
            epoch: 0,
            iter: 0,
            out_dir,
            last_good: None,
        })
    }

    /// Restores weights, optimizer moments and counters from a training
    /// checkpoint into `net` and continues from the following epoch.
    pub fn resume(net: &'a BbsNet, cfg: TrainConfig, ckpt_path: &Path, out_dir: Option<PathBuf>) -> Result<Self> {
        let ckpt = checkpoint::load(ckpt_path)?;
        let meta = &ckpt.metadata;
        let get = |k: &str| {
            meta.get("train")
                .and_then(|t| t.get(k))
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::Checkpoint(format!("not a training checkpoint (no train.{k})")))
        };
        let (epoch, iter, step) = (get("epoch")? as usize, get("iter")? as usize, get("adam_step")?);
        let model_part = checkpoint::Checkpoint {
            metadata: meta.clone(),
            tensors: ckpt
                .tensors
                .iter()
                .filter(|(k, _)| !k.starts_with(checkpoint::OPTIMIZER_PREFIX))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        };
        net.load_tensors(&model_part)?;
        let mut t = Self::new(net, cfg, out_dir)?;
        t.opt.restore(step, &ckpt.tensors);
        t.epoch = epoch + 1;
        t.iter = iter;
        t.last_good = Some(ckpt_path.to_path_buf());
        Ok(t)
    }

    fn save_checkpoint(&self, epoch: usize) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.out_dir else { return Ok(None) };
        let path = dir.join(format!("epoch_{epoch:04}.ckpt"));
        let extra = serde_json::json!({
            "loss_alpha": self.cfg.loss_alpha,
            "train": {
                "epoch": epoch,
                "iter": self.iter,
                "adam_step": self.opt.step,
                "config": self.cfg,
            }
        });
        let meta = self.net.metadata(extra)?;
        let mut tensors: Vec<(String, Tensor)> = self
            .net
            .store()
            .entries()
            .into_iter()
            .map(|(k, v, _)| (k, v.as_tensor().clone()))
            .collect();
        tensors.extend(self.opt.state_tensors());
        checkpoint::save(&path, meta, tensors.iter().map(|(k, t)| (k.as_str(), t)))?;
        Ok(Some(path))
    }

    fn append_log(&self, row: &LogRow) -> Result<()> {
        let Some(dir) = &self.out_dir else { return Ok(()) };
        let path = dir.join("train_log.csv");
        let fresh = !path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        w.serialize(row)?;
        w.flush().map_err(|e| Error::io(&path, e))
    }

    /// One optimizer step on `batch`; returns the stage losses.
    pub fn train_step(&mut self, batch: &SampleBatch, lr: f64) -> Result<(f64, f64)> {
        let out = self.net.forward_batch(batch)?;
        let parts = total_loss(&out, &batch.gt, self.cfg.loss_alpha)?;
        let total = scalar(&parts.total)?;
        let l1 = match &parts.s1 {
            Some(l) => scalar(l)?,
            None => f64::NAN,
        };
        let l2 = scalar(&parts.s2)?;
        if !total.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch,
                iter: self.iter,
                last_good: self.last_good.clone(),
            });
        }
        let grads = parts.total.backward()?;
        self.opt.step(self.net.store(), &grads, lr)?;
        self.iter += 1;
        Ok((l1, l2))
    }

    /// Runs epochs until `cfg.epochs` or `cfg.max_iters` is reached.
    pub fn run(&mut self, samples: &[RgbdSample]) -> Result<TrainReport> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let dtype = self.net.store().dtype();
        let mut report = TrainReport::default();
        let max_iters = self.cfg.max_iters.unwrap_or(usize::MAX);
        while self.epoch < self.cfg.epochs && self.iter < max_iters {
            let epoch = self.epoch;
            let lr = lr_at(epoch, &self.cfg);
            let mut rng = epoch_rng(self.cfg.seed, epoch);
            let mut order: Vec<usize> = (0..samples.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.cfg.batch) {
                if self.iter >= max_iters {
                    break;
                }
                let augmented: Vec<RgbdSample> = chunk
                    .iter()
                    .map(|&i| {
                        if self.cfg.augment.enabled {
                            augment(&samples[i], &self.cfg.augment, &mut rng)
                        } else {
                            Ok(samples[i].clone())
                        }
                    })
                    .collect::<Result<_>>()?;
                let refs: Vec<&RgbdSample> = augmented.iter().collect();
                let batch = SampleBatch::from_samples(&refs, &self.cfg.normalization, dtype)?;
                let (l1, l2) = self.train_step(&batch, lr)?;
                let row = LogRow {
                    epoch,
                    iter: self.iter,
                    loss_s1: l1,
                    loss_s2: l2,
                    lr,
                };
                self.append_log(&row)?;
                log::debug!("epoch {epoch} iter {} loss_s1 {l1:.5} loss_s2 {l2:.5}", self.iter);
                report.log.push(row);
            }
            let last = self.epoch + 1 == self.cfg.epochs || self.iter >= max_iters;
            if (epoch + 1) % self.cfg.checkpoint_every == 0 || last {
                if let Some(p) = self.save_checkpoint(epoch)? {
                    self.last_good = Some(p.clone());
                    report.checkpoints.push(p);
                }
            }
            self.epoch += 1;
            report.epochs_completed += 1;
        }
        report.iters = self.iter;
        Ok(report)
    }
}

/// Trains `net` in place from scratch.
pub fn train(net: &BbsNet, samples: &[RgbdSample], cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainReport> {
    Trainer::new(net, cfg.clone(), out_dir.map(Path::to_path_buf))?.run(samples)
}
