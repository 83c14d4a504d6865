//! Semi-supervised training: anchor-level target prediction for unlabeled
//! patches, image- and object-level MixUp, and the training loop.
//!
//! All randomness of a run comes from one stream derived from
//! [`SslConfig::seed`], consumed per step in this order:
//!
//! 1. labeled samples: scan choice, crop center, symmetry augmentation;
//! 2. unlabeled samples: scan choice, crop center, the K ensemble transforms;
//! 3. image MixUp: batch shuffle, then one mixing weight per pair;
//! 4. object MixUp: for each object in batch order, donor choice then weight.

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::anchors::{assign_targets, AnchorGrid, AnchorMask, AnchorTargets};
use crate::error::{Error, Result};
use crate::inference::{self, DetectParams};
use crate::loss::{detection_loss, FocalParams};
use crate::model::{cosine_lr, Detector, DetectorConfig};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::transforms::{self, apply_to_anchor_index, apply_to_volume, CubeTransform, GROUP_ORDER};
use crate::volume::{crop_patch, Box3D, LabeledScan, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    /// Augmentations ensembled per unlabeled patch.
    pub k: usize,
    /// Sharpening temperature.
    pub temperature: f64,
    /// Beta(eta, eta) parameter of the mixing weight.
    pub eta: f64,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    /// Minimum score for a predicted box to count as an object in
    /// object-level MixUp, and for unlabeled-scan selection.
    pub object_conf_threshold: f64,
    pub image_mixup: bool,
    pub object_mixup: bool,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            k: 4,
            temperature: 0.7,
            eta: 0.2,
            labeled_per_batch: 4,
            unlabeled_per_batch: 4,
            object_conf_threshold: 0.8,
            image_mixup: true,
            object_mixup: true,
            seed: 0,
        }
    }
}

impl SslConfig {
    /// Same model and schedule, labeled data only, no MixUp.
    pub fn supervised(&self) -> Self {
        Self {
            unlabeled_per_batch: 0,
            image_mixup: false,
            object_mixup: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature <= 1.0) {
            return Err(Error::Config(format!("temperature {} outside (0, 1]", self.temperature)));
        }
        if !(self.eta > 0.0) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.labeled_per_batch == 0 {
            return Err(Error::Config("labeled_per_batch must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.object_conf_threshold) {
            return Err(Error::Config("object_conf_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Optimization schedule and sampling knobs shared by both training modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub base_lr: f64,
    pub reg_weight: f64,
    /// Probability that a labeled crop is centered near an annotated box.
    pub positive_crop_fraction: f64,
    /// Maximum offset (voxels, per axis) of such a crop from the box center.
    pub crop_jitter: i64,
    /// Apply a random cube symmetry to labeled patches.
    pub augment_labeled: bool,
    pub nms_iou: f64,
    pub max_candidates: usize,
    /// Validation CPM every this many epochs (and after the last); 0 = only
    /// after the last.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 10,
            base_lr: 1e-3,
            reg_weight: 1.0,
            positive_crop_fraction: 0.5,
            crop_jitter: 8,
            augment_labeled: true,
            nms_iou: crate::anchors::DEFAULT_NMS_IOU,
            max_candidates: 200,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn detect_params(&self) -> DetectParams {
        DetectParams {
            nms_iou: self.nms_iou,
            max_candidates: self.max_candidates,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.steps_per_epoch == 0 {
            return Err(Error::Config("epochs and steps_per_epoch must be positive".into()));
        }
        if !(self.base_lr > 0.0) || !(self.reg_weight >= 0.0) {
            return Err(Error::Config("base_lr must be positive and reg_weight non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_crop_fraction) || self.crop_jitter < 0 {
            return Err(Error::Config("invalid crop sampling parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Labeled,
    Unlabeled,
}

/// A patch with targets for every anchor of the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample<S> {
    pub patch: Volume3D<S>,
    pub targets: AnchorTargets<S>,
    pub source: Source,
    /// Annotated boxes (labeled) or confident detections (unlabeled).
    pub objects: Vec<Box3D>,
}

/// Two-class sharpening: `y^(1/T) / (y^(1/T) + (1 - y)^(1/T))`.
pub fn sharpen<S: Scalar>(y: S, temperature: f64) -> S {
    let inv = S::of(1.0 / temperature);
    let a = y.powf(inv);
    let b = (S::one() - y).powf(inv);
    let den = a + b;
    if den > S::zero() {
        a / den
    } else {
        y
    }
}

/// `K` distinct group elements (all 48, then repeats, when `K > 48`).
pub fn sample_transforms(k: usize, rng: &mut Rng) -> Vec<CubeTransform> {
    let group = transforms::enumerate_group();
    let mut out = Vec::with_capacity(k);
    let mut remaining = k;
    while remaining > 0 {
        let take = remaining.min(GROUP_ORDER);
        out.extend(index::sample(rng, GROUP_ORDER, take).into_iter().map(|i| group[i]));
        remaining -= take;
    }
    out
}

/// Anchor-wise average of the model's probabilities over `transforms`,
/// each mapped back to the original patch orientation.
pub fn ensemble_probabilities<S: Scalar>(
    model: &Detector<S>,
    patch: &Volume3D<S>,
    grid: &AnchorGrid,
    transforms: &[CubeTransform],
) -> Result<Vec<S>> {
    let mut sum = vec![S::zero(); grid.len()];
    for t in transforms {
        let moved = apply_to_volume(t, patch)?;
        let out = model.forward(&moved)?;
        let perm = apply_to_anchor_index(t, grid)?;
        for (i, &orig) in perm.iter().enumerate() {
            sum[orig] += out.probs[i];
        }
    }
    let k = S::of(transforms.len() as f64);
    Ok(sum.into_iter().map(|v| v / k).collect())
}

/// Predicted objectness targets for an unlabeled patch: ensemble over `K`
/// random symmetries, then sharpen. Every anchor is trainable and no
/// regression targets are produced.
pub fn predict_targets<S: Scalar>(
    model: &Detector<S>,
    patch: &Volume3D<S>,
    grid: &AnchorGrid,
    cfg: &SslConfig,
    rng: &mut Rng,
) -> Result<AnchorTargets<S>> {
    let ts = sample_transforms(cfg.k, rng);
    let mean = ensemble_probabilities(model, patch, grid, &ts)?;
    Ok(AnchorTargets::soft(
        mean.into_iter().map(|y| sharpen(y, cfg.temperature)).collect(),
    ))
}

/// `max(l, 1 - l)` with `l ~ Beta(eta, eta)`.
pub fn sample_mix_weight(eta: f64, rng: &mut Rng) -> f64 {
    let l = sample_beta(eta, rng);
    l.max(1.0 - l)
}

/// One draw of `Beta(eta, eta)`.
pub fn sample_beta(eta: f64, rng: &mut Rng) -> f64 {
    Beta::new(eta, eta).expect("eta > 0").sample(rng)
}

/// Convex blend of two samples with weight `lambda` on `a`. Regression
/// targets and objects come from `a`; an anchor ignored in either input is
/// ignored in the output.
pub fn image_mixup<S: Scalar>(a: &TrainingSample<S>, b: &TrainingSample<S>, lambda: f64) -> Result<TrainingSample<S>> {
    if a.patch.shape() != b.patch.shape() || a.targets.len() != b.targets.len() {
        return Err(Error::Shape(format!(
            "cannot mix patches {:?} and {:?}",
            a.patch.shape(),
            b.patch.shape()
        )));
    }
    let l = S::of(lambda);
    let r = S::one() - l;
    let mut data = a.patch.data().clone();
    data.zip_mut_with(b.patch.data(), |x, y| *x = l * *x + r * *y);
    let cls = a
        .targets
        .cls
        .iter()
        .zip(&b.targets.cls)
        .map(|(x, y)| l * *x + r * *y)
        .collect();
    let mask = a
        .targets
        .mask
        .iter()
        .zip(&b.targets.mask)
        .map(|(x, y)| {
            if *x == AnchorMask::Ignore || *y == AnchorMask::Ignore {
                AnchorMask::Ignore
            } else {
                AnchorMask::Train
            }
        })
        .collect();
    Ok(TrainingSample {
        patch: Volume3D::new(data, a.patch.spacing())?,
        targets: AnchorTargets {
            cls,
            reg: a.targets.reg.clone(),
            mask,
        },
        source: a.source,
        objects: a.objects.clone(),
    })
}

/// Voxel index range whose centers fall inside `[c - e/2, c + e/2)`,
/// clipped to `[0, n)`.
fn box_voxels(center: f64, edge: f64, n: usize) -> std::ops::Range<usize> {
    let lo = (center - edge / 2.0 - 0.5).ceil().max(0.0) as usize;
    let hi = ((center + edge / 2.0 - 0.5).ceil().max(0.0) as usize).min(n);
    lo.min(hi)..hi
}

fn trilinear<S: Scalar>(v: &Volume3D<S>, p: [f64; 3]) -> S {
    let shape = v.shape();
    let data = v.data();
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let x = p[a].clamp(0.0, (shape[a] - 1) as f64);
        let f = x.floor();
        base[a] = (f as usize).min(shape[a].saturating_sub(2));
        frac[a] = x - base[a] as f64;
        if shape[a] == 1 {
            base[a] = 0;
            frac[a] = 0.0;
        }
    }
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dz == 1 { frac[0] } else { 1.0 - frac[0] })
                    * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                    * (if dx == 1 { frac[2] } else { 1.0 - frac[2] });
                if w == 0.0 {
                    continue;
                }
                let idx = [
                    (base[0] + dz).min(shape[0] - 1),
                    (base[1] + dy).min(shape[1] - 1),
                    (base[2] + dx).min(shape[2] - 1),
                ];
                acc += w * data[idx].f64();
            }
        }
    }
    S::of(acc)
}

/// Blend every object with a donor object drawn uniformly from the rest of
/// the batch, resampled trilinearly to the host box; targets are untouched.
/// `objects[i]` lists the objects of `batch[i]`. Fewer than two objects in
/// the whole batch leaves it unchanged.
pub fn object_mixup<S: Scalar>(
    batch: &mut [TrainingSample<S>],
    objects: &[Vec<Box3D>],
    mut weight: impl FnMut(&mut Rng) -> f64,
    rng: &mut Rng,
) {
    assert_eq!(batch.len(), objects.len(), "one object list per sample");
    let all: Vec<(usize, Box3D)> = objects
        .iter()
        .enumerate()
        .flat_map(|(i, objs)| objs.iter().map(move |b| (i, *b)))
        .collect();
    if all.len() < 2 {
        return;
    }
    let snapshot: Vec<Volume3D<S>> = batch.iter().map(|s| s.patch.clone()).collect();
    for (host_id, &(si, host)) in all.iter().enumerate() {
        let mut donor_id = rng.gen_range(0..all.len() - 1);
        if donor_id >= host_id {
            donor_id += 1;
        }
        let (di, donor) = all[donor_id];
        let lambda = S::of(weight(rng));
        let donor_vol = &snapshot[di];
        let shape = batch[si].patch.shape();
        let ranges: Vec<_> = (0..3).map(|a| box_voxels(host.center[a], host.edge, shape[a])).collect();
        let data = batch[si].patch.data_mut();
        for z in ranges[0].clone() {
            for y in ranges[1].clone() {
                for x in ranges[2].clone() {
                    let q = [z, y, x];
                    let p: [f64; 3] = std::array::from_fn(|a| {
                        let u = (q[a] as f64 + 0.5 - host.center[a]) / host.edge;
                        donor.center[a] + u * donor.edge - 0.5
                    });
                    let d = trilinear(donor_vol, p);
                    let h = data[q];
                    data[q] = lambda * h + (S::one() - lambda) * d;
                }
            }
        }
    }
}

/// Scans with at least one post-suppression detection scoring at least
/// `threshold`.
pub fn select_unlabeled<S: Scalar>(
    model: &Detector<S>,
    pool: &[LabeledScan<f32>],
    threshold: f64,
    params: DetectParams,
) -> Result<Vec<LabeledScan<f32>>> {
    let mut out = Vec::new();
    for scan in pool {
        let dets = inference::detect(model, &scan.volume, params)?;
        if dets.iter().any(|d| d.score >= threshold) {
            out.push(scan.clone());
        }
    }
    Ok(out)
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_labeled: f64,
    pub loss_unlabeled: f64,
    /// Absent when no validation pass ran this epoch.
    pub cpm_val: Option<f64>,
}

pub fn write_metrics_csv<W: std::io::Write>(mut out: W, log: &[EpochMetrics]) -> std::io::Result<()> {
    writeln!(out, "epoch,lr,loss_labeled,loss_unlabeled,CPM_val")?;
    for m in log {
        let cpm = m.cpm_val.map(|c| c.to_string()).unwrap_or_default();
        let fmt = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
        writeln!(
            out,
            "{},{},{},{},{}",
            m.epoch,
            m.lr,
            fmt(m.loss_labeled),
            fmt(m.loss_unlabeled),
            cpm
        )?;
    }
    Ok(())
}

pub struct TrainOutcome {
    pub model: Detector<f32>,
    pub log: Vec<EpochMetrics>,
}

/// Cycles through a pool in freshly shuffled passes.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
        }
    }

    fn next(&mut self, rng: &mut Rng) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Stateful training loop; [`train`] drives it to completion.
pub struct Trainer<'a> {
    labeled: &'a [LabeledScan<f32>],
    unlabeled: &'a [LabeledScan<f32>],
    ssl: SslConfig,
    train: TrainConfig,
    focal: FocalParams,
    model: Detector<f32>,
    grid: AnchorGrid,
    rng: Rng,
    labeled_cycle: Cycler,
    unlabeled_cycle: Cycler,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        labeled: &'a [LabeledScan<f32>],
        unlabeled: &'a [LabeledScan<f32>],
        ssl: SslConfig,
        model_cfg: DetectorConfig,
        train: TrainConfig,
        focal: FocalParams,
    ) -> Result<Self> {
        ssl.validate()?;
        train.validate()?;
        focal.validate()?;
        if labeled.is_empty() {
            return Err(Error::Config("training needs at least one labeled scan".into()));
        }
        let model = Detector::new(model_cfg)?;
        let grid = model.grid().clone();
        let patch = grid.patch_shape();
        for s in labeled.iter().chain(unlabeled) {
            if (0..3).any(|a| s.volume.shape()[a] < patch[a]) {
                return Err(Error::Shape(format!(
                    "scan {} of shape {:?} is smaller than the patch {patch:?}",
                    s.id,
                    s.volume.shape()
                )));
            }
        }
        Ok(Self {
            labeled,
            unlabeled,
            rng: rng::stream(ssl.seed, 0x7EA1),
            ssl,
            train,
            focal,
            model,
            grid,
            labeled_cycle: Cycler::new(labeled.len()),
            unlabeled_cycle: Cycler::new(unlabeled.len()),
            step: 0,
        })
    }

    pub fn model(&self) -> &Detector<f32> {
        &self.model
    }

    pub fn total_steps(&self) -> usize {
        self.train.epochs * self.train.steps_per_epoch
    }

    fn unlabeled_count(&self) -> usize {
        if self.unlabeled.is_empty() {
            0
        } else {
            self.ssl.unlabeled_per_batch
        }
    }

    fn random_center(&mut self, shape: [usize; 3]) -> [i64; 3] {
        let patch = self.grid.patch_shape();
        std::array::from_fn(|a| {
            let half = (patch[a] / 2) as i64;
            let hi = shape[a] as i64 - half;
            if hi > half {
                self.rng.gen_range(half..=hi)
            } else {
                half
            }
        })
    }

    fn labeled_sample(&mut self) -> Result<TrainingSample<f32>> {
        let scan = &self.labeled[self.labeled_cycle.next(&mut self.rng)];
        let shape = scan.volume.shape();
        let center = if !scan.boxes.is_empty() && self.rng.gen_bool(self.train.positive_crop_fraction) {
            let b = scan.boxes[self.rng.gen_range(0..scan.boxes.len())];
            let j = self.train.crop_jitter;
            std::array::from_fn(|a| b.center[a].floor() as i64 + self.rng.gen_range(-j..=j))
        } else {
            self.random_center(shape)
        };
        let mut patch = crop_patch(scan, center, self.grid.patch_shape(), self.grid.max_stride())?;
        if self.train.augment_labeled {
            let t = transforms::enumerate_group()[self.rng.gen_range(0..GROUP_ORDER)];
            let shape = patch.volume.shape();
            patch.volume = apply_to_volume(&t, &patch.volume)?;
            patch.boxes = patch
                .boxes
                .iter()
                .map(|b| transforms::apply_to_box(&t, b, shape))
                .collect::<Result<_>>()?;
        }
        let volume = patch.volume.standardized();
        Ok(TrainingSample {
            targets: assign_targets(&self.grid, &patch.boxes),
            patch: volume,
            source: Source::Labeled,
            objects: patch.boxes,
        })
    }

    fn unlabeled_sample(&mut self) -> Result<TrainingSample<f32>> {
        let scan = &self.unlabeled[self.unlabeled_cycle.next(&mut self.rng)];
        let center = self.random_center(scan.volume.shape());
        let patch = crop_patch(scan, center, self.grid.patch_shape(), self.grid.max_stride())?;
        let volume = patch.volume.standardized();
        let targets = predict_targets(&self.model, &volume, &self.grid, &self.ssl, &mut self.rng)?;
        let objects = if self.ssl.object_mixup {
            inference::detect_standardized(&self.model, &volume, self.train.detect_params())?
                .into_iter()
                .filter(|d| d.score >= self.ssl.object_conf_threshold)
                .map(|d| d.bbox)
                .collect()
        } else {
            Vec::new()
        };
        Ok(TrainingSample {
            patch: volume,
            targets,
            source: Source::Unlabeled,
            objects,
        })
    }

    /// Draw the next batch: labeled samples first, then unlabeled, before
    /// any mixing.
    pub fn next_batch(&mut self) -> Result<Vec<TrainingSample<f32>>> {
        let mut batch = Vec::with_capacity(self.ssl.labeled_per_batch + self.unlabeled_count());
        for _ in 0..self.ssl.labeled_per_batch {
            batch.push(self.labeled_sample()?);
        }
        for _ in 0..self.unlabeled_count() {
            batch.push(self.unlabeled_sample()?);
        }
        Ok(batch)
    }

    /// Image-level then object-level MixUp, as enabled.
    pub fn mix(&mut self, batch: Vec<TrainingSample<f32>>) -> Result<Vec<TrainingSample<f32>>> {
        let mut batch = batch;
        let n = batch.len();
        if self.ssl.image_mixup && n >= 2 {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut self.rng);
            let mut mixed = Vec::with_capacity(n);
            for i in 0..n {
                let lambda = sample_mix_weight(self.ssl.eta, &mut self.rng);
                mixed.push(image_mixup(&batch[order[i]], &batch[order[(i + 1) % n]], lambda)?);
            }
            batch = mixed;
        }
        if self.ssl.object_mixup {
            let objects: Vec<Vec<Box3D>> = batch.iter().map(|s| s.objects.clone()).collect();
            let eta = self.ssl.eta;
            object_mixup(&mut batch, &objects, |r| sample_mix_weight(eta, r), &mut self.rng);
        }
        Ok(batch)
    }

    /// One optimizer step; returns mean losses of labeled- and
    /// unlabeled-dominant samples (NaN when a group is empty).
    pub fn train_step(&mut self) -> Result<(f64, f64)> {
        let batch = self.next_batch()?;
        let batch = self.mix(batch)?;
        let mut grads = self.model.zero_gradients();
        let mut sums = [(0.0, 0usize); 2];
        for sample in &batch {
            let out = self.model.forward_train(&sample.patch)?;
            let loss = detection_loss(
                &out.probs,
                &out.offsets,
                &sample.targets,
                &self.focal,
                self.train.reg_weight,
            );
            let value = loss.total as f64;
            if !value.is_finite() {
                return Err(Error::Divergence(format!("non-finite loss at step {}", self.step)));
            }
            let g = self.model.backward(&loss.grad_prob, &loss.grad_reg)?;
            grads.add_assign(&g);
            let slot = match sample.source {
                Source::Labeled => 0,
                Source::Unlabeled => 1,
            };
            sums[slot].0 += value;
            sums[slot].1 += 1;
        }
        grads.scale(1.0 / batch.len() as f32);
        if !grads.is_finite() {
            return Err(Error::Divergence(format!("non-finite gradient at step {}", self.step)));
        }
        let lr = cosine_lr(self.step, self.total_steps(), self.train.base_lr);
        self.model.step(&grads, lr);
        if !self.model.params_finite() {
            return Err(Error::Divergence(format!("non-finite parameters after step {}", self.step)));
        }
        self.step += 1;
        let mean = |(s, n): (f64, usize)| if n == 0 { f64::NAN } else { s / n as f64 };
        Ok((mean(sums[0]), mean(sums[1])))
    }

    pub fn run(mut self, val: Option<&[LabeledScan<f32>]>) -> Result<TrainOutcome> {
        let mut log = Vec::with_capacity(self.train.epochs);
        for epoch in 0..self.train.epochs {
            let mut acc = [(0.0, 0usize); 2];
            let mut lr = 0.0;
            for _ in 0..self.train.steps_per_epoch {
                lr = cosine_lr(self.step, self.total_steps(), self.train.base_lr);
                let (l, u) = self.train_step()?;
                for (slot, v) in [l, u].into_iter().enumerate() {
                    if !v.is_nan() {
                        acc[slot].0 += v;
                        acc[slot].1 += 1;
                    }
                }
            }
            let last = epoch + 1 == self.train.epochs;
            let due = self.train.eval_every > 0 && (epoch + 1) % self.train.eval_every == 0;
            let cpm_val = match val {
                Some(v) if !v.is_empty() && (last || due) => {
                    Some(inference::evaluate_model(&self.model, v, self.train.detect_params())?.1.cpm)
                }
                _ => None,
            };
            let mean = |(s, n): (f64, usize)| if n == 0 { f64::NAN } else { s / n as f64 };
            log.push(EpochMetrics {
                epoch,
                lr,
                loss_labeled: mean(acc[0]),
                loss_unlabeled: mean(acc[1]),
                cpm_val,
            });
        }
        Ok(TrainOutcome { model: self.model, log })
    }
}

/// Train a fresh detector. With an empty unlabeled pool (or
/// `unlabeled_per_batch == 0`) and MixUp disabled this is the supervised
/// baseline.
pub fn train(
    labeled: &[LabeledScan<f32>],
    unlabeled: &[LabeledScan<f32>],
    ssl: &SslConfig,
    model_cfg: &DetectorConfig,
    train_cfg: &TrainConfig,
    focal: &FocalParams,
    val: Option<&[LabeledScan<f32>]>,
) -> Result<TrainOutcome> {
    Trainer::new(labeled, unlabeled, ssl.clone(), model_cfg.clone(), train_cfg.clone(), *focal)?.run(val)
}
