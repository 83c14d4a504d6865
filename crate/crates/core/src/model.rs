//! A small 3D feature-pyramid detector with hand-written backward pass, Adam
//! and cosine learning-rate annealing.
//!
//! Layout for `L` pyramid levels (`channels` has `L + 1` entries):
//!
//! ```text
//! a_0 = relu(stem(x))                                   stride 1
//! a_i = relu(conv_b(relu(conv_a(a_{i-1}))) + skip(a_{i-1}))   stride 2^i, i = 1..=L
//! p_L = lat_L(a_L)
//! p_i = lat_i(a_i) + upsample(p_{i+1})                  i = L-1..=1
//! out_i = head_out(relu(head_conv(p_i)))                shared head, 5 channels
//! ```
//!
//! Channel 0 of each head output is the objectness logit, channels 1..=4 the
//! box offsets. Level `i` of the anchor grid (stride `2^i`) reads `out_i`.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array4;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorGrid, LevelSpec};
use crate::error::{Error, Result};
use crate::nn::{self, Conv3d, ConvCache, ConvGrad};
use crate::rng;
use crate::scalar::Scalar;
use crate::volume::Volume3D;

/// Prior probability encoded by the initial objectness bias.
pub const PRIOR_PROBABILITY: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub input_patch: [usize; 3],
    /// Stem width followed by one width per residual stage.
    pub channels: Vec<usize>,
    pub fpn_channels: usize,
    pub levels: Vec<LevelSpec>,
    pub weight_init_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            input_patch: [32, 32, 32],
            channels: vec![8, 16, 32],
            fpn_channels: 16,
            levels: crate::anchors::desk_levels(),
            weight_init_seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let stages = self.levels.len();
        if stages == 0 || self.channels.len() != stages + 1 {
            return Err(Error::Config(format!(
                "{} levels need {} channel widths, got {:?}",
                stages,
                stages + 1,
                self.channels
            )));
        }
        if self.channels.contains(&0) || self.fpn_channels == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.stride != 1 << (i + 1) {
                return Err(Error::Config(format!(
                    "level {i} has stride {} but the backbone produces stride {}",
                    l.stride,
                    1 << (i + 1)
                )));
            }
        }
        AnchorGrid::new(self.input_patch, &self.levels)?;
        Ok(())
    }

    pub fn grid(&self) -> Result<AnchorGrid> {
        AnchorGrid::new(self.input_patch, &self.levels)
    }
}

/// Per-anchor network output in anchor-grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorOutput<S> {
    pub probs: Vec<S>,
    pub offsets: Vec<[S; 4]>,
}

#[derive(Debug, Clone)]
struct Stage {
    conv_a: usize,
    conv_b: usize,
    skip: usize,
}

/// Activations retained by a training forward pass.
#[derive(Debug, Clone)]
struct ForwardCache<S> {
    stem: ConvCache<S>,
    a: Vec<Array4<S>>,
    stage_mid: Vec<Array4<S>>,
    stage_caches: Vec<[ConvCache<S>; 3]>,
    lat_caches: Vec<ConvCache<S>>,
    head_hidden: Vec<Array4<S>>,
    head_caches: Vec<[ConvCache<S>; 2]>,
    probs: Vec<S>,
}

/// Parameter gradients, one entry per convolution in [`Detector::param_names`]
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<S> {
    pub convs: Vec<ConvGrad<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn add_assign(&mut self, other: &Gradients<S>) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: S) {
        for g in &mut self.convs {
            g.scale(k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.convs
            .iter()
            .all(|g| g.weight.iter().chain(g.bias.iter()).all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Learnable parameters, Adam moments and step counter.
#[derive(Debug, Clone)]
pub struct Detector<S> {
    config: DetectorConfig,
    grid: AnchorGrid,
    convs: Vec<Conv3d<S>>,
    names: Vec<String>,
    stem: usize,
    stages: Vec<Stage>,
    laterals: Vec<usize>,
    head_conv: usize,
    head_out: usize,
    moments: Vec<(ConvGrad<S>, ConvGrad<S>)>,
    step: u64,
    adam: AdamParams,
    cache: Option<ForwardCache<S>>,
}

impl<S: Scalar> Detector<S> {
    /// Build and initialize: He fan-in scaling for hidden convolutions,
    /// small weights on the output layer, objectness bias at the logit of
    /// [`PRIOR_PROBABILITY`].
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let grid = config.grid()?;
        let mut convs = Vec::new();
        let mut names = Vec::new();
        let mut push = |name: String, conv: Conv3d<S>| {
            convs.push(conv);
            names.push(name);
            convs.len() - 1
        };
        let ch = &config.channels;
        let f = config.fpn_channels;
        let stem = push("stem".into(), Conv3d::zeros(1, ch[0], 3, 1));
        let mut stages = Vec::new();
        for i in 1..ch.len() {
            let conv_a = push(format!("stage{i}.conv_a"), Conv3d::zeros(ch[i - 1], ch[i], 3, 2));
            let conv_b = push(format!("stage{i}.conv_b"), Conv3d::zeros(ch[i], ch[i], 3, 1));
            let skip = push(format!("stage{i}.skip"), Conv3d::zeros(ch[i - 1], ch[i], 1, 2));
            stages.push(Stage { conv_a, conv_b, skip });
        }
        let laterals = (1..ch.len())
            .map(|i| push(format!("lateral{i}"), Conv3d::zeros(ch[i], f, 1, 1)))
            .collect();
        let head_conv = push("head.conv".into(), Conv3d::zeros(f, f, 3, 1));
        let head_out = push("head.out".into(), Conv3d::zeros(f, 5, 1, 1));

        let mut rng = rng::stream(config.weight_init_seed, 0x1417);
        for (idx, conv) in convs.iter_mut().enumerate() {
            let fan_in = conv.weight.ncols() as f64;
            let std = if idx == head_out { 0.01 } else { (2.0 / fan_in).sqrt() };
            conv.weight.mapv_inplace(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                S::of(z * std)
            });
        }
        convs[head_out].bias[0] = S::of((PRIOR_PROBABILITY / (1.0 - PRIOR_PROBABILITY)).ln());

        let moments = convs
            .iter()
            .map(|c| (ConvGrad::zeros_like(c), ConvGrad::zeros_like(c)))
            .collect();
        Ok(Self {
            config,
            grid,
            convs,
            names,
            stem,
            stages,
            laterals,
            head_conv,
            head_out,
            moments,
            step: 0,
            adam: AdamParams::default(),
            cache: None,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn grid(&self) -> &AnchorGrid {
        &self.grid
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn convs(&self) -> &[Conv3d<S>] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [Conv3d<S>] {
        &mut self.convs
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.param_count()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients<S> {
        Gradients {
            convs: self.convs.iter().map(ConvGrad::zeros_like).collect(),
        }
    }

    /// Same weights in another precision. Optimizer state is not carried.
    pub fn cast<T: Scalar>(&self) -> Detector<T> {
        let mut out = Detector::<T>::new(self.config.clone()).expect("config already validated");
        for (dst, src) in out.convs.iter_mut().zip(&self.convs) {
            dst.weight = src.weight.mapv(|v| T::of(v.f64()));
            dst.bias = src.bias.mapv(|v| T::of(v.f64()));
        }
        out.step = self.step;
        out
    }

    fn check_input(&self, shape: [usize; 3]) -> Result<()> {
        let m = self.grid.max_stride();
        if shape.iter().any(|&n| n == 0 || n % m != 0) {
            return Err(Error::Shape(format!(
                "input {shape:?} must be a positive multiple of stride {m} on every axis"
            )));
        }
        Ok(())
    }

    fn run(&self, x: &Volume3D<S>, keep: bool) -> (DetectorOutput<S>, Option<ForwardCache<S>>) {
        let [d, h, w] = x.shape();
        let input = x
            .data()
            .clone()
            .into_shape_with_order((1, d, h, w))
            .expect("contiguous volume");
        let (stem_out, stem_cache) = self.convs[self.stem].forward(&input);
        let mut a = vec![nn::relu(&stem_out)];
        let mut stage_mid = Vec::new();
        let mut stage_caches = Vec::new();
        for st in &self.stages {
            let prev = a.last().expect("stem output");
            let (ya, ca) = self.convs[st.conv_a].forward(prev);
            let mid = nn::relu(&ya);
            let (yb, cb) = self.convs[st.conv_b].forward(&mid);
            let (ys, cs) = self.convs[st.skip].forward(prev);
            let out = nn::relu(&(yb + ys));
            stage_mid.push(mid);
            stage_caches.push([ca, cb, cs]);
            a.push(out);
        }
        let levels = self.stages.len();
        let mut lat_caches: Vec<Option<ConvCache<S>>> = vec![None; levels];
        let mut pyramid: Vec<Option<Array4<S>>> = vec![None; levels];
        for i in (0..levels).rev() {
            let (lat, c) = self.convs[self.laterals[i]].forward(&a[i + 1]);
            lat_caches[i] = Some(c);
            let p = match &pyramid.get(i + 1).and_then(|p| p.as_ref()) {
                Some(upper) => lat + nn::upsample2(upper),
                None => lat,
            };
            pyramid[i] = Some(p);
        }

        let mut probs = Vec::with_capacity(self.grid_len_for([d, h, w]));
        let mut offsets = Vec::with_capacity(probs.capacity());
        let mut head_hidden = Vec::new();
        let mut head_caches = Vec::new();
        for p in pyramid.iter().map(|p| p.as_ref().expect("filled above")) {
            let (hc, c1) = self.convs[self.head_conv].forward(p);
            let hidden = nn::relu(&hc);
            let (o, c2) = self.convs[self.head_out].forward(&hidden);
            let n = o.len() / 5;
            let o = o.into_shape_with_order((5, n)).expect("head output");
            for j in 0..n {
                probs.push(nn::sigmoid(o[[0, j]]));
                offsets.push([o[[1, j]], o[[2, j]], o[[3, j]], o[[4, j]]]);
            }
            if keep {
                head_hidden.push(hidden);
                head_caches.push([c1, c2]);
            }
        }
        let cache = keep.then(|| ForwardCache {
            stem: stem_cache,
            a,
            stage_mid,
            stage_caches,
            lat_caches: lat_caches.into_iter().map(|c| c.expect("filled")).collect(),
            head_hidden,
            head_caches,
            probs: probs.clone(),
        });
        (DetectorOutput { probs, offsets }, cache)
    }

    fn grid_len_for(&self, shape: [usize; 3]) -> usize {
        self.config
            .levels
            .iter()
            .map(|l| shape.iter().map(|n| n / l.stride).product::<usize>())
            .sum()
    }

    /// Inference on a training-size patch.
    pub fn forward(&self, patch: &Volume3D<S>) -> Result<DetectorOutput<S>> {
        if patch.shape() != self.config.input_patch {
            return Err(Error::Shape(format!(
                "patch {:?} does not match detector input {:?}",
                patch.shape(),
                self.config.input_patch
            )));
        }
        Ok(self.run(patch, false).0)
    }

    /// Fully convolutional inference on any volume whose extents are
    /// multiples of the largest stride. Outputs follow
    /// `AnchorGrid::new(volume.shape(), levels)`.
    pub fn infer(&self, volume: &Volume3D<S>) -> Result<DetectorOutput<S>> {
        self.check_input(volume.shape())?;
        Ok(self.run(volume, false).0)
    }

    /// Forward pass that keeps activations for [`Detector::backward`].
    pub fn forward_train(&mut self, patch: &Volume3D<S>) -> Result<DetectorOutput<S>> {
        if patch.shape() != self.config.input_patch {
            return Err(Error::Shape(format!(
                "patch {:?} does not match detector input {:?}",
                patch.shape(),
                self.config.input_patch
            )));
        }
        let (out, cache) = self.run(patch, true);
        self.cache = cache;
        Ok(out)
    }

    /// Reverse pass from loss gradients w.r.t. probabilities and offsets.
    /// Consumes the cache of the last [`Detector::forward_train`].
    pub fn backward(&mut self, grad_prob: &[S], grad_reg: &[[S; 4]]) -> Result<Gradients<S>> {
        let cache = self.cache.take().ok_or(Error::MissingCache)?;
        if grad_prob.len() != cache.probs.len() || grad_reg.len() != cache.probs.len() {
            return Err(Error::Shape("loss gradients do not match the anchor count".into()));
        }
        let mut grads = self.zero_gradients();
        let levels = self.stages.len();

        // Head, per level.
        let mut dpyr: Vec<Array4<S>> = Vec::with_capacity(levels);
        let mut start = 0;
        for lvl in 0..levels {
            let hidden = &cache.head_hidden[lvl];
            let (_, d, h, w) = hidden.dim();
            let n = d * h * w;
            let mut dout = Array4::<S>::zeros((5, d, h, w));
            {
                let flat = dout.as_slice_mut().expect("fresh array");
                for j in 0..n {
                    let i = start + j;
                    flat[j] = nn::sigmoid_backward(cache.probs[i], grad_prob[i]);
                    for k in 0..4 {
                        flat[(k + 1) * n + j] = grad_reg[i][k];
                    }
                }
            }
            start += n;
            let [c1, c2] = &cache.head_caches[lvl];
            let dhidden = self.convs[self.head_out].backward(c2, &dout, &mut grads.convs[self.head_out]);
            let dhc = nn::relu_backward(hidden, &dhidden);
            let dp = self.convs[self.head_conv].backward(c1, &dhc, &mut grads.convs[self.head_conv]);
            dpyr.push(dp);
        }

        // Top-down pathway: p_i feeds p_{i-1} through upsampling.
        let mut da: Vec<Option<Array4<S>>> = vec![None; levels + 1];
        for i in 0..levels {
            if i > 0 {
                let down = nn::upsample2_backward(&dpyr[i - 1]);
                dpyr[i] += &down;
            }
            let lat = self.laterals[i];
            let d = self.convs[lat].backward(&cache.lat_caches[i], &dpyr[i], &mut grads.convs[lat]);
            da[i + 1] = Some(d);
        }

        // Backbone, deepest stage first.
        for i in (0..levels).rev() {
            let st = &self.stages[i];
            let out = &cache.a[i + 1];
            let dout = da[i + 1].take().expect("gradient reaches every stage");
            let dsum = nn::relu_backward(out, &dout);
            let [ca, cb, cs] = &cache.stage_caches[i];
            let dmid = self.convs[st.conv_b].backward(cb, &dsum, &mut grads.convs[st.conv_b]);
            let dya = nn::relu_backward(&cache.stage_mid[i], &dmid);
            let mut dprev = self.convs[st.conv_a].backward(ca, &dya, &mut grads.convs[st.conv_a]);
            dprev += &self.convs[st.skip].backward(cs, &dsum, &mut grads.convs[st.skip]);
            match &mut da[i] {
                Some(acc) => *acc += &dprev,
                slot @ None => *slot = Some(dprev),
            }
        }
        let dstem = nn::relu_backward(&cache.a[0], &da[0].take().expect("stem gradient"));
        self.convs[self.stem].backward(&cache.stem, &dstem, &mut grads.convs[self.stem]);
        Ok(grads)
    }

    /// One Adam update with learning rate `lr`.
    pub fn step(&mut self, grads: &Gradients<S>, lr: f64) {
        self.step += 1;
        let AdamParams { beta1, beta2, eps } = self.adam;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (S::of(beta1), S::of(beta2));
        let (ob1, ob2) = (S::one() - b1, S::one() - b2);
        let (c1, c2, lr, eps) = (S::of(c1), S::of(c2), S::of(lr), S::of(eps));
        for ((conv, g), (m, v)) in self.convs.iter_mut().zip(&grads.convs).zip(self.moments.iter_mut()) {
            let update = |p: &mut S, g: S, m: &mut S, v: &mut S| {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            };
            for (((p, g), m), v) in conv
                .weight
                .iter_mut()
                .zip(g.weight.iter())
                .zip(m.weight.iter_mut())
                .zip(v.weight.iter_mut())
            {
                update(p, *g, m, v);
            }
            for (((p, g), m), v) in conv
                .bias
                .iter_mut()
                .zip(g.bias.iter())
                .zip(m.bias.iter_mut())
                .zip(v.bias.iter_mut())
            {
                update(p, *g, m, v);
            }
        }
    }

    pub fn params_finite(&self) -> bool {
        self.convs
            .iter()
            .all(|c| c.weight.iter().chain(c.bias.iter()).all(|v| v.is_finite()))
    }
}

/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"FMIXCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    dtype: String,
    step: u64,
    config: DetectorConfig,
    tensors: Vec<TensorEntry>,
}

impl<S: Scalar> Detector<S> {
    fn tensors(&self) -> Vec<(String, Vec<usize>, Vec<S>)> {
        let mut out = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            let conv = &self.convs[i];
            let (m, v) = &self.moments[i];
            let w_shape = conv.weight.shape().to_vec();
            let b_shape = conv.bias.shape().to_vec();
            let flat = |a: &ndarray::Array2<S>| a.iter().copied().collect::<Vec<_>>();
            let flat1 = |a: &ndarray::Array1<S>| a.iter().copied().collect::<Vec<_>>();
            out.push((format!("{name}.weight"), w_shape.clone(), flat(&conv.weight)));
            out.push((format!("{name}.bias"), b_shape.clone(), flat1(&conv.bias)));
            out.push((format!("{name}.weight.adam_m"), w_shape.clone(), flat(&m.weight)));
            out.push((format!("{name}.bias.adam_m"), b_shape.clone(), flat1(&m.bias)));
            out.push((format!("{name}.weight.adam_v"), w_shape, flat(&v.weight)));
            out.push((format!("{name}.bias.adam_v"), b_shape, flat1(&v.bias)));
        }
        out
    }

    /// Checkpoint layout: magic `FMIXCKPT`, header length as little-endian
    /// u64, JSON header (dtype, step, config, tensor names and shapes), then
    /// the tensors as raw little-endian values in header order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors = self.tensors();
        let header = CheckpointHeader {
            dtype: S::DTYPE.to_string(),
            step: self.step,
            config: self.config.clone(),
            tensors: tensors
                .iter()
                .map(|(n, s, _)| TensorEntry {
                    name: n.clone(),
                    shape: s.clone(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        for (_, _, values) in &tensors {
            for v in values {
                match S::DTYPE {
                    "f32" => bytes.extend_from_slice(&v.to_f32().expect("f32").to_le_bytes()),
                    _ => bytes.extend_from_slice(&v.f64().to_le_bytes()),
                }
            }
        }
        let tmp = path.with_extension("tmp");
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        drop(file);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::load(path, m.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| Error::load(path, format!("malformed header: {e}")))?;
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::load(path, format!("unsupported dtype {other}"))),
        };
        let mut model = Detector::<S>::new(header.config.clone())?;
        let expected = model.tensors();
        if expected.len() != header.tensors.len()
            || expected
                .iter()
                .zip(&header.tensors)
                .any(|((n, s, _), e)| *n != e.name || *s != e.shape)
        {
            return Err(bad("tensor list does not match the configured architecture"));
        }
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        let payload = &bytes[16 + hlen..];
        if payload.len() != total * width {
            return Err(bad("payload length does not match the header"));
        }
        let values: Vec<S> = payload
            .chunks_exact(width)
            .map(|c| match width {
                4 => S::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                _ => S::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
            })
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter values"));
        }
        let mut it = values.into_iter();
        let mut take = |n: usize| it.by_ref().take(n).collect::<Vec<S>>();
        for i in 0..model.convs.len() {
            let wn = model.convs[i].weight.len();
            let bn = model.convs[i].bias.len();
            let fill2 = |dst: &mut ndarray::Array2<S>, src: Vec<S>| {
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = s)
            };
            let fill1 = |dst: &mut ndarray::Array1<S>, src: Vec<S>| {
                dst.iter_mut().zip(src).for_each(|(d, s)| *d = s)
            };
            fill2(&mut model.convs[i].weight, take(wn));
            fill1(&mut model.convs[i].bias, take(bn));
            fill2(&mut model.moments[i].0.weight, take(wn));
            fill1(&mut model.moments[i].0.bias, take(bn));
            fill2(&mut model.moments[i].1.weight, take(wn));
            fill1(&mut model.moments[i].1.bias, take(bn));
        }
        model.step = header.step;
        Ok(model)
    }
}

/// Split per-anchor outputs of [`Detector::infer`] by level, as flat slices.
pub fn level_slices<'a, S>(grid: &AnchorGrid, values: &'a [S]) -> Vec<&'a [S]> {
    (0..grid.levels().len()).map(|l| &values[grid.level_range(l)]).collect()
}

/// Per-level objectness map as a `[1, d, h, w]` array (test and debugging aid).
pub fn level_map<S: Scalar>(grid: &AnchorGrid, probs: &[S], level: usize) -> Array4<S> {
    let [d, h, w] = grid.level_shape(level);
    Array4::from_shape_vec((1, d, h, w), probs[grid.level_range(level)].to_vec()).expect("level size")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config() -> DetectorConfig {
        DetectorConfig {
            input_patch: [8, 8, 8],
            channels: vec![2, 3, 4],
            fpn_channels: 3,
            levels: crate::anchors::desk_levels(),
            weight_init_seed: 3,
        }
    }

    #[test]
    fn output_shapes_and_range() {
        let m = Detector::<f32>::new(DetectorConfig::default()).unwrap();
        let v = crate::volume::generate_scan(
            &crate::volume::GenConfig {
                volume_shape: [32; 3],
                nodule_diameter_range: [4.0, 8.0],
                ..Default::default()
            },
            0,
        )
        .unwrap()
        .volume
        .standardized();
        let out = m.forward(&v).unwrap();
        assert_eq!(out.probs.len(), m.grid().len());
        assert!(out.probs.iter().all(|p| *p > 0.0 && *p < 1.0));
        let again = m.forward(&v).unwrap();
        assert_eq!(out, again);
        assert!(m.param_count() > 30_000 && m.param_count() < 80_000, "{}", m.param_count());
    }

    #[test]
    fn zero_head_gives_constant_probability() {
        let mut m = Detector::<f64>::new(micro_config()).unwrap();
        let out_idx = m.convs.len() - 1;
        m.convs[out_idx].weight.fill(0.0);
        m.convs[out_idx].bias[0] = 0.4;
        let v = Volume3D::from_fn([8; 3], |(z, y, x)| (z + 2 * y + 3 * x) as f64 / 10.0);
        let out = m.forward(&v).unwrap();
        let expect = nn::sigmoid(0.4);
        assert!(out.probs.iter().all(|p| (*p - expect).abs() < 1e-15));
    }

    #[test]
    fn rejects_wrong_shapes_and_missing_cache() {
        let mut m = Detector::<f64>::new(micro_config()).unwrap();
        assert!(m.forward(&Volume3D::zeros([8, 8, 4])).is_err());
        assert!(m.infer(&Volume3D::zeros([16, 8, 12])).is_ok());
        assert!(m.infer(&Volume3D::zeros([16, 8, 6])).is_err());
        let n = m.grid().len();
        assert!(matches!(
            m.backward(&vec![0.0; n], &vec![[0.0; 4]; n]),
            Err(Error::MissingCache)
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = micro_config();
        c.channels = vec![2, 3];
        assert!(c.validate().is_err());
        let mut c = micro_config();
        c.levels = vec![LevelSpec::new(2, 4), LevelSpec::new(8, 8)];
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = Detector::<f64>::new(micro_config()).unwrap();
        let before = m.convs.clone();
        let g = m.zero_gradients();
        m.step(&g, 1e-3);
        assert_eq!(m.convs, before);
        assert_eq!(m.step_count(), 1);
    }

    #[test]
    fn cosine_schedule() {
        assert_eq!(cosine_lr(0, 100, 1e-3), 1e-3);
        assert!(cosine_lr(100, 100, 1e-3).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Detector::<f32>::new(micro_config()).unwrap();
        let v = Volume3D::from_fn([8; 3], |(z, y, x)| ((z * y + x) % 5) as f32 / 5.0);
        let out = m.forward_train(&v).unwrap();
        let n = out.probs.len();
        let g = m.backward(&vec![0.1; n], &vec![[0.05; 4]; n]).unwrap();
        m.step(&g, 1e-3);
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = Detector::<f32>::load(&path).unwrap();
        assert_eq!(back.convs, m.convs);
        assert_eq!(back.moments, m.moments);
        assert_eq!(back.step_count(), 1);
        let bytes = fs::read(&path).unwrap();
        back.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), bytes);

        let mut corrupt = bytes.clone();
        corrupt.truncate(bytes.len() - 3);
        fs::write(&path, corrupt).unwrap();
        assert!(Detector::<f32>::load(&path).is_err());
    }
}
