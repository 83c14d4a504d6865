//! Volumes, boxes, synthetic scan generation, cropping and the on-disk scan
//! format.
//!
//! Coordinates are continuous voxel units: voxel `i` along an axis covers
//! `[i, i + 1)` and has its center at `i + 0.5`. A volume of extent `n`
//! spans `[0, n]`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Dense scalar field in z-major order with physical voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D<S> {
    data: Array3<S>,
    spacing: [f64; 3],
}

impl<S: Scalar> Volume3D<S> {
    pub fn new(data: Array3<S>, spacing: [f64; 3]) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("volume contains non-finite voxels".into()));
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("spacing must be positive, got {spacing:?}")));
        }
        if data.is_empty() {
            return Err(Error::Shape("volume must have positive extent".into()));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().to_owned()
        };
        Ok(Self { data, spacing })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            data: Array3::zeros(shape),
            spacing: [1.0; 3],
        }
    }

    pub fn from_fn(shape: [usize; 3], f: impl FnMut((usize, usize, usize)) -> S) -> Self {
        Self {
            data: Array3::from_shape_fn(shape, f),
            spacing: [1.0; 3],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.data.dim();
        [d.0, d.1, d.2]
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &Array3<S> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<S> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<S> {
        self.data
    }

    /// Voxels in z-major order.
    pub fn as_slice(&self) -> &[S] {
        self.data.as_slice().expect("volumes are kept in standard layout")
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_cubic(&self) -> bool {
        let [d, h, w] = self.shape();
        d == h && h == w
    }

    pub fn cast<T: Scalar>(&self) -> Volume3D<T> {
        Volume3D {
            data: self.data.mapv(|v| T::of(v.f64())),
            spacing: self.spacing,
        }
    }

    /// Rescale to zero mean and unit variance. Constant volumes are only
    /// centered.
    pub fn standardize(&mut self) {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|v| v.f64()).sum::<f64>() / n;
        let var = self
            .data
            .iter()
            .map(|v| (v.f64() - mean).powi(2))
            .sum::<f64>()
            / n;
        let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        let (mean, scale) = (S::of(mean), S::of(scale));
        self.data.mapv_inplace(|v| (v - mean) * scale);
    }

    pub fn standardized(mut self) -> Self {
        self.standardize();
        self
    }
}

/// Axis-aligned cube: center `(z, y, x)` in voxel coordinates and edge length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub edge: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], edge: f64) -> Self {
        Self { center, edge }
    }

    pub fn lo(&self, axis: usize) -> f64 {
        self.center[axis] - self.edge / 2.0
    }

    pub fn hi(&self, axis: usize) -> f64 {
        self.center[axis] + self.edge / 2.0
    }

    pub fn volume(&self) -> f64 {
        self.edge.powi(3)
    }

    pub fn center_distance(&self, other: &Box3D) -> f64 {
        (0..3)
            .map(|a| (self.center[a] - other.center[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Whether the center lies inside `[0, shape)` on every axis.
    pub fn center_inside(&self, shape: [usize; 3]) -> bool {
        (0..3).all(|a| self.center[a] >= 0.0 && self.center[a] < shape[a] as f64)
    }
}

/// A volume with its (possibly empty) annotation list.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScan<S = f32> {
    pub id: String,
    pub volume: Volume3D<S>,
    pub boxes: Vec<Box3D>,
}

/// Parameters of the synthetic scan generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub volume_shape: [usize; 3],
    pub nodule_count_range: [usize; 2],
    /// Nodule diameters in voxels.
    pub nodule_diameter_range: [f64; 2],
    /// Additive peak intensity of nodules and distractors.
    pub nodule_contrast_range: [f64; 2],
    pub distractor_count_range: [usize; 2],
    pub noise_sigma: f64,
    /// Peak amplitude of the smooth low-frequency bias field.
    #[serde(default = "default_bias_amplitude")]
    pub bias_amplitude: f64,
    #[serde(default = "default_spacing")]
    pub spacing_mm: [f64; 3],
    pub seed: u64,
}

fn default_bias_amplitude() -> f64 {
    0.3
}

fn default_spacing() -> [f64; 3] {
    [1.0; 3]
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            volume_shape: [64, 64, 64],
            nodule_count_range: [1, 3],
            nodule_diameter_range: [4.0, 10.0],
            nodule_contrast_range: [0.8, 2.0],
            distractor_count_range: [2, 5],
            noise_sigma: 0.5,
            bias_amplitude: default_bias_amplitude(),
            spacing_mm: default_spacing(),
            seed: 0,
        }
    }
}

/// Smallest nodule diameter the generator accepts (voxels at 1 mm spacing).
pub const MIN_NODULE_DIAMETER: f64 = 3.0;

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.volume_shape.contains(&0) {
            return bad(format!("volume_shape must be positive, got {:?}", self.volume_shape));
        }
        if self.nodule_count_range[0] > self.nodule_count_range[1] {
            return bad(format!("empty nodule_count_range {:?}", self.nodule_count_range));
        }
        if self.distractor_count_range[0] > self.distractor_count_range[1] {
            return bad(format!("empty distractor_count_range {:?}", self.distractor_count_range));
        }
        let [dmin, dmax] = self.nodule_diameter_range;
        if !(dmin <= dmax) || dmin < MIN_NODULE_DIAMETER {
            return bad(format!(
                "nodule_diameter_range {:?} must be nonempty with minimum >= {MIN_NODULE_DIAMETER}",
                self.nodule_diameter_range
            ));
        }
        let [cmin, cmax] = self.nodule_contrast_range;
        if !(cmin <= cmax) || cmin <= 0.0 {
            return bad(format!(
                "nodule_contrast_range {:?} must be nonempty and strictly positive",
                self.nodule_contrast_range
            ));
        }
        if !(self.noise_sigma >= 0.0) || !(self.bias_amplitude >= 0.0) {
            return bad("noise_sigma and bias_amplitude must be non-negative".into());
        }
        if self.spacing_mm.iter().any(|s| !(*s > 0.0)) {
            return bad(format!("spacing_mm must be positive, got {:?}", self.spacing_mm));
        }
        if self.volume_shape.iter().any(|&n| (n as f64) < dmax) {
            return bad(format!(
                "volume_shape {:?} cannot hold a nodule of diameter {dmax}",
                self.volume_shape
            ));
        }
        Ok(())
    }
}

fn uniform(rng: &mut rng::Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn uniform_count(rng: &mut rng::Rng, [lo, hi]: [usize; 2]) -> usize {
    rng.gen_range(lo..=hi)
}

/// Separable Gaussian blur with sigma 1 voxel and radius 2, zero boundary.
const BLUR_KERNEL: [f64; 5] = [
    0.054_488_684_549_642_33,
    0.244_201_342_003_233_6,
    0.402_619_946_894_248_1,
    0.244_201_342_003_233_6,
    0.054_488_684_549_642_33,
];

fn blur(field: &Array3<f64>) -> Array3<f64> {
    const K: [f64; 5] = BLUR_KERNEL;
    let mut cur = field.clone();
    for axis in 0..3 {
        let dim = cur.dim();
        let n = [dim.0, dim.1, dim.2][axis] as isize;
        let mut out = Array3::<f64>::zeros(dim);
        for ((z, y, x), o) in out.indexed_iter_mut() {
            let p = [z, y, x][axis] as isize;
            let mut acc = 0.0;
            for (k, w) in K.iter().enumerate() {
                let q = p + k as isize - 2;
                if q < 0 || q >= n {
                    continue;
                }
                let mut idx = [z, y, x];
                idx[axis] = q as usize;
                acc += w * cur[idx];
            }
            *o = acc;
        }
        cur = out;
    }
    cur
}

/// Soft-edged solid: full `contrast` up to `radius`, Gaussian falloff with
/// width `sigma` beyond it.
fn soft_profile(dist: f64, radius: f64, sigma: f64, contrast: f64) -> f64 {
    if dist <= radius {
        contrast
    } else {
        contrast * (-((dist - radius) / sigma).powi(2)).exp()
    }
}

fn voxel_range(center: f64, reach: f64, n: usize) -> std::ops::Range<usize> {
    let lo = (center - reach).floor().max(0.0) as usize;
    let hi = ((center + reach).ceil().max(0.0) as usize).min(n);
    lo..hi.max(lo)
}

fn render_sphere(field: &mut Array3<f64>, center: [f64; 3], diameter: f64, contrast: f64) {
    let radius = diameter / 2.0;
    let sigma = 0.15 * diameter;
    let reach = radius + 3.0 * sigma;
    let (d, h, w) = field.dim();
    for z in voxel_range(center[0], reach, d) {
        for y in voxel_range(center[1], reach, h) {
            for x in voxel_range(center[2], reach, w) {
                let dist = ((z as f64 + 0.5 - center[0]).powi(2)
                    + (y as f64 + 0.5 - center[1]).powi(2)
                    + (x as f64 + 0.5 - center[2]).powi(2))
                .sqrt();
                if dist <= reach {
                    field[[z, y, x]] += soft_profile(dist, radius, sigma, contrast);
                }
            }
        }
    }
}

fn render_tube(field: &mut Array3<f64>, point: [f64; 3], dir: [f64; 3], radius: f64, contrast: f64) {
    let sigma = 0.3 * radius;
    let reach = radius + 3.0 * sigma;
    for ((z, y, x), v) in field.indexed_iter_mut() {
        let p = [z as f64 + 0.5 - point[0], y as f64 + 0.5 - point[1], x as f64 + 0.5 - point[2]];
        let along = p[0] * dir[0] + p[1] * dir[1] + p[2] * dir[2];
        let perp2 = p.iter().map(|c| c * c).sum::<f64>() - along * along;
        let dist = perp2.max(0.0).sqrt();
        if dist <= reach {
            *v += soft_profile(dist, radius, sigma, contrast);
        }
    }
}

/// Axis-aligned ellipsoid elongated threefold along `long_axis`.
fn render_blob(field: &mut Array3<f64>, center: [f64; 3], radius: f64, long_axis: usize, contrast: f64) {
    let mut semi = [radius; 3];
    semi[long_axis] = 3.0 * radius;
    let sigma = 0.3 * radius;
    let (d, h, w) = field.dim();
    let dims = [d, h, w];
    let ranges: Vec<_> = (0..3)
        .map(|a| voxel_range(center[a], semi[a] + 3.0 * sigma, dims[a]))
        .collect();
    for z in ranges[0].clone() {
        for y in ranges[1].clone() {
            for x in ranges[2].clone() {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                // Normalized radius scaled back to voxel units of the short axis.
                let q = (0..3)
                    .map(|a| ((p[a] - center[a]) / semi[a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let dist = q * radius;
                field[[z, y, x]] += soft_profile(dist, radius, sigma, contrast);
            }
        }
    }
}

fn random_direction(rng: &mut rng::Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Render synthetic scan `index` of the dataset described by `cfg`.
///
/// The result depends only on `(cfg, index)`. Random draws happen in this
/// order: background noise, bias field, nodules, distractors.
pub fn generate_scan(cfg: &GenConfig, index: u64) -> Result<LabeledScan<f32>> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, index);
    let shape = cfg.volume_shape;
    let [d, h, w] = shape;

    let noise = Array3::from_shape_simple_fn((d, h, w), || {
        let v: f64 = StandardNormal.sample(&mut rng);
        v
    });
    // Blurring shrinks the noise std by the kernel's L2 norm once per axis.
    let shrink = BLUR_KERNEL.iter().map(|k| k * k).sum::<f64>().powf(1.5);
    let mut field = blur(&noise).mapv(|v| v * cfg.noise_sigma / shrink);

    let terms: Vec<([f64; 3], f64, f64)> = (0..3)
        .map(|_| {
            let freq = [rng.gen_range(0.0..1.5), rng.gen_range(0.0..1.5), rng.gen_range(0.0..1.5)];
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let amp = rng.gen_range(0.0..1.0);
            (freq, phase, amp)
        })
        .collect();
    let amp_total: f64 = terms.iter().map(|t| t.2).sum::<f64>().max(1e-9);
    for ((z, y, x), v) in field.indexed_iter_mut() {
        let p = [z as f64 / d as f64, y as f64 / h as f64, x as f64 / w as f64];
        let bias: f64 = terms
            .iter()
            .map(|(f, ph, a)| {
                a * (std::f64::consts::TAU * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2]) + ph).cos()
            })
            .sum();
        *v += cfg.bias_amplitude * bias / amp_total;
    }

    let count = uniform_count(&mut rng, cfg.nodule_count_range);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(count);
    for _ in 0..count {
        let diameter = uniform(&mut rng, cfg.nodule_diameter_range);
        let contrast = uniform(&mut rng, cfg.nodule_contrast_range);
        let mut center = [0.0; 3];
        for attempt in 0..100 {
            for a in 0..3 {
                center[a] = uniform(&mut rng, [diameter / 2.0, shape[a] as f64 - diameter / 2.0]);
            }
            let clear = boxes
                .iter()
                .all(|b| b.center_distance(&Box3D::new(center, diameter)) > (b.edge + diameter) / 2.0 + 2.0);
            if clear || attempt == 99 {
                break;
            }
        }
        render_sphere(&mut field, center, diameter, contrast);
        boxes.push(Box3D::new(center, diameter));
    }

    let distractors = uniform_count(&mut rng, cfg.distractor_count_range);
    for _ in 0..distractors {
        let contrast = uniform(&mut rng, cfg.nodule_contrast_range);
        let point = [
            rng.gen_range(0.0..d as f64),
            rng.gen_range(0.0..h as f64),
            rng.gen_range(0.0..w as f64),
        ];
        if rng.gen_bool(0.5) {
            let dir = random_direction(&mut rng);
            let radius = rng.gen_range(0.8..1.8);
            render_tube(&mut field, point, dir, radius, contrast);
        } else {
            let radius = rng.gen_range(1.0..2.0);
            let axis = rng.gen_range(0..3);
            render_blob(&mut field, point, radius, axis, contrast);
        }
    }

    let volume = Volume3D::new(field.mapv(|v| v as f32), cfg.spacing_mm)?;
    Ok(LabeledScan {
        id: format!("scan_{index:05}"),
        volume,
        boxes,
    })
}

/// Cut a `size` window whose center voxel is `center`, zero-padding outside
/// the scan. Boxes are shifted into patch coordinates and dropped when their
/// center leaves the window.
pub fn crop_patch<S: Scalar>(
    scan: &LabeledScan<S>,
    center: [i64; 3],
    size: [usize; 3],
    max_stride: usize,
) -> Result<LabeledScan<S>> {
    if max_stride == 0 || size.iter().any(|&s| s == 0 || s % max_stride != 0) {
        return Err(Error::Config(format!(
            "patch size {size:?} must be a positive multiple of the maximum stride {max_stride}"
        )));
    }
    let src = scan.volume.data();
    let src_shape = scan.volume.shape();
    let origin: [i64; 3] = std::array::from_fn(|a| center[a] - (size[a] / 2) as i64);
    let mut out = Array3::<S>::zeros((size[0], size[1], size[2]));

    // Overlap of the window with the source, in source coordinates.
    let lo: [i64; 3] = std::array::from_fn(|a| origin[a].max(0));
    let hi: [i64; 3] = std::array::from_fn(|a| (origin[a] + size[a] as i64).min(src_shape[a] as i64));
    if (0..3).all(|a| lo[a] < hi[a]) {
        let sr = |a: usize| lo[a] as usize..hi[a] as usize;
        let src_view = src.slice(s![sr(0), sr(1), sr(2)]);
        let dst = |a: usize| (lo[a] - origin[a]) as usize..(hi[a] - origin[a]) as usize;
        out.slice_mut(s![dst(0), dst(1), dst(2)]).assign(&src_view);
    }

    let boxes = scan
        .boxes
        .iter()
        .map(|b| Box3D::new(std::array::from_fn(|a| b.center[a] - origin[a] as f64), b.edge))
        .filter(|b| b.center_inside(size))
        .collect();
    Ok(LabeledScan {
        id: scan.id.clone(),
        volume: Volume3D::new(out, scan.volume.spacing())?,
        boxes,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    boxes: Vec<Box3D>,
    id: String,
}

/// Paths of the voxel payload and JSON sidecar for `id` inside `dir`.
pub fn scan_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.vol")), dir.join(format!("{id}.json")))
}

/// Write `<dir>/<id>.vol` and `<dir>/<id>.json`; returns the sidecar path.
pub fn write_scan<S: Scalar>(scan: &LabeledScan<S>, dir: &Path) -> Result<PathBuf> {
    let (vol_path, json_path) = scan_paths(dir, &scan.id);
    let mut bytes = Vec::with_capacity(scan.volume.len() * 4);
    for v in scan.volume.as_slice() {
        bytes.extend_from_slice(&(v.to_f32().unwrap_or(f32::NAN)).to_le_bytes());
    }
    fs::write(&vol_path, bytes).map_err(|e| Error::io(&vol_path, e))?;
    let sidecar = Sidecar {
        shape: scan.volume.shape(),
        spacing_mm: scan.volume.spacing(),
        boxes: scan.boxes.clone(),
        id: scan.id.clone(),
    };
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    Ok(json_path)
}

/// Load a scan from its sidecar path (`.json`) or payload path (`.vol`).
pub fn read_scan(path: &Path) -> Result<LabeledScan<f32>> {
    let json_path = path.with_extension("json");
    let vol_path = path.with_extension("vol");
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::load(&json_path, format!("malformed sidecar: {e}")))?;
    let [d, h, w] = sidecar.shape;
    if d == 0 || h == 0 || w == 0 {
        return Err(Error::load(&json_path, "shape must be positive"));
    }
    let bytes = fs::read(&vol_path).map_err(|e| Error::io(&vol_path, e))?;
    let expected = 4 * d * h * w;
    if bytes.len() != expected {
        return Err(Error::load(
            &vol_path,
            format!("payload has {} bytes, shape {:?} needs {expected}", bytes.len(), sidecar.shape),
        ));
    }
    let voxels: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if voxels.iter().any(|v| !v.is_finite()) {
        return Err(Error::load(&vol_path, "non-finite voxel values"));
    }
    if sidecar.boxes.iter().any(|b| !(b.edge > 0.0) || b.center.iter().any(|c| !c.is_finite())) {
        return Err(Error::load(&json_path, "boxes need finite centers and positive edges"));
    }
    let data = Array3::from_shape_vec((d, h, w), voxels).expect("length checked above");
    let volume = Volume3D::new(data, sidecar.spacing_mm).map_err(|e| Error::load(&json_path, e.to_string()))?;
    Ok(LabeledScan {
        id: sidecar.id,
        volume,
        boxes: sidecar.boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GenConfig {
        GenConfig {
            volume_shape: [32, 32, 32],
            nodule_count_range: [1, 3],
            nodule_diameter_range: [4.0, 8.0],
            distractor_count_range: [0, 2],
            seed: 11,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_scan(&cfg, 3).unwrap();
        let b = generate_scan(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_scan(&cfg, 4).unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn box_count_within_range() {
        let cfg = small_cfg();
        for i in 0..20 {
            let n = generate_scan(&cfg, i).unwrap().boxes.len();
            assert!((1..=3).contains(&n), "{n}");
        }
    }

    #[test]
    fn rejects_volume_too_small_for_nodule() {
        let cfg = GenConfig {
            volume_shape: [8, 64, 64],
            nodule_diameter_range: [4.0, 10.0],
            ..GenConfig::default()
        };
        assert!(matches!(generate_scan(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_invalid_ranges() {
        let mut cfg = GenConfig::default();
        cfg.nodule_count_range = [3, 1];
        assert!(cfg.validate().is_err());
        let mut cfg = GenConfig::default();
        cfg.nodule_diameter_range = [2.0, 6.0];
        assert!(cfg.validate().is_err());
        let mut cfg = GenConfig::default();
        cfg.nodule_contrast_range = [0.0, 1.0];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn nodules_are_brighter_than_surroundings() {
        let cfg = GenConfig {
            distractor_count_range: [0, 0],
            ..small_cfg()
        };
        for i in 0..10 {
            let scan = generate_scan(&cfg, i).unwrap();
            let vol = scan.volume.data();
            let global = vol.iter().map(|v| *v as f64).sum::<f64>() / vol.len() as f64;
            for b in &scan.boxes {
                let r = b.edge / 2.0;
                let (mut sum, mut n) = (0.0, 0);
                for ((z, y, x), v) in vol.indexed_iter() {
                    let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                    if (0..3).map(|a| (p[a] - b.center[a]).powi(2)).sum::<f64>().sqrt() <= r {
                        sum += *v as f64;
                        n += 1;
                    }
                }
                assert!(n > 0);
                assert!(sum / n as f64 > global, "scan {i}");
            }
        }
    }

    #[test]
    fn identity_crop() {
        let scan = generate_scan(&small_cfg(), 0).unwrap();
        let patch = crop_patch(&scan, [16, 16, 16], [32, 32, 32], 4).unwrap();
        assert_eq!(patch.volume, scan.volume);
        assert_eq!(patch.boxes, scan.boxes);
    }

    #[test]
    fn crop_drops_outside_boxes_and_pads_with_zero() {
        let mut scan = LabeledScan {
            id: "t".into(),
            volume: Volume3D::from_fn([16, 16, 16], |_| 1.0f32),
            boxes: vec![Box3D::new([4.0, 8.0, 8.0], 4.0), Box3D::new([8.0, 8.0, 11.9], 4.0)],
        };
        // Window x in [0, 12): second box center 11.9 is inside, move it to 12.1.
        let p = crop_patch(&scan, [8, 8, 6], [16, 16, 12], 4).unwrap();
        assert_eq!(p.boxes.len(), 2);
        scan.boxes[1].center[2] = 12.1;
        let p = crop_patch(&scan, [8, 8, 6], [16, 16, 12], 4).unwrap();
        assert_eq!(p.boxes.len(), 1);

        // Window extends 4 voxels past the z boundary.
        let p = crop_patch(&scan, [12, 8, 8], [16, 16, 16], 4).unwrap();
        let data = p.volume.data();
        for ((z, _, _), v) in data.indexed_iter() {
            if z >= 12 {
                assert_eq!(*v, 0.0);
            } else {
                assert_eq!(*v, 1.0);
            }
        }
        assert_eq!(p.boxes[0].center, [0.0, 8.0, 8.0]);
    }

    #[test]
    fn crop_rejects_indivisible_size() {
        let scan = generate_scan(&small_cfg(), 0).unwrap();
        assert!(matches!(
            crop_patch(&scan, [16, 16, 16], [30, 32, 32], 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn standardize_gives_zero_mean_unit_variance() {
        let scan = generate_scan(&small_cfg(), 2).unwrap();
        let v = scan.volume.standardized();
        let n = v.len() as f64;
        let mean = v.as_slice().iter().map(|x| *x as f64).sum::<f64>() / n;
        let var = v.as_slice().iter().map(|x| (*x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
