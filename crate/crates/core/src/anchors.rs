//! Multi-level cubic anchors: enumeration, IoU, target assignment, offset
//! encoding and greedy suppression.
//!
//! Anchors are indexed level by level (in the order the levels are given),
//! and z-major within a level:
//!
//! ```text
//! index = level_offset[l] + (z * H_l + y) * W_l + x,   H_l = H / stride_l, ...
//! ```

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::volume::Box3D;

pub const POSITIVE_IOU: f64 = 0.3;
pub const NEGATIVE_IOU: f64 = 0.1;
pub const DEFAULT_NMS_IOU: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub stride: usize,
    pub base_edge: usize,
}

impl LevelSpec {
    pub const fn new(stride: usize, base_edge: usize) -> Self {
        Self { stride, base_edge }
    }
}

/// Two-level scheme used at desk scale (32³ patches).
pub fn desk_levels() -> Vec<LevelSpec> {
    vec![LevelSpec::new(2, 4), LevelSpec::new(4, 8)]
}

/// Four-level scheme of the full-size detector (160³ patches).
pub fn full_levels() -> Vec<LevelSpec> {
    vec![
        LevelSpec::new(2, 4),
        LevelSpec::new(4, 8),
        LevelSpec::new(8, 16),
        LevelSpec::new(16, 32),
    ]
}

/// Position of an anchor within the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorLocation {
    pub level: usize,
    pub cell: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    patch_shape: [usize; 3],
    levels: Vec<LevelSpec>,
    offsets: Vec<usize>,
    total: usize,
}

impl AnchorGrid {
    pub fn new(patch_shape: [usize; 3], levels: &[LevelSpec]) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("anchor grid needs at least one level".into()));
        }
        let mut offsets = Vec::with_capacity(levels.len());
        let mut total = 0;
        for l in levels {
            if l.stride == 0 || l.base_edge == 0 {
                return Err(Error::Config(format!("degenerate level {l:?}")));
            }
            if let Some(n) = patch_shape.iter().find(|&&n| n == 0 || n % l.stride != 0) {
                return Err(Error::Config(format!(
                    "stride {} does not divide patch dimension {n} of {patch_shape:?}",
                    l.stride
                )));
            }
            offsets.push(total);
            total += patch_shape.iter().map(|n| n / l.stride).product::<usize>();
        }
        Ok(Self {
            patch_shape,
            levels: levels.to_vec(),
            offsets,
            total,
        })
    }

    pub fn patch_shape(&self) -> [usize; 3] {
        self.patch_shape
    }

    pub fn levels(&self) -> &[LevelSpec] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn max_stride(&self) -> usize {
        self.levels.iter().map(|l| l.stride).max().unwrap_or(1)
    }

    /// Cells per axis at `level`.
    pub fn level_shape(&self, level: usize) -> [usize; 3] {
        let s = self.levels[level].stride;
        self.patch_shape.map(|n| n / s)
    }

    /// Index range occupied by `level`.
    pub fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        let start = self.offsets[level];
        let n: usize = self.level_shape(level).iter().product();
        start..start + n
    }

    pub fn index(&self, loc: AnchorLocation) -> usize {
        let [_, h, w] = self.level_shape(loc.level);
        let [z, y, x] = loc.cell;
        self.offsets[loc.level] + (z * h + y) * w + x
    }

    pub fn location(&self, index: usize) -> AnchorLocation {
        assert!(index < self.total, "anchor index {index} out of range");
        let level = self.offsets.partition_point(|&o| o <= index) - 1;
        let [_, h, w] = self.level_shape(level);
        let rel = index - self.offsets[level];
        AnchorLocation {
            level,
            cell: [rel / (h * w), (rel / w) % h, rel % w],
        }
    }

    pub fn anchor(&self, index: usize) -> Box3D {
        let loc = self.location(index);
        let spec = self.levels[loc.level];
        let s = spec.stride as f64;
        Box3D::new(loc.cell.map(|c| (c as f64 + 0.5) * s), spec.base_edge as f64)
    }

    pub fn anchors(&self) -> impl Iterator<Item = Box3D> + '_ {
        (0..self.total).map(|i| self.anchor(i))
    }
}

/// Intersection over union of two axis-aligned cubes.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let mut inter = 1.0;
    for axis in 0..3 {
        let overlap = a.hi(axis).min(b.hi(axis)) - a.lo(axis).max(b.lo(axis));
        if overlap <= 0.0 {
            return 0.0;
        }
        inter *= overlap;
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Regression offsets `(dz, dy, dx, dd)` of `gt` relative to `anchor`.
pub fn encode_box(anchor: &Box3D, gt: &Box3D) -> [f64; 4] {
    [
        (gt.center[0] - anchor.center[0]) / anchor.edge,
        (gt.center[1] - anchor.center[1]) / anchor.edge,
        (gt.center[2] - anchor.center[2]) / anchor.edge,
        (gt.edge / anchor.edge).ln(),
    ]
}

pub fn decode_box(anchor: &Box3D, offsets: [f64; 4]) -> Box3D {
    Box3D::new(
        [
            anchor.center[0] + offsets[0] * anchor.edge,
            anchor.center[1] + offsets[1] * anchor.edge,
            anchor.center[2] + offsets[2] * anchor.edge,
        ],
        anchor.edge * offsets[3].exp(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorMask {
    Train,
    Ignore,
}

/// Per-anchor training targets, indexed like the [`AnchorGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorTargets<S> {
    pub cls: Vec<S>,
    pub reg: Vec<Option<[S; 4]>>,
    pub mask: Vec<AnchorMask>,
}

impl<S: Scalar> AnchorTargets<S> {
    /// All anchors negative and trainable.
    pub fn negatives(len: usize) -> Self {
        Self {
            cls: vec![S::zero(); len],
            reg: vec![None; len],
            mask: vec![AnchorMask::Train; len],
        }
    }

    /// Objectness-only targets, every anchor trainable.
    pub fn soft(cls: Vec<S>) -> Self {
        let n = cls.len();
        Self {
            cls,
            reg: vec![None; n],
            mask: vec![AnchorMask::Train; n],
        }
    }

    pub fn len(&self) -> usize {
        self.cls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cls.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.reg.iter().filter(|r| r.is_some()).count()
    }
}

/// Label anchors by their best IoU against `gt`: above 0.3 positive (with
/// offsets to the best-matching box), below 0.1 negative, otherwise ignored.
pub fn assign_targets<S: Scalar>(grid: &AnchorGrid, gt: &[Box3D]) -> AnchorTargets<S> {
    let mut targets = AnchorTargets::negatives(grid.len());
    if gt.is_empty() {
        return targets;
    }
    for (i, anchor) in grid.anchors().enumerate() {
        let (best, iou) = gt
            .iter()
            .enumerate()
            .map(|(j, g)| (j, iou3d(&anchor, g)))
            .fold((0, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if iou > POSITIVE_IOU {
            targets.cls[i] = S::one();
            targets.reg[i] = Some(encode_box(&anchor, &gt[best]).map(S::of));
        } else if iou >= NEGATIVE_IOU {
            targets.mask[i] = AnchorMask::Ignore;
        }
    }
    targets
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
    /// Linear index of the originating anchor; breaks score ties.
    pub anchor: usize,
}

/// Descending score, ascending anchor index on ties.
fn by_priority(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score.total_cmp(&a.score).then(a.anchor.cmp(&b.anchor))
}

/// Greedy suppression: a detection survives iff its IoU with every
/// previously kept one is below `iou_threshold`. Disjoint boxes never suppress
/// each other.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order = dets.to_vec();
    order.sort_by(by_priority);
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        if kept.iter().all(|k| {
            let iou = iou3d(&k.bbox, &d.bbox);
            iou == 0.0 || iou < iou_threshold
        }) {
            kept.push(d);
        }
    }
    kept
}

/// Turn per-anchor outputs into the `max_candidates` highest-scoring
/// detections, ordered by priority.
pub fn decode_detections<S: Scalar>(
    grid: &AnchorGrid,
    probs: &[S],
    offsets: &[[S; 4]],
    max_candidates: usize,
) -> Vec<Detection> {
    assert_eq!(probs.len(), grid.len());
    assert_eq!(offsets.len(), grid.len());
    let mut idx: Vec<usize> = (0..grid.len()).collect();
    let key = |i: &usize| Detection {
        bbox: Box3D::new([0.0; 3], 1.0),
        score: probs[*i].f64(),
        anchor: *i,
    };
    if idx.len() > max_candidates {
        idx.select_nth_unstable_by(max_candidates, |a, b| by_priority(&key(a), &key(b)));
        idx.truncate(max_candidates);
    }
    let mut dets: Vec<Detection> = idx
        .into_iter()
        .map(|i| {
            // Clamp the log-edge offset so a wild regression output cannot
            // produce infinite boxes.
            let mut o = offsets[i].map(|v| v.f64());
            o[3] = o[3].clamp(-4.0, 4.0);
            Detection {
                bbox: decode_box(&grid.anchor(i), o),
                score: probs[i].f64(),
                anchor: i,
            }
        })
        .collect();
    dets.sort_by(by_priority);
    dets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub scan_id: String,
    pub center: [f64; 3],
    pub edge: f64,
    pub score: f64,
}

/// One JSON object per line: `{"scan_id", "center", "edge", "score"}`.
pub fn write_detections_jsonl<W: Write>(mut out: W, scan_id: &str, dets: &[Detection]) -> Result<()> {
    for d in dets {
        let rec = DetectionRecord {
            scan_id: scan_id.to_string(),
            center: d.bbox.center,
            edge: d.bbox.edge,
            score: d.score,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")
            .map_err(|e| Error::io("<detections>", e))?;
    }
    Ok(())
}

pub fn read_detections_jsonl<R: BufRead>(input: R) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<detections>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn grid_counts() {
        let g = AnchorGrid::new([32; 3], &desk_levels()).unwrap();
        assert_eq!(g.len(), 16 * 16 * 16 + 8 * 8 * 8);
        assert_eq!(g.len(), 4608);
        let single = AnchorGrid::new([16; 3], &[LevelSpec::new(16, 32)]).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.anchor(0), Box3D::new([8.0; 3], 32.0));
    }

    #[test]
    fn full_scale_count_is_documented_arithmetic() {
        let g = AnchorGrid::new([160; 3], &full_levels()).unwrap();
        assert_eq!(g.len(), 80usize.pow(3) + 40usize.pow(3) + 20usize.pow(3) + 10usize.pow(3));
    }

    #[test]
    fn grid_rejects_indivisible_stride() {
        assert!(AnchorGrid::new([30, 32, 32], &desk_levels()).is_err());
    }

    #[test]
    fn index_location_bijection() {
        let g = AnchorGrid::new([16, 8, 12], &[LevelSpec::new(2, 4), LevelSpec::new(4, 8)]).unwrap();
        for i in 0..g.len() {
            assert_eq!(g.index(g.location(i)), i);
        }
        assert_eq!(g.location(0), AnchorLocation { level: 0, cell: [0, 0, 0] });
        assert_eq!(g.location(1), AnchorLocation { level: 0, cell: [0, 0, 1] });
        assert_eq!(g.location(8 * 4 * 6).level, 1);
    }

    #[test]
    fn iou_examples() {
        let a = Box3D::new([1.0; 3], 2.0);
        let b = Box3D::new([2.0; 3], 2.0);
        assert_relative_eq!(iou3d(&a, &a), 1.0);
        assert_relative_eq!(iou3d(&a, &b), 1.0 / 15.0, epsilon = 1e-12);
        assert_eq!(iou3d(&a, &Box3D::new([10.0; 3], 2.0)), 0.0);
        // Touching faces do not overlap.
        assert_eq!(iou3d(&a, &Box3D::new([3.0, 1.0, 1.0], 2.0)), 0.0);
    }

    #[test]
    fn assign_examples() {
        let grid = AnchorGrid::new([16; 3], &[LevelSpec::new(4, 4)]).unwrap();
        let gt = grid.anchor(5);
        let t: AnchorTargets<f64> = assign_targets(&grid, &[gt]);
        assert_eq!(t.cls[5], 1.0);
        assert_eq!(t.reg[5], Some([0.0; 4]));

        // Edge-4 anchor concentric with an edge-8 box: IoU 0.125, ignored.
        let gt = Box3D::new(grid.anchor(5).center, 8.0);
        assert_relative_eq!(iou3d(&grid.anchor(5), &gt), 0.125);
        let t: AnchorTargets<f64> = assign_targets(&grid, &[gt]);
        assert_eq!(t.mask[5], AnchorMask::Ignore);
        assert_eq!(t.reg[5], None);

        let t: AnchorTargets<f64> = assign_targets(&grid, &[]);
        assert!(t.cls.iter().all(|&y| y == 0.0));
        assert!(t.mask.iter().all(|&m| m == AnchorMask::Train));
    }

    #[test]
    fn encode_example() {
        let anchor = Box3D::new([8.0; 3], 8.0);
        let gt = Box3D::new([12.0, 8.0, 8.0], 16.0);
        let o = encode_box(&anchor, &gt);
        assert_relative_eq!(o[0], 0.5);
        assert_eq!(o[1], 0.0);
        assert_eq!(o[2], 0.0);
        assert_relative_eq!(o[3], std::f64::consts::LN_2);
        assert_eq!(encode_box(&anchor, &anchor), [0.0; 4]);
    }

    #[test]
    fn nms_examples() {
        let d = |c: f64, score: f64, anchor: usize| Detection {
            bbox: Box3D::new([c; 3], 4.0),
            score,
            anchor,
        };
        assert_eq!(nms(&[d(5.0, 0.3, 0)], 0.1).len(), 1);
        let kept = nms(&[d(5.0, 0.8, 1), d(5.0, 0.9, 2)], 0.1);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        let kept = nms(&[d(5.0, 0.5, 1), d(20.0, 0.9, 2), d(40.0, 0.9, 0)], 0.0);
        assert_eq!(kept.iter().map(|k| k.anchor).collect::<Vec<_>>(), vec![0, 2, 1]);
    }

    #[test]
    fn decode_keeps_top_candidates() {
        let grid = AnchorGrid::new([8; 3], &[LevelSpec::new(2, 4)]).unwrap();
        let probs: Vec<f64> = (0..grid.len()).map(|i| i as f64 / grid.len() as f64).collect();
        let dets = decode_detections(&grid, &probs, &vec![[0.0; 4]; grid.len()], 5);
        assert_eq!(dets.len(), 5);
        assert_eq!(dets[0].anchor, grid.len() - 1);
        assert_eq!(dets[0].bbox, grid.anchor(grid.len() - 1));
    }

    #[test]
    fn detections_jsonl_round_trip() {
        let dets = vec![Detection {
            bbox: Box3D::new([1.5, 2.0, 3.25], 6.0),
            score: 0.75,
            anchor: 3,
        }];
        let mut buf = Vec::new();
        write_detections_jsonl(&mut buf, "scan_1", &dets).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 1);
        let recs = read_detections_jsonl(buf.as_slice()).unwrap();
        assert_eq!(recs[0].scan_id, "scan_1");
        assert_eq!(recs[0].center, [1.5, 2.0, 3.25]);
        assert_eq!(recs[0].score, 0.75);
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (prop::array::uniform3(0.0..20.0f64), 0.5..10.0f64).prop_map(|(c, e)| Box3D::new(c, e))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let x = iou3d(&a, &b);
            prop_assert!((0.0..=1.0).contains(&x));
            prop_assert_eq!(x, iou3d(&b, &a));
        }

        #[test]
        fn encode_decode_inverse(a in arb_box(), g in arb_box()) {
            let back = decode_box(&a, encode_box(&a, &g));
            for k in 0..3 {
                prop_assert!((back.center[k] - g.center[k]).abs() <= 1e-6 * g.center[k].abs().max(1.0));
            }
            prop_assert!((back.edge - g.edge).abs() <= 1e-6 * g.edge);

            let o = [0.3, -0.2, 0.1, -0.5];
            let again = encode_box(&a, &decode_box(&a, o));
            for k in 0..4 {
                prop_assert!((again[k] - o[k]).abs() < 1e-9);
            }
        }
    }
}
