//! Lesion-level FROC analysis and the CPM score.
//!
//! A detection hits a lesion when its center lies within half the lesion's
//! edge (Euclidean) of the lesion center.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::anchors::Detection;
use crate::error::{Error, Result};
use crate::volume::Box3D;

/// False-positive rates (per scan) averaged by CPM.
pub const CPM_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Second hit on an already found lesion, or inside an ignore region.
    Ignored,
}

/// Matching result for one scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanMatch {
    /// `(score, outcome)` in descending score order.
    pub detections: Vec<(f64, Outcome)>,
    pub lesion_hit: Vec<bool>,
}

fn hits(det: &Detection, gt: &Box3D) -> bool {
    det.bbox.center_distance(gt) <= gt.edge / 2.0
}

/// Greedy matching in descending score order (ties by anchor index).
/// Detections inside any `ignore` region that do not hit an unmatched
/// lesion are ignored rather than counted as false positives.
pub fn match_scan(dets: &[Detection], gts: &[Box3D], ignore: &[Box3D]) -> ScanMatch {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.anchor.cmp(&b.anchor)));
    let mut lesion_hit = vec![false; gts.len()];
    let mut detections = Vec::with_capacity(order.len());
    for d in order {
        let fresh = gts
            .iter()
            .enumerate()
            .filter(|(j, g)| !lesion_hit[*j] && hits(d, g))
            .min_by(|a, b| {
                d.bbox
                    .center_distance(a.1)
                    .total_cmp(&d.bbox.center_distance(b.1))
                    .then(a.0.cmp(&b.0))
            })
            .map(|(j, _)| j);
        let outcome = if let Some(j) = fresh {
            lesion_hit[j] = true;
            Outcome::TruePositive
        } else if gts.iter().any(|g| hits(d, g)) || ignore.iter().any(|g| hits(d, g)) {
            Outcome::Ignored
        } else {
            Outcome::FalsePositive
        };
        detections.push((d.score, outcome));
    }
    ScanMatch {
        detections,
        lesion_hit,
    }
}

/// Match every scan of a test set; `dets[i]` and `gts[i]` belong to scan `i`.
pub fn match_detections(dets: &[Vec<Detection>], gts: &[Vec<Box3D>]) -> Vec<ScanMatch> {
    assert_eq!(dets.len(), gts.len(), "one detection list per scan");
    dets.iter().zip(gts).map(|(d, g)| match_scan(d, g, &[])).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    /// Score threshold (`inf` for the origin).
    pub threshold: f64,
    pub fps_per_scan: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrocCurve {
    /// Sorted by `(fps_per_scan, recall)`, starting at the origin.
    pub points: Vec<FrocPoint>,
    pub n_scans: usize,
    pub n_lesions: usize,
}

/// Sweep the score threshold over every distinct detection score.
pub fn froc(matches: &[ScanMatch]) -> Result<FrocCurve> {
    let n_scans = matches.len();
    let n_lesions: usize = matches.iter().map(|m| m.lesion_hit.len()).sum();
    if n_scans == 0 {
        return Err(Error::Config("FROC needs at least one scan".into()));
    }
    if n_lesions == 0 {
        return Err(Error::Config("FROC needs at least one lesion".into()));
    }
    let mut events: Vec<(f64, Outcome)> = matches
        .iter()
        .flat_map(|m| m.detections.iter().copied())
        .filter(|(_, o)| *o != Outcome::Ignored)
        .collect();
    events.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = vec![FrocPoint {
        threshold: f64::INFINITY,
        fps_per_scan: 0.0,
        recall: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < events.len() {
        let t = events[i].0;
        while i < events.len() && events[i].0 == t {
            match events[i].1 {
                Outcome::TruePositive => tp += 1,
                Outcome::FalsePositive => fp += 1,
                Outcome::Ignored => {}
            }
            i += 1;
        }
        let p = FrocPoint {
            threshold: t,
            fps_per_scan: fp as f64 / n_scans as f64,
            recall: tp as f64 / n_lesions as f64,
        };
        let last = points.last().expect("origin");
        if (last.fps_per_scan, last.recall) != (p.fps_per_scan, p.recall) {
            points.push(p);
        }
    }
    Ok(FrocCurve {
        points,
        n_scans,
        n_lesions,
    })
}

impl FrocCurve {
    /// Recall at `rate` false positives per scan: the last point at or below
    /// `rate`, linearly interpolated toward the next point when one exists.
    pub fn recall_at(&self, rate: f64) -> f64 {
        let Some(lo) = self.points.iter().rposition(|p| p.fps_per_scan <= rate) else {
            return 0.0;
        };
        let a = self.points[lo];
        match self.points.get(lo + 1) {
            Some(b) if b.fps_per_scan > a.fps_per_scan => {
                let t = (rate - a.fps_per_scan) / (b.fps_per_scan - a.fps_per_scan);
                a.recall + t * (b.recall - a.recall)
            }
            _ => a.recall,
        }
    }

    pub fn recalls_at_cpm_rates(&self) -> [f64; 7] {
        CPM_RATES.map(|r| self.recall_at(r))
    }

    /// `threshold,fps_per_scan,recall` rows with a header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "threshold,fps_per_scan,recall")?;
        for p in &self.points {
            writeln!(out, "{},{},{}", p.threshold, p.fps_per_scan, p.recall)?;
        }
        Ok(())
    }
}

/// Mean recall over [`CPM_RATES`], as a percentage.
pub fn cpm(curve: &FrocCurve) -> f64 {
    let r = curve.recalls_at_cpm_rates();
    100.0 * r.iter().sum::<f64>() / r.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpmSummary {
    pub cpm: f64,
    pub recalls_at: Vec<f64>,
}

impl CpmSummary {
    pub fn from_curve(curve: &FrocCurve) -> Self {
        Self {
            cpm: cpm(curve),
            recalls_at: curve.recalls_at_cpm_rates().to_vec(),
        }
    }
}

/// Match, sweep and score in one call.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<Box3D>]) -> Result<(FrocCurve, CpmSummary)> {
    let curve = froc(&match_detections(dets, gts))?;
    let summary = CpmSummary::from_curve(&curve);
    Ok((curve, summary))
}
