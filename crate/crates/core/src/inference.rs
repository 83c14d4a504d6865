//! Whole-scan detection and test-set scoring.

use crate::anchors::{decode_detections, nms, AnchorGrid, Detection};
use crate::error::Result;
use crate::eval::{self, CpmSummary, FrocCurve};
use crate::model::Detector;
use crate::scalar::Scalar;
use crate::volume::{LabeledScan, Volume3D};

/// Post-processing of raw per-anchor outputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectParams {
    pub nms_iou: f64,
    /// Highest-scoring anchors kept before suppression.
    pub max_candidates: usize,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            nms_iou: crate::anchors::DEFAULT_NMS_IOU,
            max_candidates: 200,
        }
    }
}

/// Detections on an already standardized volume of any stride-compatible
/// shape, after suppression.
pub fn detect_standardized<S: Scalar>(
    model: &Detector<S>,
    volume: &Volume3D<S>,
    params: DetectParams,
) -> Result<Vec<Detection>> {
    let out = model.infer(volume)?;
    let grid = AnchorGrid::new(volume.shape(), &model.config().levels)?;
    let cands = decode_detections(&grid, &out.probs, &out.offsets, params.max_candidates);
    Ok(nms(&cands, params.nms_iou))
}

/// Standardize a raw scan volume and detect on it.
pub fn detect<S: Scalar>(model: &Detector<S>, volume: &Volume3D<f32>, params: DetectParams) -> Result<Vec<Detection>> {
    let v = volume.cast::<S>().standardized();
    detect_standardized(model, &v, params)
}

/// FROC curve and CPM of `model` on annotated scans.
pub fn evaluate_model<S: Scalar>(
    model: &Detector<S>,
    scans: &[LabeledScan<f32>],
    params: DetectParams,
) -> Result<(FrocCurve, CpmSummary)> {
    let dets = scans
        .iter()
        .map(|s| detect(model, &s.volume, params))
        .collect::<Result<Vec<_>>>()?;
    let gts: Vec<_> = scans.iter().map(|s| s.boxes.clone()).collect();
    eval::evaluate(&dets, &gts)
}
