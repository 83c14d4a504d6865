//! Focal losses for hard and soft objectness targets, smooth L1 box
//! regression, and the per-patch detection loss that combines them.

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorMask, AnchorTargets};
use crate::scalar::Scalar;

/// Probability clamp applied before every logarithm.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FocalParams {
    /// Weight of the negative class (target 0).
    pub alpha0: f64,
    /// Weight of the positive class (target 1).
    pub alpha1: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha0: 0.05,
            alpha1: 0.95,
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    pub fn validate(&self) -> crate::Result<()> {
        let unit = |a: f64| a > 0.0 && a < 1.0;
        if !unit(self.alpha0) || !unit(self.alpha1) || !(self.gamma >= 0.0) {
            return Err(crate::Error::Config(format!(
                "focal parameters need alpha0, alpha1 in (0,1) and gamma >= 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Class weight interpolated linearly between `alpha0` (y = 0) and
    /// `alpha1` (y = 1).
    pub fn alpha<S: Scalar>(&self, y: S) -> S {
        S::of(self.alpha0) + y * (S::of(self.alpha1) - S::of(self.alpha0))
    }
}

fn clamp_prob<S: Scalar>(p: S) -> S {
    let eps = S::of(PROB_EPS);
    p.max(eps).min(S::one() - eps)
}

fn check_unit<S: Scalar>(name: &str, v: S) {
    assert!(
        v >= S::zero() && v <= S::one(),
        "{name} = {v} lies outside [0, 1]"
    );
}

/// Soft-target focal loss and its derivative in `p`:
///
/// `[a0 + y (a1 - a0)] * |y - p|^gamma * (-y ln p - (1 - y) ln(1 - p))`
///
/// `p` is clamped to `[1e-7, 1 - 1e-7]` first. The modulating factor has
/// zero derivative where `p == y`.
///
/// # Panics
///
/// If `p` or `y` lies outside `[0, 1]`.
pub fn soft_focal_loss<S: Scalar>(p: S, y: S, params: &FocalParams) -> (S, S) {
    check_unit("p", p);
    check_unit("y", y);
    let p = clamp_prob(p);
    let one = S::one();
    let gamma = S::of(params.gamma);
    let alpha = params.alpha(y);

    let ce = -(y * p.ln()) - (one - y) * (one - p).ln();
    let dce = -(y / p) + (one - y) / (one - p);

    let diff = p - y;
    let dist = diff.abs();
    let modulator = if params.gamma == 0.0 { one } else { dist.powf(gamma) };
    let dmodulator = if params.gamma == 0.0 || dist == S::zero() {
        S::zero()
    } else {
        gamma * dist.powf(gamma - one) * diff.signum()
    };

    let loss = alpha * modulator * ce;
    let grad = alpha * (dmodulator * ce + modulator * dce);
    (loss, grad)
}

/// Focal loss for a binary target, `-alpha_t (1 - p_t)^gamma ln p_t`, and its
/// derivative in `p`.
///
/// # Panics
///
/// If `y` is not exactly 0 or 1, or `p` lies outside `[0, 1]`.
pub fn focal_loss<S: Scalar>(p: S, y: S, params: &FocalParams) -> (S, S) {
    check_unit("p", p);
    assert!(y == S::zero() || y == S::one(), "focal_loss needs a binary target, got {y}");
    let p = clamp_prob(p);
    let one = S::one();
    let gamma = S::of(params.gamma);
    let positive = y == one;
    let (pt, alpha_t, dpt) = if positive {
        (p, S::of(params.alpha1), one)
    } else {
        (one - p, S::of(params.alpha0), -one)
    };
    let q = one - pt;
    let modulator = if params.gamma == 0.0 { one } else { q.powf(gamma) };
    let loss = -alpha_t * modulator * pt.ln();
    // d/dpt of -a q^g ln pt = a g q^(g-1) ln pt - a q^g / pt
    let dmod = if params.gamma == 0.0 || q == S::zero() {
        S::zero()
    } else {
        gamma * q.powf(gamma - one)
    };
    let dloss_dpt = alpha_t * (dmod * pt.ln() - modulator / pt);
    (loss, dloss_dpt * dpt)
}

/// Smooth L1 summed over the four offsets, with the gradient in `pred`.
pub fn smooth_l1<S: Scalar>(pred: &[S; 4], target: &[S; 4]) -> (S, [S; 4]) {
    let half = S::of(0.5);
    let mut loss = S::zero();
    let mut grad = [S::zero(); 4];
    for k in 0..4 {
        let d = pred[k] - target[k];
        if d.abs() < S::one() {
            loss += half * d * d;
            grad[k] = d;
        } else {
            loss += d.abs() - half;
            grad[k] = d.signum();
        }
    }
    (loss, grad)
}

/// Loss value and gradients for one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionLoss<S> {
    pub total: S,
    pub classification: S,
    pub regression: S,
    /// d total / d probability, per anchor.
    pub grad_prob: Vec<S>,
    /// d total / d offsets, per anchor.
    pub grad_reg: Vec<[S; 4]>,
}

/// Patch loss:
///
/// `sum_train SFL(p_i, y_i) / max(1, sum_train y_i)
///  + reg_weight * mean_{i with reg target} smoothL1(o_i, t_i)`.
///
/// Sums run in anchor order.
pub fn detection_loss<S: Scalar>(
    probs: &[S],
    offsets: &[[S; 4]],
    targets: &AnchorTargets<S>,
    params: &FocalParams,
    reg_weight: f64,
) -> DetectionLoss<S> {
    let n = targets.len();
    assert_eq!(probs.len(), n, "probabilities and targets disagree in length");
    assert_eq!(offsets.len(), n, "offsets and targets disagree in length");

    let mut grad_prob = vec![S::zero(); n];
    let mut grad_reg = vec![[S::zero(); 4]; n];

    let mut mass = S::zero();
    let mut cls_sum = S::zero();
    for i in 0..n {
        if targets.mask[i] == AnchorMask::Ignore {
            continue;
        }
        let (l, g) = soft_focal_loss(probs[i], targets.cls[i], params);
        cls_sum += l;
        grad_prob[i] = g;
        mass += targets.cls[i];
    }
    let norm = mass.max(S::one());
    for g in grad_prob.iter_mut() {
        *g = *g / norm;
    }
    let classification = cls_sum / norm;

    let reg_count = targets.reg.iter().filter(|r| r.is_some()).count();
    let mut regression = S::zero();
    if reg_count > 0 && reg_weight != 0.0 {
        let scale = S::of(reg_weight) / S::of(reg_count as f64);
        let mut reg_sum = S::zero();
        for (i, t) in targets.reg.iter().enumerate() {
            if let Some(t) = t {
                let (l, g) = smooth_l1(&offsets[i], t);
                reg_sum += l;
                grad_reg[i] = g.map(|v| v * scale);
            }
        }
        regression = reg_sum * scale;
    }

    DetectionLoss {
        total: classification + regression,
        classification,
        regression,
        grad_prob,
        grad_reg,
    }
}
