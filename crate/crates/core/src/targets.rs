//! Box residual encoding, anchor/proposal label assignment, and the scalar
//! loss functions combined into the per-stage multi-task loss.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::geometry::{normalize_angle, rotated_iou, BBox3D, BBoxBEV};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before the
/// focal loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Log-ratio residuals are clamped to this magnitude when decoding so a
/// wild prediction cannot overflow `exp`.
const MAX_LOG_RATIO: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxResidual {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dw: f64,
    pub dl: f64,
    pub dh: f64,
    pub dtheta: f64,
}

impl BoxResidual {
    pub const ZERO: BoxResidual = BoxResidual {
        dx: 0.0,
        dy: 0.0,
        dz: 0.0,
        dw: 0.0,
        dl: 0.0,
        dh: 0.0,
        dtheta: 0.0,
    };

    pub fn to_array(&self) -> [f64; 7] {
        [self.dx, self.dy, self.dz, self.dw, self.dl, self.dh, self.dtheta]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxResidual {
            dx: v[0],
            dy: v[1],
            dz: v[2],
            dw: v[3],
            dl: v[4],
            dh: v[5],
            dtheta: v[6],
        }
    }
}

fn diag(a: &BBox3D) -> f64 {
    (a.w * a.w + a.l * a.l).sqrt()
}

/// Residuals of `gt` relative to `anchor`: centers normalized by the
/// anchor's BEV diagonal (z by its height), sizes as log-ratios, heading
/// as the wrapped difference.
pub fn encode(gt: &BBox3D, anchor: &BBox3D) -> BoxResidual {
    let d = diag(anchor);
    BoxResidual {
        dx: (gt.x - anchor.x) / d,
        dy: (gt.y - anchor.y) / d,
        dz: (gt.z - anchor.z) / anchor.h,
        dw: (gt.w / anchor.w).ln(),
        dl: (gt.l / anchor.l).ln(),
        dh: (gt.h / anchor.h).ln(),
        dtheta: normalize_angle(gt.theta - anchor.theta),
    }
}

pub fn decode(res: &BoxResidual, anchor: &BBox3D) -> BBox3D {
    let d = diag(anchor);
    let clamp = |v: f64| v.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
    BBox3D {
        x: res.dx * d + anchor.x,
        y: res.dy * d + anchor.y,
        z: res.dz * anchor.h + anchor.z,
        w: clamp(res.dw).exp() * anchor.w,
        l: clamp(res.dl).exp() * anchor.l,
        h: clamp(res.dh).exp() * anchor.h,
        theta: normalize_angle(res.dtheta + anchor.theta),
    }
}

/// Decode where the heading residual is only known modulo pi: the
/// direction bin picks the half-turn (bin 1 means the true residual lies
/// in [0, pi)).
pub fn decode_with_direction(res: &BoxResidual, anchor: &BBox3D, dir_bin: usize) -> BBox3D {
    let r = crate::kernels::wrap_half_turn(res.dtheta);
    let cand = if r >= 0.0 { r } else { r + PI };
    let dtheta = if dir_bin == 1 { cand } else { cand - PI };
    decode(&BoxResidual { dtheta, ..*res }, anchor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Rpn,
    Infofocus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentConfig {
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub stage: Stage,
}

impl AssignmentConfig {
    pub fn rpn() -> Self {
        AssignmentConfig {
            pos_iou: 0.6,
            neg_iou: 0.45,
            stage: Stage::Rpn,
        }
    }

    pub fn infofocus() -> Self {
        AssignmentConfig {
            pos_iou: 0.6,
            neg_iou: 0.55,
            stage: Stage::Infofocus,
        }
    }

    pub fn validate(&self) -> crate::error::Result<()> {
        if !(0.0 <= self.neg_iou && self.neg_iou <= self.pos_iou && self.pos_iou <= 1.0) {
            return Err(crate::error::Error::Config(format!(
                "assignment thresholds need 0 <= neg ({}) <= pos ({}) <= 1",
                self.neg_iou, self.pos_iou
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Positive(usize),
    Negative,
    Ignore,
}

impl Label {
    pub fn is_positive(&self) -> bool {
        matches!(self, Label::Positive(_))
    }
}

/// Label every anchor against the ground truth by BEV rotated IoU.
///
/// Positive when the best IoU reaches `pos_iou` (matched to the best gt,
/// lower index on ties), negative below `neg_iou`, ignored in between. At
/// the RPN stage each gt's best anchor is also forced positive.
pub fn assign(anchors: &[BBox3D], gts: &[BBox3D], cfg: &AssignmentConfig) -> Vec<Label> {
    let gt_bev: Vec<BBoxBEV> = gts.iter().map(|g| g.bev()).collect();
    let mut best_gt = vec![(0.0f64, usize::MAX); anchors.len()];
    let mut best_anchor = vec![(0.0f64, usize::MAX); gts.len()];
    for (i, a) in anchors.iter().enumerate() {
        let ab = a.bev();
        for (j, g) in gt_bev.iter().enumerate() {
            let iou = rotated_iou(&ab, g);
            if iou > best_gt[i].0 {
                best_gt[i] = (iou, j);
            }
            if iou > best_anchor[j].0 {
                best_anchor[j] = (iou, i);
            }
        }
    }
    let mut labels: Vec<Label> = best_gt
        .iter()
        .map(|&(iou, j)| {
            if iou >= cfg.pos_iou && j != usize::MAX {
                Label::Positive(j)
            } else if iou < cfg.neg_iou {
                Label::Negative
            } else {
                Label::Ignore
            }
        })
        .collect();
    if cfg.stage == Stage::Rpn {
        for (j, &(iou, i)) in best_anchor.iter().enumerate() {
            if i == usize::MAX || iou <= 0.0 {
                continue;
            }
            let keep_existing = matches!(labels[i], Label::Positive(k) if k != j && best_gt[i].1 == k);
            if !keep_existing {
                labels[i] = Label::Positive(j);
            }
        }
    }
    labels
}

/// Sigmoid focal loss for one probability.
pub fn focal_loss(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if y >= 0.5 {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Derivative of [`focal_loss`] with respect to the logit that produced
/// `p = sigmoid(z)`. Zero inside the clamped region.
pub fn focal_loss_grad_logit(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    let dfdp = if y >= 0.5 {
        let q = 1.0 - p;
        -alpha * (-gamma * q.powf(gamma - 1.0) * p.ln() + q.powf(gamma) / p)
    } else {
        let q = 1.0 - p;
        -(1.0 - alpha) * (gamma * p.powf(gamma - 1.0) * q.ln() - p.powf(gamma) / q)
    };
    dfdp * p * (1.0 - p)
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Direction bin: 1 when the wrapped heading difference lies in [0, pi).
pub fn direction_target(theta_gt: f64, theta_anchor: f64) -> usize {
    let d = normalize_angle(theta_gt - theta_anchor);
    usize::from((0.0..PI).contains(&d))
}

/// Softmax cross-entropy of one logit row against `label`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|z| (z - mx).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
    pub dir: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            reg: 2.0,
            dir: 0.2,
        }
    }
}

/// `(b_cls * sum_cls + b_reg * sum_reg + b_dir * sum_dir) / max(n_pos, 1)`.
pub fn stage_loss(cls_sum: f64, reg_sum: f64, dir_sum: f64, n_pos: usize, w: &LossWeights) -> f64 {
    (w.cls * cls_sum + w.reg * reg_sum + w.dir * dir_sum) / n_pos.max(1) as f64
}
