//! Box regression targets, non-maximum suppression, hard-example selection,
//! and anchor label assignment.

use crate::detect::anchors::Anchor;
use crate::error::{Error, Result};
use crate::psroi::RoIBox;
use crate::tensor::kernels::smooth_l1_value;

/// Normalized offsets from a reference box: center shifts divided by the
/// reference size, log size ratios.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxDelta {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDelta {
    pub const ZERO: BoxDelta = BoxDelta { tx: 0.0, ty: 0.0, tw: 0.0, th: 0.0 };

    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_slice(v: &[f64]) -> BoxDelta {
        BoxDelta { tx: v[0], ty: v[1], tw: v[2], th: v[3] }
    }
}

/// Expresses `b` relative to `reference`.
pub fn encode_box(b: &RoIBox, reference: &RoIBox) -> Result<BoxDelta> {
    let (bw, bh) = (b.width(), b.height());
    let (rw, rh) = (reference.width(), reference.height());
    if bw <= 0.0 || bh <= 0.0 || rw <= 0.0 || rh <= 0.0 {
        return Err(Error::Argument(format!(
            "encode needs positive box extents, got {bw}x{bh} against {rw}x{rh}"
        )));
    }
    let (bcx, bcy) = b.center();
    let (rcx, rcy) = reference.center();
    Ok(BoxDelta {
        tx: (bcx - rcx) / rw,
        ty: (bcy - rcy) / rh,
        tw: (bw / rw).ln(),
        th: (bh / rh).ln(),
    })
}

/// Inverse of [`encode_box`].
pub fn decode_box(d: &BoxDelta, reference: &RoIBox) -> RoIBox {
    let (rcx, rcy) = reference.center();
    let (rw, rh) = (reference.width(), reference.height());
    let cx = rcx + d.tx * rw;
    let cy = rcy + d.ty * rh;
    let w = rw * d.tw.exp();
    let h = rh * d.th.exp();
    RoIBox {
        x0: cx - w / 2.0,
        y0: cy - h / 2.0,
        x1: cx + w / 2.0,
        y1: cy + h / 2.0,
        score: reference.score,
    }
}

/// Per-coordinate smooth-L1 between two deltas, summed over the 4
/// coordinates: quadratic inside |d| < 1, linear beyond.
pub fn smooth_l1(pred: &BoxDelta, target: &BoxDelta) -> f64 {
    smooth_l1_value(pred.tx - target.tx)
        + smooth_l1_value(pred.ty - target.ty)
        + smooth_l1_value(pred.tw - target.tw)
        + smooth_l1_value(pred.th - target.th)
}

/// A scored candidate box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub roi: RoIBox,
    pub prob: f64,
}

/// Greedy non-maximum suppression: keep by descending probability (ties by
/// input order), dropping anything with IoU above the threshold against an
/// already-kept detection.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .prob
            .partial_cmp(&dets[a].prob)
            .expect("finite probabilities")
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let d = &dets[i];
        if kept.iter().all(|k| k.roi.iou(&d.roi) <= iou_thresh) {
            kept.push(*d);
        }
    }
    kept
}

/// Indices of the `b` largest losses (all indices when there are fewer than
/// `b`), ties resolved toward the lower index. Returned sorted ascending.
pub fn ohem_select(losses: &[f64], b: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&i, &j| {
        losses[j]
            .partial_cmp(&losses[i])
            .expect("finite losses")
            .then(i.cmp(&j))
    });
    order.truncate(b);
    order.sort_unstable();
    order
}

/// Training role of one anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RpnLabel {
    Positive,
    Negative,
    Ignore,
}

/// Labels every anchor against the single ground-truth box: positive at
/// IoU >= 0.7, negative at IoU <= 0.3, otherwise ignored. The max-IoU anchor
/// (first on ties) is always positive so at least one positive exists.
pub fn assign_rpn_labels(anchors: &[Anchor], gt: &RoIBox) -> Vec<RpnLabel> {
    let mut labels = Vec::with_capacity(anchors.len());
    let mut ious = Vec::with_capacity(anchors.len());
    let mut best = f64::NEG_INFINITY;
    let mut best_idx = 0usize;
    for (i, a) in anchors.iter().enumerate() {
        let iou = a.to_box().iou(gt);
        if iou > best {
            best = iou;
            best_idx = i;
        }
        ious.push(iou);
        labels.push(if iou >= 0.7 {
            RpnLabel::Positive
        } else if iou <= 0.3 {
            RpnLabel::Negative
        } else {
            RpnLabel::Ignore
        });
    }
    if !anchors.is_empty() {
        // the best-overlap anchors are positive regardless of the band;
        // near-ties count too, but never from inside the negative band
        labels[best_idx] = RpnLabel::Positive;
        for (i, &iou) in ious.iter().enumerate() {
            if iou >= best - ARGMAX_TIE_TOL && iou > 0.3 {
                labels[i] = RpnLabel::Positive;
            }
        }
    }
    labels
}

/// Anchors within this much of the best IoU share its positive label.
const ARGMAX_TIE_TOL: f64 = 0.05;
