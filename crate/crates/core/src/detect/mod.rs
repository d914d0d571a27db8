//! The eye-region detector: a small convolutional backbone, an anchor-based
//! proposal network, and a position-sensitive pooling head with smooth-L1 box
//! regression, trained jointly with hard-example mining.
//!
//! One image per step. The head loss is `cls + reg` where `cls` is
//! cross-entropy averaged over the hardest RoIs and `reg` is smooth-L1
//! averaged over positive RoIs; the proposal network adds its own
//! cross-entropy and regression terms to the optimized total.

pub mod anchors;
pub mod boxes;

pub use anchors::{generate_anchors, Anchor};
pub use boxes::{
    assign_rpn_labels, decode_box, encode_box, nms, ohem_select, smooth_l1, BoxDelta, Detection,
    RpnLabel,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::psroi::{RoIBox, VoteMode};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{sgd_step, softmax_row, MapPick, NodeId, Parameter, Tape, Tensor};

/// Architecture and training knobs for the detector. The backbone is four
/// 3x3 conv+ReLU blocks with max-pools after the first two and stride 2 in
/// the third, giving an overall feature stride of 8.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub backbone_channels: [usize; 4],
    pub rpn_channels: usize,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    /// Bin grid size of the position-sensitive head.
    pub k: usize,
    pub vote_mode: VoteMode,
    pub nms_thresh: f64,
    /// Proposals kept per image at train time (the ground-truth box is
    /// appended on top).
    pub train_proposals: usize,
    /// Proposals scored by the head at inference.
    pub eval_proposals: usize,
    /// Hard-example count for the head classification loss.
    pub ohem_batch: usize,
    /// Anchors sampled per step for the proposal-network loss, at most half
    /// of them positive.
    pub rpn_sample: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
}

impl Default for DetectorConfig {
    fn default() -> DetectorConfig {
        DetectorConfig {
            backbone_channels: [16, 32, 64, 64],
            rpn_channels: 64,
            anchor_scales: vec![16.0, 32.0, 64.0],
            anchor_ratios: vec![1.0, 2.0],
            k: 3,
            vote_mode: VoteMode::Mean,
            nms_thresh: 0.3,
            train_proposals: 64,
            eval_proposals: 32,
            ohem_batch: 16,
            rpn_sample: 256,
            lr: 3e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            steps: 1600,
        }
    }
}

impl DetectorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }
}

/// Proposals narrower or shorter than this are discarded; one feature cell
/// at stride 8 is the smallest region the head can pool.
const MIN_PROPOSAL_SIDE: f64 = 8.0;
/// An unpoolable fallback box below this proposal probability raises a
/// no-detection error instead of being reported.
const DETECTION_FLOOR: f64 = 0.05;

/// Spatial bookkeeping for one input size: map extents plus the affine
/// `image_x = stride * index + offset` relation of each grid, derived by
/// composing the layer stack.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureGeometry {
    pub ps_h: usize,
    pub ps_w: usize,
    pub rpn_h: usize,
    pub rpn_w: usize,
    pub stride: usize,
    pub ps_offset: f64,
    pub rpn_offset: f64,
}

/// (name, kernel, stride) of the spatial layers up to the backbone output.
const BACKBONE_TRACE: [(&str, usize, usize); 6] = [
    ("conv1", 3, 1),
    ("pool1", 2, 2),
    ("conv2", 3, 1),
    ("pool2", 2, 2),
    ("conv3", 3, 2),
    ("conv4", 3, 1),
];

fn trace_extent(mut e: usize, layers: &[(&str, usize, usize)]) -> Result<usize> {
    for &(name, k, s) in layers {
        if e < k {
            return Err(Error::Config(format!(
                "{name}: spatial extent {e} smaller than its {k}-wide window"
            )));
        }
        e = (e - k) / s + 1;
    }
    Ok(e)
}

/// Composes `(stride, offset)` through the layer list; a k-wide window at
/// layer stride s maps output index i to input center `i*s + (k-1)/2`.
fn trace_mapping(layers: &[(&str, usize, usize)]) -> (f64, f64) {
    let (mut stride, mut offset) = (1.0, 0.0);
    for &(_, k, s) in layers {
        offset += stride * (k - 1) as f64 / 2.0;
        stride *= s as f64;
    }
    (stride, offset)
}

pub fn feature_geometry(h: usize, w: usize) -> Result<FeatureGeometry> {
    let rpn_trace: Vec<(&str, usize, usize)> = BACKBONE_TRACE
        .iter()
        .copied()
        .chain([("rpn_conv", 3usize, 1usize)])
        .collect();
    let ps_h = trace_extent(h, &BACKBONE_TRACE)?;
    let ps_w = trace_extent(w, &BACKBONE_TRACE)?;
    let rpn_h = trace_extent(h, &rpn_trace)?;
    let rpn_w = trace_extent(w, &rpn_trace)?;
    let (stride, ps_offset) = trace_mapping(&BACKBONE_TRACE);
    let (_, rpn_offset) = trace_mapping(&rpn_trace);
    Ok(FeatureGeometry {
        ps_h,
        ps_w,
        rpn_h,
        rpn_w,
        stride: stride as usize,
        ps_offset,
        rpn_offset,
    })
}

/// Head loss of one step: classification over hard examples plus box
/// regression over positives. `total` is exactly `cls + reg`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorLoss {
    pub cls: f64,
    pub reg: f64,
    pub total: f64,
}

/// Computes the head loss from per-RoI logits and regression deltas.
/// `reg_pred`/`reg_target` run parallel to `positives` (one entry per
/// positive RoI). Hard-example selection ranks each RoI by its
/// cross-entropy plus, for positives, its smooth-L1 term.
pub fn detector_loss(
    cls_logits: &[[f64; 2]],
    cls_labels: &[usize],
    reg_pred: &[BoxDelta],
    reg_target: &[BoxDelta],
    positives: &[usize],
    ohem_b: usize,
) -> Result<DetectorLoss> {
    let n = cls_logits.len();
    if cls_labels.len() != n {
        return Err(Error::Argument(format!("{} labels for {n} RoIs", cls_labels.len())));
    }
    if reg_pred.len() != positives.len() || reg_target.len() != positives.len() {
        return Err(Error::Argument(
            "regression entries must run parallel to the positive list".into(),
        ));
    }
    let mut ce = Vec::with_capacity(n);
    for (logits, &label) in cls_logits.iter().zip(cls_labels) {
        if label >= 2 {
            return Err(Error::Argument(format!("RoI label {label} out of range")));
        }
        let p = softmax_row(logits);
        ce.push(-p[label].ln());
    }
    let mut sl1 = vec![0.0; n];
    for (rank, &roi) in positives.iter().enumerate() {
        if roi >= n {
            return Err(Error::Argument(format!("positive index {roi} out of {n} RoIs")));
        }
        sl1[roi] = smooth_l1(&reg_pred[rank], &reg_target[rank]);
    }
    let per_roi: Vec<f64> = ce.iter().zip(&sl1).map(|(c, s)| c + s).collect();
    let selected = ohem_select(&per_roi, ohem_b);
    let cls = if selected.is_empty() {
        0.0
    } else {
        selected.iter().map(|&i| ce[i]).sum::<f64>() / selected.len() as f64
    };
    let reg = if positives.is_empty() {
        0.0
    } else {
        positives.iter().map(|&i| sl1[i]).sum::<f64>() / positives.len() as f64
    };
    Ok(DetectorLoss { cls, reg, total: cls + reg })
}

/// All loss terms of one training step. `total` is the optimized objective:
/// the head total plus the proposal-network terms.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub rpn_cls: f64,
    pub rpn_reg: f64,
    pub head: DetectorLoss,
    pub total: f64,
}

struct ForwardMaps {
    ids: Vec<NodeId>,
    rpn_cls: NodeId,
    rpn_reg: NodeId,
    ps_cls: NodeId,
    ps_reg: NodeId,
    geom: FeatureGeometry,
}

/// The trained detector: configuration plus parameters in serialization
/// order (conv1..conv4, rpn_conv, rpn_cls, rpn_reg, ps_cls, ps_reg, each
/// kernels-then-bias).
pub struct DetectorModel {
    cfg: DetectorConfig,
    params: Vec<Parameter>,
}

impl DetectorModel {
    /// Fresh model with He-initialized kernels and zero biases, drawn in
    /// parameter order from the seed.
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<DetectorModel> {
        if cfg.k == 0 || cfg.anchors_per_cell() == 0 {
            return Err(Error::Config("detector needs a bin grid and anchors".into()));
        }
        let [c1, c2, c3, c4] = cfg.backbone_channels;
        let rc = cfg.rpn_channels;
        let a = cfg.anchors_per_cell();
        let k2 = cfg.k * cfg.k;
        let mut rng = seeded(seed);
        let mut params = Vec::new();
        let conv = |co: usize, ci: usize, k: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let kern = Parameter::he_normal(&[co, ci, k, k], ci * k * k, rng);
            let bias = Parameter::zeros(&[co]);
            [kern, bias]
        };
        // prediction heads start near zero so early proposals stay close to
        // the anchors and regression targets sit in the quadratic regime
        let head = |co: usize, ci: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let kern = Parameter::normal(&[co, ci, 1, 1], 0.01, rng);
            let bias = Parameter::zeros(&[co]);
            [kern, bias]
        };
        params.extend(conv(c1, 3, 3, &mut rng));
        params.extend(conv(c2, c1, 3, &mut rng));
        params.extend(conv(c3, c2, 3, &mut rng));
        params.extend(conv(c4, c3, 3, &mut rng));
        params.extend(conv(rc, c4, 3, &mut rng));
        params.extend(head(2 * a, rc, &mut rng));
        params.extend(head(4 * a, rc, &mut rng));
        params.extend(head(k2 * 2, c4, &mut rng));
        params.extend(head(k2 * 4, c4, &mut rng));
        Ok(DetectorModel { cfg, params })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    /// Rebuilds a model around deserialized parameters; shapes must match
    /// the configuration.
    pub fn from_parts(cfg: DetectorConfig, params: Vec<Parameter>) -> Result<DetectorModel> {
        let fresh = DetectorModel::new(cfg.clone(), 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::ModelFile(format!(
                "detector expects {} parameter tensors, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (f, p) in fresh.params.iter().zip(&params) {
            if f.shape() != p.shape() {
                return Err(Error::ModelFile(format!(
                    "detector parameter shape {:?} does not match expected {:?}",
                    p.shape(),
                    f.shape()
                )));
            }
        }
        Ok(DetectorModel { cfg, params })
    }

    fn check_image(&self, image: &Tensor) -> Result<(usize, usize)> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Dim(format!("detector expects a [3, H, W] image, got {s:?}")));
        }
        Ok((s[1], s[2]))
    }

    /// Runs the shared convolutional trunk and all prediction maps on a
    /// fresh tape. `for_training` decides whether parameter leaves request
    /// gradients.
    fn forward_maps(&self, tape: &mut Tape, image: &Tensor, for_training: bool) -> Result<ForwardMaps> {
        let (h, w) = self.check_image(image)?;
        let geom = feature_geometry(h, w)?;
        let ids: Vec<NodeId> = if for_training {
            self.params.iter().map(|p| tape.param(p)).collect()
        } else {
            self.params.iter().map(|p| tape.constant(p.tensor().clone())).collect()
        };
        let x = tape.constant(image.clone());
        let c1 = tape.conv2d(x, ids[0], ids[1], 1)?;
        let r1 = tape.relu(c1)?;
        let m1 = tape.maxpool2d(r1, 2, 2)?;
        let c2 = tape.conv2d(m1, ids[2], ids[3], 1)?;
        let r2 = tape.relu(c2)?;
        let m2 = tape.maxpool2d(r2, 2, 2)?;
        let c3 = tape.conv2d(m2, ids[4], ids[5], 2)?;
        let r3 = tape.relu(c3)?;
        let c4 = tape.conv2d(r3, ids[6], ids[7], 1)?;
        let trunk = tape.relu(c4)?;
        let rc = tape.conv2d(trunk, ids[8], ids[9], 1)?;
        let rpn_feat = tape.relu(rc)?;
        let rpn_cls = tape.conv2d(rpn_feat, ids[10], ids[11], 1)?;
        let rpn_reg = tape.conv2d(rpn_feat, ids[12], ids[13], 1)?;
        let ps_cls = tape.conv2d(trunk, ids[14], ids[15], 1)?;
        let ps_reg = tape.conv2d(trunk, ids[16], ids[17], 1)?;
        Ok(ForwardMaps { ids, rpn_cls, rpn_reg, ps_cls, ps_reg, geom })
    }

    /// Anchors on the proposal grid, shifted to the true receptive-field
    /// centers of that grid. Index layout: `(y * rpn_w + x) * A + a`.
    fn grid_anchors(&self, geom: &FeatureGeometry) -> Vec<Anchor> {
        let base = generate_anchors(
            geom.rpn_h,
            geom.rpn_w,
            geom.stride,
            &self.cfg.anchor_scales,
            &self.cfg.anchor_ratios,
        );
        // generate_anchors centers cells at (i + 0.5) * stride; the traced
        // mapping puts them at stride * i + rpn_offset
        let shift = geom.rpn_offset - 0.5 * geom.stride as f64;
        base.into_iter().map(|a| a.shifted(shift, shift)).collect()
    }

    /// Decodes, clips, filters, and suppresses the proposal grid; keeps at
    /// most `limit` boxes. Greedy suppression stops early once `limit`
    /// survivors exist, which equals taking the first `limit` of a full
    /// suppression pass.
    fn proposals(
        &self,
        tape: &Tape,
        maps: &ForwardMaps,
        anchors: &[Anchor],
        (h, w): (usize, usize),
        limit: usize,
    ) -> Vec<Detection> {
        let a_per_cell = self.cfg.anchors_per_cell();
        let cls = tape.value(maps.rpn_cls).data();
        let reg = tape.value(maps.rpn_reg).data();
        let (gh, gw) = (maps.geom.rpn_h, maps.geom.rpn_w);
        let plane = gh * gw;
        let mut cand: Vec<Detection> = Vec::with_capacity(anchors.len());
        for (i, anchor) in anchors.iter().enumerate() {
            let cell = i / a_per_cell;
            let a = i % a_per_cell;
            let (y, x) = (cell / gw, cell % gw);
            let off = y * gw + x;
            let logit0 = cls[(2 * a) * plane + off];
            let logit1 = cls[(2 * a + 1) * plane + off];
            let prob = softmax_row(&[logit0, logit1])[1];
            // diverged weights produce non-finite scores; those anchors are
            // dropped so the sort below stays total
            if !prob.is_finite() {
                continue;
            }
            let delta = BoxDelta {
                tx: reg[(4 * a) * plane + off],
                ty: reg[(4 * a + 1) * plane + off],
                tw: reg[(4 * a + 2) * plane + off],
                th: reg[(4 * a + 3) * plane + off],
            };
            let roi = decode_box(&delta, &anchor.to_box()).clip(w as f64, h as f64);
            if !(roi.width() >= MIN_PROPOSAL_SIDE && roi.height() >= MIN_PROPOSAL_SIDE) {
                continue;
            }
            // border boxes can project outside the feature map, which the
            // pooling stage rejects; drop them here
            let g = &maps.geom;
            if crate::psroi::pool_geometry(&roi, g.stride, g.ps_h, g.ps_w, self.cfg.k).is_err() {
                continue;
            }
            cand.push(Detection { roi, prob });
        }
        cand.sort_by(|a, b| b.prob.partial_cmp(&a.prob).expect("finite probabilities"));
        let mut kept: Vec<Detection> = Vec::new();
        for d in &cand {
            if kept.len() >= limit {
                break;
            }
            if kept.iter().all(|k| k.roi.iou(&d.roi) <= self.cfg.nms_thresh) {
                kept.push(*d);
            }
        }
        kept
    }

    /// One optimization step on a single image. The per-step generator
    /// drives anchor subsampling only.
    pub fn train_step(
        &mut self,
        image: &Tensor,
        gt: &RoIBox,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<StepLoss> {
        let (h, w) = self.check_image(image)?;
        let mut tape = Tape::new();
        let maps = self.forward_maps(&mut tape, image, true)?;
        let anchors = self.grid_anchors(&maps.geom);

        // proposal-network targets
        let labels = assign_rpn_labels(&anchors, gt);
        let positives: Vec<usize> =
            (0..anchors.len()).filter(|&i| labels[i] == RpnLabel::Positive).collect();
        let negatives: Vec<usize> =
            (0..anchors.len()).filter(|&i| labels[i] == RpnLabel::Negative).collect();
        let pos_take = positives.len().min(self.cfg.rpn_sample / 2);
        let pos_sel = sample_without_replacement(&positives, pos_take, rng);
        let neg_take = negatives.len().min(self.cfg.rpn_sample - pos_take);
        let neg_sel = sample_without_replacement(&negatives, neg_take, rng);

        let a_per_cell = self.cfg.anchors_per_cell();
        let gw = maps.geom.rpn_w;
        let pick_at = |i: usize, chan_mul: usize, base_len: usize| {
            let cell = i / a_per_cell;
            let a = i % a_per_cell;
            MapPick { chan: chan_mul * a, len: base_len, y: cell / gw, x: cell % gw }
        };
        let mut cls_picks = Vec::with_capacity(pos_sel.len() + neg_sel.len());
        let mut cls_labels = Vec::with_capacity(pos_sel.len() + neg_sel.len());
        for &i in pos_sel.iter().chain(&neg_sel) {
            cls_picks.push(pick_at(i, 2, 2));
            cls_labels.push(usize::from(labels[i] == RpnLabel::Positive));
        }
        let rpn_cls_rows = tape.gather_map(maps.rpn_cls, cls_picks)?;
        let rpn_cls_loss = tape.softmax_cross_entropy(rpn_cls_rows, &cls_labels)?;

        let rpn_reg_loss = if pos_sel.is_empty() {
            tape.constant(Tensor::scalar(0.0))
        } else {
            let mut reg_picks = Vec::with_capacity(pos_sel.len());
            let mut targets = Vec::with_capacity(pos_sel.len() * 4);
            for &i in &pos_sel {
                reg_picks.push(pick_at(i, 4, 4));
                targets.extend(encode_box(gt, &anchors[i].to_box())?.to_array());
            }
            let rows = tape.gather_map(maps.rpn_reg, reg_picks)?;
            let sl1 = tape.smooth_l1_rows(rows, &targets)?;
            let all: Vec<usize> = (0..pos_sel.len()).collect();
            tape.select_mean(sl1, &all)?
        };

        // head: proposals from the current maps, ground truth appended
        let mut rois = self.proposals(&tape, &maps, &anchors, (h, w), self.cfg.train_proposals);
        rois.push(Detection { roi: *gt, prob: 1.0 });
        let roi_labels: Vec<usize> =
            rois.iter().map(|d| usize::from(d.roi.iou(gt) >= 0.5)).collect();
        let roi_positives: Vec<usize> =
            (0..rois.len()).filter(|&i| roi_labels[i] == 1).collect();

        let k = self.cfg.k;
        let stride = maps.geom.stride;
        let mut score_rows = Vec::with_capacity(rois.len());
        for d in &rois {
            let pooled = tape.psroi_pool(maps.ps_cls, &d.roi, k, 2, stride)?;
            score_rows.push(tape.vote(pooled, self.cfg.vote_mode)?);
        }
        let head_logits = tape.row_stack(&score_rows)?;
        let ce_rows = tape.softmax_cross_entropy_rows(head_logits, &roi_labels)?;

        let (head_reg_loss, sl1_values) = if roi_positives.is_empty() {
            (tape.constant(Tensor::scalar(0.0)), Vec::new())
        } else {
            let mut reg_rows = Vec::with_capacity(roi_positives.len());
            let mut targets = Vec::with_capacity(roi_positives.len() * 4);
            for &i in &roi_positives {
                let pooled = tape.psroi_pool(maps.ps_reg, &rois[i].roi, k, 4, stride)?;
                reg_rows.push(tape.vote(pooled, self.cfg.vote_mode)?);
                targets.extend(encode_box(gt, &rois[i].roi)?.to_array());
            }
            let stacked = tape.row_stack(&reg_rows)?;
            let sl1 = tape.smooth_l1_rows(stacked, &targets)?;
            let values = tape.value(sl1).data().to_vec();
            let all: Vec<usize> = (0..roi_positives.len()).collect();
            (tape.select_mean(sl1, &all)?, values)
        };

        // hard-example selection on forward values: cross-entropy plus the
        // regression term for positives
        let mut per_roi = tape.value(ce_rows).data().to_vec();
        for (rank, &i) in roi_positives.iter().enumerate() {
            per_roi[i] += sl1_values[rank];
        }
        let selected = ohem_select(&per_roi, self.cfg.ohem_batch);
        let head_cls_loss = tape.select_mean(ce_rows, &selected)?;

        let total = tape.add_scalars(&[rpn_cls_loss, rpn_reg_loss, head_cls_loss, head_reg_loss])?;
        tape.backward(total)?;
        for (param, &id) in self.params.iter_mut().zip(&maps.ids) {
            if let Some(g) = tape.grad(id) {
                param.accumulate_grad(g)?;
            } else {
                param.set_grad(vec![0.0; param.tensor().numel()])?;
            }
        }
        sgd_step(self.params.iter_mut(), self.cfg.lr, self.cfg.momentum, self.cfg.weight_decay)?;

        let cls = tape.item(head_cls_loss);
        let reg = tape.item(head_reg_loss);
        Ok(StepLoss {
            rpn_cls: tape.item(rpn_cls_loss),
            rpn_reg: tape.item(rpn_reg_loss),
            head: DetectorLoss { cls, reg, total: cls + reg },
            total: tape.item(total),
        })
    }

    /// Surviving region proposals for one image, best first, scored by the
    /// proposal network alone.
    pub fn proposal_boxes(&self, image: &Tensor) -> Result<Vec<Detection>> {
        let (h, w) = self.check_image(image)?;
        let mut tape = Tape::new();
        let maps = self.forward_maps(&mut tape, image, false)?;
        let anchors = self.grid_anchors(&maps.geom);
        Ok(self.proposals(&tape, &maps, &anchors, (h, w), self.cfg.eval_proposals))
    }

    /// Best decoded anchor box by proposal score when the size and border
    /// filters left nothing. The first variant can still be pooled by the
    /// head; the second cannot and carries the raw proposal probability.
    fn unfiltered_best(
        &self,
        tape: &Tape,
        maps: &ForwardMaps,
        anchors: &[Anchor],
        (h, w): (usize, usize),
    ) -> (Option<Detection>, Option<Detection>) {
        let a_per_cell = self.cfg.anchors_per_cell();
        let cls = tape.value(maps.rpn_cls).data();
        let reg = tape.value(maps.rpn_reg).data();
        let (gh, gw) = (maps.geom.rpn_h, maps.geom.rpn_w);
        let plane = gh * gw;
        let mut poolable: Option<Detection> = None;
        let mut raw: Option<Detection> = None;
        for (i, anchor) in anchors.iter().enumerate() {
            let cell = i / a_per_cell;
            let a = i % a_per_cell;
            let off = (cell / gw) * gw + cell % gw;
            let prob = softmax_row(&[cls[(2 * a) * plane + off], cls[(2 * a + 1) * plane + off]])[1];
            if !prob.is_finite() {
                continue;
            }
            let delta = BoxDelta {
                tx: reg[(4 * a) * plane + off],
                ty: reg[(4 * a + 1) * plane + off],
                tw: reg[(4 * a + 2) * plane + off],
                th: reg[(4 * a + 3) * plane + off],
            };
            let roi = decode_box(&delta, &anchor.to_box()).clip(w as f64, h as f64);
            if !(roi.width() > 0.0 && roi.height() > 0.0) {
                continue;
            }
            if raw.map_or(true, |b| prob > b.prob) {
                raw = Some(Detection { roi, prob });
            }
            let g = &maps.geom;
            if crate::psroi::pool_geometry(&roi, g.stride, g.ps_h, g.ps_w, self.cfg.k).is_ok()
                && poolable.map_or(true, |b| prob > b.prob)
            {
                poolable = Some(Detection { roi, prob });
            }
        }
        (poolable, raw)
    }

    /// Highest-probability eye-region box after suppression, refined by the
    /// head's box regression and clipped to the image.
    pub fn detect(&self, image: &Tensor) -> Result<Detection> {
        let (h, w) = self.check_image(image)?;
        let mut tape = Tape::new();
        let maps = self.forward_maps(&mut tape, image, false)?;
        let anchors = self.grid_anchors(&maps.geom);
        let mut cands = self.proposals(&tape, &maps, &anchors, (h, w), self.cfg.eval_proposals);
        if cands.is_empty() {
            let (poolable, raw) = self.unfiltered_best(&tape, &maps, &anchors, (h, w));
            match (poolable, raw) {
                (Some(d), _) => cands.push(d),
                // nothing the head can pool; answer with the raw proposal
                (None, Some(d)) if d.prob >= DETECTION_FLOOR => return Ok(d),
                _ => return Err(Error::NoDetection),
            }
        }
        let k = self.cfg.k;
        let stride = maps.geom.stride;
        let mut best: Option<Detection> = None;
        for d in &cands {
            let pooled = tape.psroi_pool(maps.ps_cls, &d.roi, k, 2, stride)?;
            let scores = tape.vote(pooled, self.cfg.vote_mode)?;
            let prob = softmax_row(tape.value(scores).data())[1];
            if best.map_or(true, |b| prob > b.prob) {
                let pooled_reg = tape.psroi_pool(maps.ps_reg, &d.roi, k, 4, stride)?;
                let delta_node = tape.vote(pooled_reg, self.cfg.vote_mode)?;
                let delta = BoxDelta::from_slice(tape.value(delta_node).data());
                let refined = decode_box(&delta, &d.roi).clip(w as f64, h as f64);
                let roi = if refined.width() >= MIN_PROPOSAL_SIDE
                    && refined.height() >= MIN_PROPOSAL_SIDE
                {
                    refined
                } else {
                    d.roi
                };
                best = Some(Detection { roi, prob });
            }
        }
        // a scored candidate always exists here; low confidence still names
        // the best region rather than refusing
        best.ok_or(Error::NoDetection)
    }
}

fn sample_without_replacement(
    pool: &[usize],
    take: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<usize> {
    let mut pool = pool.to_vec();
    let take = take.min(pool.len());
    for i in 0..take {
        let j = i + rng.gen_range(0..pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(take);
    pool
}

/// Trains a fresh detector: one image per step, seeded epoch shuffling,
/// `cfg.steps` steps. Returns the model and the per-step optimized loss.
pub fn train_detector(
    images: &[(&Tensor, RoIBox)],
    cfg: &DetectorConfig,
    seed: u64,
) -> Result<(DetectorModel, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::Argument("detector training needs at least one image".into()));
    }
    let mut model = DetectorModel::new(cfg.clone(), derive_seed(seed, 0))?;
    let mut rng = seeded(derive_seed(seed, 1));
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut cursor = images.len(); // forces an initial shuffle
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        if cursor >= order.len() {
            shuffle(&mut order, &mut rng);
            cursor = 0;
        }
        let (image, gt) = images[order[cursor]];
        cursor += 1;
        let loss = model
            .train_step(image, &gt, &mut rng)
            .map_err(|e| Error::Training { step, message: e.to_string() })?;
        if !loss.total.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("loss diverged to {}", loss.total),
            });
        }
        history.push(loss.total);
    }
    Ok((model, history))
}

fn shuffle(order: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Finds the eye region of one image; alias for [`DetectorModel::detect`]
/// matching the pipeline vocabulary.
pub fn segment_eye_region(model: &DetectorModel, image: &Tensor) -> Result<Detection> {
    model.detect(image)
}
