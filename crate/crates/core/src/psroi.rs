//! Position-sensitive RoI pooling.
//!
//! A score-map stack has `k*k*classes` channels; channel `(by*k + bx)*classes + c`
//! is dedicated to spatial bin `(by, bx)` of class `c`. That ordering is frozen:
//! the model file format stores the producing convolution kernels in it.
//! Pooling projects an RoI onto the feature grid, splits it into a `k` by `k`
//! grid of bins, and averages each bin's dedicated channel over the bin's
//! cells. Voting then reduces the `k*k` bin responses to one score per class.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axis-aligned box in input-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoIBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub score: f64,
}

impl RoIBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<RoIBox> {
        if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
            return Err(Error::Argument("box coordinates must be finite".into()));
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Argument(format!(
                "box must have positive extent, got [{x0}, {y0}, {x1}, {y1}]"
            )));
        }
        Ok(RoIBox { x0, y0, x1, y1, score: 0.0 })
    }

    pub fn with_score(mut self, score: f64) -> RoIBox {
        self.score = score;
        self
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    /// Clamps the box to `[0, w] x [0, h]`. The result can be degenerate
    /// (zero extent) if the box lies entirely outside.
    pub fn clip(&self, w: f64, h: f64) -> RoIBox {
        RoIBox {
            x0: self.x0.clamp(0.0, w),
            y0: self.y0.clamp(0.0, h),
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            score: self.score,
        }
    }

    /// Intersection area over union area, in [0, 1].
    pub fn iou(&self, other: &RoIBox) -> f64 {
        let ix = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let iy = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// How the `k*k` bin responses combine into a class score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VoteMode {
    /// Average of the bin responses. Default.
    Mean,
    /// Plain sum. Differs from `Mean` by the constant factor `k*k`, so the
    /// class argmax is identical; exposed for comparison.
    Sum,
}

/// Half-open cell range `[y0, y1) x [x0, x1)` of one pooling bin on the
/// feature grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinSpan {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl BinSpan {
    pub fn cell_count(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

/// Resolved pooling geometry for one (RoI, stack) pair; `bins[by*k + bx]`.
#[derive(Clone, Debug)]
pub struct PoolGeometry {
    pub k: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    pub bins: Vec<BinSpan>,
}

/// Bin `b` of `k` over an extent of `e` cells covers `[floor(b*e/k), ceil((b+1)*e/k))`,
/// so adjacent bins may share one cell and the whole extent is always covered.
pub fn bin_bounds(extent: usize, k: usize, b: usize) -> (usize, usize) {
    (b * extent / k, ((b + 1) * extent + k - 1) / k)
}

/// Projects an RoI onto the feature grid (round-to-nearest division by the
/// stride, then clamping) and lays out the `k` by `k` bin grid.
pub fn pool_geometry(
    roi: &RoIBox,
    stride: usize,
    feat_h: usize,
    feat_w: usize,
    k: usize,
) -> Result<PoolGeometry> {
    if stride == 0 || k == 0 {
        return Err(Error::Argument("stride and bin grid size must be positive".into()));
    }
    let s = stride as f64;
    let px0 = ((roi.x0 / s).round().max(0.0) as usize).min(feat_w);
    let px1 = ((roi.x1 / s).round().max(0.0) as usize).min(feat_w);
    let py0 = ((roi.y0 / s).round().max(0.0) as usize).min(feat_h);
    let py1 = ((roi.y1 / s).round().max(0.0) as usize).min(feat_h);
    if px1 <= px0 || py1 <= py0 {
        return Err(Error::DegenerateRoi(format!(
            "box [{:.1}, {:.1}, {:.1}, {:.1}] projects to {}x{} feature cells at stride {}",
            roi.x0,
            roi.y0,
            roi.x1,
            roi.y1,
            py1.saturating_sub(py0),
            px1.saturating_sub(px0),
            stride
        )));
    }
    let w = px1 - px0;
    let h = py1 - py0;
    let mut bins = Vec::with_capacity(k * k);
    for by in 0..k {
        let (ys, ye) = bin_bounds(h, k, by);
        for bx in 0..k {
            let (xs, xe) = bin_bounds(w, k, bx);
            bins.push(BinSpan { y0: py0 + ys, y1: py0 + ye, x0: px0 + xs, x1: px0 + xe });
        }
    }
    Ok(PoolGeometry { k, feat_h, feat_w, bins })
}

/// Pools a `[k*k*classes, feat_h, feat_w]` stack into `[k, k, classes]` bin
/// responses: each bin averages its dedicated channel over its cells. An
/// empty bin yields 0.
pub fn pool_forward(stack: &[f64], geom: &PoolGeometry, classes: usize) -> Vec<f64> {
    let k = geom.k;
    let (hf, wf) = (geom.feat_h, geom.feat_w);
    debug_assert_eq!(stack.len(), k * k * classes * hf * wf);
    let mut out = vec![0.0; k * k * classes];
    for (bin, span) in geom.bins.iter().enumerate() {
        let n = span.cell_count();
        if n == 0 {
            continue;
        }
        for c in 0..classes {
            let chan = bin * classes + c;
            let plane = &stack[chan * hf * wf..(chan + 1) * hf * wf];
            let mut acc = 0.0;
            for y in span.y0..span.y1 {
                for &v in &plane[y * wf + span.x0..y * wf + span.x1] {
                    acc += v;
                }
            }
            out[bin * classes + c] = acc / n as f64;
        }
    }
    out
}

/// Scatters a `[k, k, classes]` upstream gradient back onto the stack:
/// every cell of bin `(by, bx)` on its dedicated channel receives
/// `upstream / cell_count`.
pub fn pool_backward(geom: &PoolGeometry, classes: usize, upstream: &[f64], d_stack: &mut [f64]) {
    let (hf, wf) = (geom.feat_h, geom.feat_w);
    for (bin, span) in geom.bins.iter().enumerate() {
        let n = span.cell_count();
        if n == 0 {
            continue;
        }
        for c in 0..classes {
            let g = upstream[bin * classes + c] / n as f64;
            if g == 0.0 {
                continue;
            }
            let chan = bin * classes + c;
            let plane = &mut d_stack[chan * hf * wf..(chan + 1) * hf * wf];
            for y in span.y0..span.y1 {
                for slot in &mut plane[y * wf + span.x0..y * wf + span.x1] {
                    *slot += g;
                }
            }
        }
    }
}

/// One-call forward over a `[k*k*classes, Hf, Wf]` tensor. Returns the
/// `[k, k, classes]` responses and the geometry needed to differentiate.
pub fn psroi_pool(
    maps: &Tensor,
    roi: &RoIBox,
    k: usize,
    classes: usize,
    stride: usize,
) -> Result<(Vec<f64>, PoolGeometry)> {
    let shape = maps.shape();
    if shape.len() != 3 {
        return Err(Error::Dim(format!("score-map stack must be 3-d, got {shape:?}")));
    }
    if shape[0] != k * k * classes {
        return Err(Error::Dim(format!(
            "stack has {} channels, bin grid {k}x{k} with {classes} classes needs {}",
            shape[0],
            k * k * classes
        )));
    }
    let geom = pool_geometry(roi, stride, shape[1], shape[2], k)?;
    let pooled = pool_forward(maps.data(), &geom, classes);
    Ok((pooled, geom))
}

/// Reduces `[k, k, classes]` bin responses to one score per class.
pub fn vote(pooled: &[f64], k: usize, classes: usize, mode: VoteMode) -> Vec<f64> {
    debug_assert_eq!(pooled.len(), k * k * classes);
    let mut out = vec![0.0; classes];
    for bin in 0..k * k {
        for (c, o) in out.iter_mut().enumerate() {
            *o += pooled[bin * classes + c];
        }
    }
    if mode == VoteMode::Mean {
        let inv = 1.0 / (k * k) as f64;
        for o in &mut out {
            *o *= inv;
        }
    }
    out
}
