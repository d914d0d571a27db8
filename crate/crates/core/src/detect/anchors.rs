//! Anchor grid generation for the proposal network.

use crate::psroi::RoIBox;

/// A reference box tiled on the feature grid. `scale_idx` and `ratio_idx`
/// identify which (scale, ratio) combination produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub scale_idx: usize,
    pub ratio_idx: usize,
}

impl Anchor {
    pub fn to_box(&self) -> RoIBox {
        RoIBox {
            x0: self.cx - self.w / 2.0,
            y0: self.cy - self.h / 2.0,
            x1: self.cx + self.w / 2.0,
            y1: self.cy + self.h / 2.0,
            score: 0.0,
        }
    }

    pub fn shifted(mut self, dx: f64, dy: f64) -> Anchor {
        self.cx += dx;
        self.cy += dy;
        self
    }
}

/// Tiles `|scales| * |ratios|` anchors on every cell of an `feat_h` by
/// `feat_w` grid, centered on the cells at `(i + 0.5) * stride`. A ratio `r`
/// widens the box to `s * sqrt(r)` by `s / sqrt(r)`, preserving the area
/// `s^2`. Index layout: cell-major (row by row), then scale, then ratio.
pub fn generate_anchors(
    feat_h: usize,
    feat_w: usize,
    stride: usize,
    scales: &[f64],
    ratios: &[f64],
) -> Vec<Anchor> {
    let mut anchors = Vec::with_capacity(feat_h * feat_w * scales.len() * ratios.len());
    for y in 0..feat_h {
        for x in 0..feat_w {
            let cx = (x as f64 + 0.5) * stride as f64;
            let cy = (y as f64 + 0.5) * stride as f64;
            for (si, &s) in scales.iter().enumerate() {
                for (ri, &r) in ratios.iter().enumerate() {
                    let sq = r.sqrt();
                    anchors.push(Anchor {
                        cx,
                        cy,
                        w: s * sq,
                        h: s / sq,
                        scale_idx: si,
                        ratio_idx: ri,
                    });
                }
            }
        }
    }
    anchors
}
