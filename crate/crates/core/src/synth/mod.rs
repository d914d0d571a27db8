//! Procedural stand-in for a tele-screening photo collection: face-like
//! scenes with two eyes, a fixed light reflection per eye, and a ground
//! truth eye-region box. Strabismus is rendered as asymmetric reflection
//! offsets between the eyes, the cue-level content of a Hirschberg test.
//! Every sample is fully determined by its seed.

pub mod pnm;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{io_with_path, Error, Result};
use crate::metrics::Label;
use crate::psroi::RoIBox;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

/// Deviation difference at and above which a scene is labeled strabismus.
pub const LABEL_THRESHOLD_DEG: f64 = 5.0;
/// Fraction of scenes rendered with the lower face out of frame.
pub const PARTIAL_FACE_RATE: f64 = 375.0 / 5685.0;
/// Iris displacement and reflection offset per degree of deviation, as a
/// fraction of the iris radius.
const SHIFT_PER_DEGREE: f64 = 1.0 / 25.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Background {
    Plain,
    Gradient,
    Clutter,
}

/// Full geometric and photometric description of one scene. Everything the
/// renderer needs is either here or derived deterministically from `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneParams {
    pub width: usize,
    pub height: usize,
    pub face_center: (f64, f64),
    pub face_radius: (f64, f64),
    pub eye_left: (f64, f64),
    pub eye_right: (f64, f64),
    pub socket_radius: (f64, f64),
    pub iris_radius: f64,
    /// Gaze deviation per eye in degrees, positive toward the image right.
    pub dev_left: f64,
    pub dev_right: f64,
    pub background: Background,
    pub partial_face: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub seed: u64,
}

impl SceneParams {
    /// Horizontal iris displacement for a deviation, in pixels.
    pub fn iris_shift(&self, deviation_deg: f64) -> f64 {
        deviation_deg * self.iris_radius * SHIFT_PER_DEGREE
    }

    /// Reflection offset from the pupil center for one eye. The light and
    /// the reflection stay put while the eye turns, so the offset is the
    /// negated iris displacement.
    pub fn glint_offset(&self, deviation_deg: f64) -> (f64, f64) {
        (-self.iris_shift(deviation_deg), 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Argument("scene needs a positive canvas".into()));
        }
        for d in [self.dev_left, self.dev_right] {
            if !(-30.0..=30.0).contains(&d) {
                return Err(Error::Argument(format!("deviation {d} degrees outside [-30, 30]")));
            }
        }
        if self.iris_radius >= self.socket_radius.0.min(self.socket_radius.1) {
            return Err(Error::Argument(format!(
                "iris radius {} must be smaller than the socket {:?}",
                self.iris_radius, self.socket_radius
            )));
        }
        if !self.partial_face {
            for eye in [self.eye_left, self.eye_right] {
                for corner in [
                    (eye.0 - self.socket_radius.0, eye.1),
                    (eye.0 + self.socket_radius.0, eye.1),
                    (eye.0, eye.1 - self.socket_radius.1),
                    (eye.0, eye.1 + self.socket_radius.1),
                ] {
                    let nx = (corner.0 - self.face_center.0) / self.face_radius.0;
                    let ny = (corner.1 - self.face_center.1) / self.face_radius.1;
                    if nx * nx + ny * ny > 1.0 {
                        return Err(Error::Argument(
                            "eye sockets must lie inside the face ellipse".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One generated example: the image in `[0,1]` (quantized to 8-bit levels
/// so file round-trips are exact), its ground-truth eye box, the label,
/// and the parameters that produced it.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub eye_box: RoIBox,
    pub label: Label,
    pub params: SceneParams,
}

#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// (strabismus, normal) counts.
pub fn class_counts(samples: &[Sample]) -> (usize, usize) {
    let strab = samples.iter().filter(|s| s.label == Label::Strabismus).count();
    (strab, samples.len() - strab)
}

/// A scene is strabismic when the two eyes deviate by at least the
/// labeling threshold; the generator never samples near the boundary.
pub fn label_rule(p: &SceneParams) -> Label {
    if (p.dev_left - p.dev_right).abs() >= LABEL_THRESHOLD_DEG {
        Label::Strabismus
    } else {
        Label::Normal
    }
}

struct Canvas {
    w: usize,
    h: usize,
    data: Vec<f64>, // planar [3, h, w]
}

impl Canvas {
    fn new(w: usize, h: usize) -> Canvas {
        Canvas { w, h, data: vec![0.0; 3 * w * h] }
    }

    fn fill(&mut self, color: [f64; 3]) {
        let plane = self.w * self.h;
        for c in 0..3 {
            self.data[c * plane..(c + 1) * plane].fill(color[c]);
        }
    }

    fn blend(&mut self, x: usize, y: usize, color: [f64; 3], alpha: f64) {
        let plane = self.w * self.h;
        let at = y * self.w + x;
        for c in 0..3 {
            let v = &mut self.data[c * plane + at];
            *v = *v * (1.0 - alpha) + color[c] * alpha;
        }
    }

    /// Filled ellipse with a one-pixel feathered edge, so sub-pixel
    /// placement survives quantization.
    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, color: [f64; 3]) {
        let x_lo = ((cx - rx - 1.0).floor().max(0.0)) as usize;
        let x_hi = ((cx + rx + 1.0).ceil().min(self.w as f64 - 1.0)) as usize;
        let y_lo = ((cy - ry - 1.0).floor().max(0.0)) as usize;
        let y_hi = ((cy + ry + 1.0).ceil().min(self.h as f64 - 1.0)) as usize;
        if x_lo > x_hi || y_lo > y_hi {
            return;
        }
        let feather = rx.min(ry).max(1e-6);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let nx = (x as f64 + 0.5 - cx) / rx;
                let ny = (y as f64 + 0.5 - cy) / ry;
                let d = (nx * nx + ny * ny).sqrt();
                let edge = (d - 1.0) * feather;
                let alpha = (0.5 - edge).clamp(0.0, 1.0);
                if alpha > 0.0 {
                    self.blend(x, y, color, alpha);
                }
            }
        }
    }

    fn disc(&mut self, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
        self.ellipse(cx, cy, r, r, color);
    }

    fn rect(&mut self, x0: usize, y0: usize, x1: usize, y1: usize, color: [f64; 3]) {
        for y in y0..y1.min(self.h) {
            for x in x0..x1.min(self.w) {
                self.blend(x, y, color, 1.0);
            }
        }
    }
}

fn paint_background(canvas: &mut Canvas, p: &SceneParams, rng: &mut rand_chacha::ChaCha8Rng) {
    let base = [
        rng.gen_range(0.25..0.7),
        rng.gen_range(0.25..0.7),
        rng.gen_range(0.25..0.7),
    ];
    match p.background {
        Background::Plain => canvas.fill(base),
        Background::Gradient => {
            let other = [
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
                rng.gen_range(0.1..0.9),
            ];
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = (angle.cos(), angle.sin());
            let span = canvas.w as f64 * dx.abs() + canvas.h as f64 * dy.abs();
            let lo = (canvas.w as f64 * dx).min(0.0) + (canvas.h as f64 * dy).min(0.0);
            let plane = canvas.w * canvas.h;
            for y in 0..canvas.h {
                for x in 0..canvas.w {
                    let t = ((x as f64 * dx + y as f64 * dy) - lo) / span;
                    let at = y * canvas.w + x;
                    for c in 0..3 {
                        canvas.data[c * plane + at] = base[c] * (1.0 - t) + other[c] * t;
                    }
                }
            }
        }
        Background::Clutter => {
            canvas.fill(base);
            let rects = rng.gen_range(6..=12);
            for _ in 0..rects {
                let color = [
                    rng.gen_range(0.05..0.95),
                    rng.gen_range(0.05..0.95),
                    rng.gen_range(0.05..0.95),
                ];
                let x0 = rng.gen_range(0..canvas.w);
                let y0 = rng.gen_range(0..canvas.h);
                let x1 = (x0 + rng.gen_range(4..canvas.w / 2 + 5)).min(canvas.w);
                let y1 = (y0 + rng.gen_range(4..canvas.h / 2 + 5)).min(canvas.h);
                canvas.rect(x0, y0, x1, y1, color);
            }
            let blobs = rng.gen_range(3..=6);
            for _ in 0..blobs {
                let color = [
                    rng.gen_range(0.05..0.95),
                    rng.gen_range(0.05..0.95),
                    rng.gen_range(0.05..0.95),
                ];
                let cx = rng.gen_range(0.0..canvas.w as f64);
                let cy = rng.gen_range(0.0..canvas.h as f64);
                let r = rng.gen_range(3.0..canvas.w.min(canvas.h) as f64 / 4.0);
                canvas.disc(cx, cy, r, color);
            }
        }
    }
}

/// Rasterizes a scene. Cosmetic values not in the params (skin and iris
/// colors, clutter layout) are drawn from the scene seed, so rendering is
/// a pure function of the params.
pub fn render_scene(p: &SceneParams) -> Result<Sample> {
    p.validate()?;
    let mut rng = seeded(derive_seed(p.seed, 0x52454e44));
    let mut canvas = Canvas::new(p.width, p.height);
    paint_background(&mut canvas, p, &mut rng);

    let skin_r = rng.gen_range(0.55..0.85);
    let skin = [skin_r, skin_r * rng.gen_range(0.72..0.88), skin_r * rng.gen_range(0.5..0.7)];
    canvas.ellipse(
        p.face_center.0,
        p.face_center.1,
        p.face_radius.0,
        p.face_radius.1,
        skin,
    );

    let sclera_v = rng.gen_range(0.9..0.98);
    let sclera = [sclera_v, sclera_v, sclera_v];
    let iris_tint = rng.gen_range(0.0..1.0);
    let iris_color = if iris_tint < 0.5 {
        [rng.gen_range(0.25..0.45), rng.gen_range(0.15..0.3), 0.1] // brown
    } else {
        [0.2, rng.gen_range(0.3..0.5), rng.gen_range(0.5..0.7)] // blue
    };
    let pupil_v = rng.gen_range(0.02..0.08);
    let pupil = [pupil_v, pupil_v, pupil_v];
    let glint_v = rng.gen_range(0.96..1.0);
    let glint = [glint_v, glint_v, glint_v];

    for (eye, dev) in [(p.eye_left, p.dev_left), (p.eye_right, p.dev_right)] {
        canvas.ellipse(eye.0, eye.1, p.socket_radius.0, p.socket_radius.1, sclera);
        let cx = eye.0 + p.iris_shift(dev);
        canvas.disc(cx, eye.1, p.iris_radius, iris_color);
        canvas.disc(cx, eye.1, p.iris_radius * 0.45, pupil);
        // reflection of the fixed light: stays at the socket center while
        // the iris turns away under it
        canvas.disc(eye.0, eye.1, (p.iris_radius * 0.28).max(1.2), glint);
    }

    for v in canvas.data.iter_mut() {
        *v = (p.contrast * (*v - 0.5) + 0.5 + p.brightness).clamp(0.0, 1.0);
    }
    // quantize to the 8-bit levels a pixmap file can hold, so exported
    // data reimports bit-exactly
    for v in canvas.data.iter_mut() {
        *v = (*v * 255.0).round() / 255.0;
    }

    let x0 = p.eye_left.0.min(p.eye_right.0) - p.socket_radius.0;
    let x1 = p.eye_left.0.max(p.eye_right.0) + p.socket_radius.0;
    let y0 = p.eye_left.1.min(p.eye_right.1) - p.socket_radius.1;
    let y1 = p.eye_left.1.max(p.eye_right.1) + p.socket_radius.1;
    let (pad_x, pad_y) = ((x1 - x0) * 0.1, (y1 - y0) * 0.1);
    let eye_box = RoIBox::new(x0 - pad_x, y0 - pad_y, x1 + pad_x, y1 + pad_y)?
        .clip(p.width as f64, p.height as f64);

    let image = Tensor::from_vec(&[3, p.height, p.width], canvas.data)?;
    Ok(Sample { image, eye_box, label: label_rule(p), params: p.clone() })
}

/// Draws the full scene description for one sample. The class decides the
/// deviation pattern: normals move both eyes together, strabismus splits
/// them by a margin-separated difference.
pub fn scene_for(seed: u64, class: Label) -> SceneParams {
    let mut rng = seeded(seed);
    let height = rng.gen_range(96..=256usize);
    let width = rng.gen_range(96..=320usize);
    let (wf, hf) = (width as f64, height as f64);

    let socket_fx = rng.gen_range(1.8..2.2);
    // keep socket_fx * socket_fy above 1 so the iris always fits vertically
    let socket_fy = rng.gen_range(0.62..0.78);
    let half_gap_f = rng.gen_range(1.3..1.6);
    let strip_factor = (half_gap_f + 1.0) * socket_fx;
    let iris_cap_w = (0.40 * wf - 4.0) / (1.15 * strip_factor);
    let iris_cap_h = (0.30 * hf - 4.0) / (1.15 * socket_fx * socket_fy);
    let iris_radius = rng.gen_range(4.0..9.0f64.min(iris_cap_w).min(iris_cap_h));
    let socket_radius = (socket_fx * iris_radius, socket_fx * socket_fy * iris_radius);
    let half_gap = half_gap_f * socket_radius.0;
    let strip_half = half_gap + socket_radius.0;

    let x_margin = strip_half * 1.15 + 2.0;
    let y_margin = socket_radius.1 * 1.15 + 2.0;
    let x_mid = rng.gen_range(x_margin..wf - x_margin);
    let y_mid = rng.gen_range(y_margin.max(0.25 * hf)..0.55 * hf);
    let eye_left = (x_mid - half_gap, y_mid);
    let eye_right = (x_mid + half_gap, y_mid);

    let mut face_radius = (strip_half * rng.gen_range(1.3..1.5), 0.0);
    face_radius.1 = face_radius.0 * rng.gen_range(1.2..1.45);
    let mut face_center = (x_mid + rng.gen_range(-2.0..2.0), 0.0);

    let base = rng.gen_range(-3.0..3.0);
    let (dev_left, dev_right) = match class {
        Label::Normal => (base, base),
        Label::Strabismus => {
            let diff = rng.gen_range(8.0..25.0);
            if rng.gen_bool(0.5) {
                (base - diff / 2.0, base + diff / 2.0)
            } else {
                (base + diff / 2.0, base - diff / 2.0)
            }
        }
    };

    let background = match rng.gen_range(0..3) {
        0 => Background::Plain,
        1 => Background::Gradient,
        _ => Background::Clutter,
    };
    let partial_face = rng.gen_bool(PARTIAL_FACE_RATE);
    if partial_face {
        face_radius.1 *= rng.gen_range(1.7..2.1);
    }
    face_center.1 = y_mid + face_radius.1 * rng.gen_range(0.25..0.4);

    SceneParams {
        width,
        height,
        face_center,
        face_radius,
        eye_left,
        eye_right,
        socket_radius,
        iris_radius,
        dev_left,
        dev_right,
        background,
        partial_face,
        brightness: rng.gen_range(-0.08..0.08),
        contrast: rng.gen_range(0.85..1.15),
        seed,
    }
}

/// Generates disjoint train and test splits with exact class counts. The
/// strabismus count of each split is `round(n * fraction)`; each sample's
/// seed derives from the split stream, so the two splits never collide.
pub fn gen_dataset(
    n_train: usize,
    n_test: usize,
    strab_fraction_train: f64,
    strab_fraction_test: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    let train = gen_split(n_train, strab_fraction_train, derive_seed(seed, 1))?;
    let test = gen_split(n_test, strab_fraction_test, derive_seed(seed, 2))?;
    Ok(DatasetSplit { train, test })
}

/// The shipped desk-scale preset: the original splits and class mixes
/// divided by ten (train 341 = 70 strabismus + 271 normal, test 228 =
/// 47 + 181).
pub fn tenth_scale_preset(seed: u64) -> Result<DatasetSplit> {
    gen_dataset(341, 228, 70.0 / 341.0, 47.0 / 228.0, seed)
}

fn gen_split(n: usize, strab_fraction: f64, stream: u64) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Argument("split size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&strab_fraction) {
        return Err(Error::Argument(format!("class fraction {strab_fraction} outside [0, 1]")));
    }
    let n_strab = (n as f64 * strab_fraction).round() as usize;
    if n_strab == 0 || n_strab == n {
        return Err(Error::Argument(format!(
            "fraction {strab_fraction} of {n} yields an empty class"
        )));
    }
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let class = if i < n_strab { Label::Strabismus } else { Label::Normal };
        let sample_seed = derive_seed(stream, 10 + i as u64);
        samples.push(render_scene(&scene_for(sample_seed, class))?);
    }
    // interleave the classes so any prefix of the split is mixed
    let mut rng = seeded(derive_seed(stream, 1));
    for i in (1..samples.len()).rev() {
        let j = rng.gen_range(0..=i);
        samples.swap(i, j);
    }
    Ok(samples)
}

/// Interleaved 8-bit RGB for a planar `[3, h, w]` image in `[0, 1]`.
pub fn rgb_bytes(image: &Tensor) -> Vec<u8> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let data = image.data();
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            rgb.push((data[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    rgb
}

/// Planar `[3, h, w]` tensor in `[0,1]` from interleaved 8-bit RGB.
pub fn tensor_from_rgb(w: usize, h: usize, rgb: &[u8]) -> Result<Tensor> {
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = rgb[3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

fn label_name(label: Label) -> &'static str {
    match label {
        Label::Strabismus => "strabismus",
        Label::Normal => "normal",
    }
}

fn export_split(samples: &[Sample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io(io_with_path(e, dir)))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:04}.ppm");
        pnm::write_p6(&dir.join(&name), s.params.width, s.params.height, &rgb_bytes(&s.image))?;
        writeln!(
            manifest,
            "{name}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.eye_box.x0,
            s.eye_box.y0,
            s.eye_box.x1,
            s.eye_box.y1,
            label_name(s.label),
            s.params.seed
        )
        .expect("string write");
    }
    fs::write(dir.join("manifest.tsv"), manifest).map_err(|e| Error::Io(io_with_path(e, dir)))
}

/// Writes `train/` and `test/` subdirectories, each holding one pixmap per
/// sample plus a tab-separated manifest (filename, box, label, seed).
pub fn export_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    export_split(&split.train, &dir.join("train"))?;
    export_split(&split.test, &dir.join("test"))
}

/// Reads one split directory written by [`export_dataset`]. Scene params
/// are re-derived from the stored seed and label, so imported samples
/// carry the same metadata as generated ones.
pub fn import_split(dir: &Path) -> Result<Vec<Sample>> {
    let manifest_path = dir.join("manifest.tsv");
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Io(io_with_path(e, &manifest_path)))?;
    let mut samples = Vec::new();
    for (ix, row) in text.lines().enumerate() {
        let line = ix + 1;
        let fail = |message: String| Error::Format { line, message };
        let fields: Vec<&str> = row.split('\t').collect();
        if fields.len() != 7 {
            return Err(fail(format!("expected 7 tab-separated fields, got {}", fields.len())));
        }
        let coord = |ix: usize, name: &str| -> Result<f64> {
            fields[ix]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .ok_or_else(|| fail(format!("bad {name} {:?}", fields[ix])))
        };
        let (x0, y0, x1, y1) = (coord(1, "x0")?, coord(2, "y0")?, coord(3, "x1")?, coord(4, "y1")?);
        let eye_box = RoIBox::new(x0, y0, x1, y1).map_err(|e| fail(e.to_string()))?;
        let label = match fields[5] {
            "strabismus" => Label::Strabismus,
            "normal" => Label::Normal,
            other => return Err(fail(format!("unknown label {other:?}"))),
        };
        let sample_seed = fields[6]
            .parse::<u64>()
            .map_err(|_| fail(format!("bad seed {:?}", fields[6])))?;
        let (w, h, rgb) = pnm::read_p6(&dir.join(fields[0]))
            .map_err(|e| fail(format!("{}: {e}", fields[0])))?;
        samples.push(Sample {
            image: tensor_from_rgb(w, h, &rgb)?,
            eye_box,
            label,
            params: scene_for(sample_seed, label),
        });
    }
    Ok(samples)
}

pub fn import_dataset(dir: &Path) -> Result<DatasetSplit> {
    Ok(DatasetSplit {
        train: import_split(&dir.join("train"))?,
        test: import_split(&dir.join("test"))?,
    })
}

/// Order-insensitive content hashes, for cross-split disjointness checks.
pub fn image_hashes(samples: &[Sample]) -> BTreeSet<u64> {
    samples
        .iter()
        .map(|s| {
            // FNV-1a over the quantized bytes
            let mut h: u64 = 0xcbf29ce484222325;
            for b in rgb_bytes(&s.image) {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h
        })
        .collect()
}
