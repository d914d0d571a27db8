//! The strabismus classifier: five conv+ReLU blocks with max-pools after
//! the first, second, and fifth, then three fully connected layers with
//! dropout on the first two. Crops enter as `[3, S, S]` tensors; callers
//! resize and normalize them first.

use rand::Rng;

use crate::error::{Error, Result};
use crate::metrics::Label;
use crate::psroi::RoIBox;
use crate::rng::seeded;
use crate::tensor::{sgd_step, softmax_row, NodeId, Parameter, Tape, Tensor};

/// Output class index of the strabismus label; normal is 0.
pub const STRABISMUS_CLASS: usize = 1;

pub fn class_index(label: Label) -> usize {
    match label {
        Label::Strabismus => STRABISMUS_CLASS,
        Label::Normal => 0,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

/// Network shape. The layer sequence is fixed (conv1..conv5 with pools
/// after conv1, conv2, conv5, then fc1..fc3); these fields size it.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierConfig {
    pub input_side: usize,
    pub conv_channels: [usize; 5],
    pub conv_kernels: [usize; 5],
    pub conv_strides: [usize; 5],
    pub fc_widths: [usize; 3],
    pub dropout: f64,
    pub loss: LossKind,
}

impl Default for ClassifierConfig {
    fn default() -> ClassifierConfig {
        ClassifierConfig {
            input_side: 64,
            conv_channels: [16, 32, 64, 64, 64],
            conv_kernels: [3; 5],
            conv_strides: [1; 5],
            fc_widths: [256, 64, 2],
            dropout: 0.5,
            loss: LossKind::CrossEntropy,
        }
    }
}

impl ClassifierConfig {
    /// Same stack at the original 224-pixel crop size.
    pub fn full_scale() -> ClassifierConfig {
        ClassifierConfig { input_side: 224, ..ClassifierConfig::default() }
    }

    /// Smallest config that exercises every layer, for gradient checks:
    /// 8-pixel input, 1x1 kernels, a handful of channels.
    pub fn tiny() -> ClassifierConfig {
        ClassifierConfig {
            input_side: 8,
            conv_channels: [2, 3, 3, 2, 2],
            conv_kernels: [1; 5],
            conv_strides: [1; 5],
            fc_widths: [8, 4, 2],
            dropout: 0.5,
            loss: LossKind::CrossEntropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fc_widths[2] != 2 {
            return Err(Error::Config(format!(
                "final fully connected width must be 2 classes, got {}",
                self.fc_widths[2]
            )));
        }
        if self.input_side == 0
            || self.conv_channels.contains(&0)
            || self.conv_kernels.contains(&0)
            || self.conv_strides.contains(&0)
            || self.fc_widths.contains(&0)
        {
            return Err(Error::Config("all classifier sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Square extent after each spatial stage, failing with the layer name
    /// when a window no longer fits. Returns the flattened feature count.
    fn trace_shapes(&self) -> Result<usize> {
        let mut side = self.input_side;
        let mut stage = |name: String, k: usize, s: usize| -> Result<usize> {
            if side < k {
                return Err(Error::Config(format!(
                    "{name}: input side {side} smaller than its {k}-wide window"
                )));
            }
            side = (side - k) / s + 1;
            Ok(side)
        };
        for i in 0..5 {
            stage(format!("conv{}", i + 1), self.conv_kernels[i], self.conv_strides[i])?;
            let pool = match i {
                0 => Some("pool1"),
                1 => Some("pool2"),
                4 => Some("pool3"),
                _ => None,
            };
            if let Some(name) = pool {
                stage(name.to_string(), 2, 2)?;
            }
        }
        Ok(self.conv_channels[4] * side * side)
    }
}

/// Training schedule for the classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub iterations: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            lr: 0.01,
            batch: 32,
            iterations: 300,
            momentum: 0.9,
            weight_decay: 5e-4,
            dropout: 0.5,
            seed: 42,
        }
    }
}

impl TrainConfig {
    /// The original schedule: identical except for running 5000 iterations.
    pub fn full_scale() -> TrainConfig {
        TrainConfig { iterations: 5000, ..TrainConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.momentum < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Two-way prediction for one crop. `probability` is P(strabismus); the
/// label applies the 0.5 threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StrabPrediction {
    pub probability: f64,
    pub label: Label,
}

/// The classifier with its parameters in serialization order: five
/// kernel/bias conv pairs, then three weight/bias fc pairs.
pub struct Network {
    cfg: ClassifierConfig,
    params: Vec<Parameter>,
}

/// Builds a fresh network with He-initialized hidden layers and a
/// near-zero final layer, drawn in parameter order from the seed.
pub fn build_network(cfg: &ClassifierConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let flat = cfg.trace_shapes()?;
    let mut rng = seeded(seed);
    let mut params = Vec::with_capacity(16);
    let mut ci = 3;
    for i in 0..5 {
        let (co, k) = (cfg.conv_channels[i], cfg.conv_kernels[i]);
        params.push(Parameter::he_normal(&[co, ci, k, k], ci * k * k, &mut rng));
        params.push(Parameter::zeros(&[co]));
        ci = co;
    }
    let dims = [flat, cfg.fc_widths[0], cfg.fc_widths[1], cfg.fc_widths[2]];
    for i in 0..3 {
        let (d_in, d_out) = (dims[i], dims[i + 1]);
        if i == 2 {
            params.push(Parameter::normal(&[d_in, d_out], 0.01, &mut rng));
        } else {
            params.push(Parameter::he_normal(&[d_in, d_out], d_in, &mut rng));
        }
        params.push(Parameter::zeros(&[d_out]));
    }
    Ok(Network { cfg: cfg.clone(), params })
}

/// Emits the full forward graph for a batch of crops onto `tape`, reusing
/// already-inserted parameter leaves; returns the `[N, 2]` logits node.
/// Training mode enables dropout, drawing masks from `rng`.
pub fn classifier_graph<R: Rng>(
    cfg: &ClassifierConfig,
    tape: &mut Tape,
    param_ids: &[NodeId],
    crops: &[&Tensor],
    training: bool,
    rng: &mut R,
) -> Result<NodeId> {
    if param_ids.len() != 16 {
        return Err(Error::Argument(format!(
            "classifier graph needs 16 parameter nodes, got {}",
            param_ids.len()
        )));
    }
    if crops.is_empty() {
        return Err(Error::Argument("classifier batch is empty".into()));
    }
    let side = cfg.input_side;
    let mut rows = Vec::with_capacity(crops.len());
    for crop in crops {
        if crop.shape() != [3, side, side] {
            return Err(Error::Dim(format!(
                "crop shape {:?} does not match configured [3, {side}, {side}]",
                crop.shape()
            )));
        }
        let mut x = tape.constant((*crop).clone());
        for i in 0..5 {
            let c = tape.conv2d(x, param_ids[2 * i], param_ids[2 * i + 1], cfg.conv_strides[i])?;
            x = tape.relu(c)?;
            if i == 0 || i == 1 || i == 4 {
                x = tape.maxpool2d(x, 2, 2)?;
            }
        }
        rows.push(tape.flatten_row(x)?);
    }
    let mut h = tape.row_stack(&rows)?;
    for i in 0..3 {
        h = tape.linear(h, param_ids[10 + 2 * i], param_ids[11 + 2 * i])?;
        if i < 2 {
            h = tape.relu(h)?;
            h = tape.dropout(h, cfg.dropout, training, rng)?;
        }
    }
    Ok(h)
}

impl Network {
    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn into_parts(self) -> (ClassifierConfig, Vec<Parameter>) {
        (self.cfg, self.params)
    }

    /// Rebuilds a network around deserialized parameters; shapes must match
    /// the configuration.
    pub fn from_parts(cfg: ClassifierConfig, params: Vec<Parameter>) -> Result<Network> {
        let fresh = build_network(&cfg, 0)?;
        if fresh.params.len() != params.len() {
            return Err(Error::ModelFile(format!(
                "classifier expects {} parameter tensors, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for (f, p) in fresh.params.iter().zip(&params) {
            if f.shape() != p.shape() {
                return Err(Error::ModelFile(format!(
                    "classifier parameter shape {:?} does not match expected {:?}",
                    p.shape(),
                    f.shape()
                )));
            }
        }
        Ok(Network { cfg, params })
    }

    fn eval_logits(&self, crops: &[&Tensor]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> =
            self.params.iter().map(|p| tape.constant(p.tensor().clone())).collect();
        // rng is unused in eval mode; any stream works
        let mut rng = seeded(0);
        let logits = classifier_graph(&self.cfg, &mut tape, &ids, crops, false, &mut rng)?;
        Ok(tape.value(logits).data().to_vec())
    }
}

pub fn predict(net: &Network, crop: &Tensor) -> Result<StrabPrediction> {
    Ok(predict_batch(net, &[crop])?[0])
}

pub fn predict_batch(net: &Network, crops: &[&Tensor]) -> Result<Vec<StrabPrediction>> {
    let logits = net.eval_logits(crops)?;
    Ok(logits
        .chunks(2)
        .map(|row| {
            let probability = softmax_row(row)[STRABISMUS_CLASS];
            let label = if probability >= 0.5 { Label::Strabismus } else { Label::Normal };
            StrabPrediction { probability, label }
        })
        .collect())
}

/// Runs exactly `tc.iterations` mini-batch steps of SGD with momentum and
/// weight decay over seeded epoch shuffles (remainders are dropped), and
/// returns the trained network with the per-step loss history.
pub fn train_classifier(
    mut net: Network,
    crops: &[(Tensor, Label)],
    tc: &TrainConfig,
) -> Result<(Network, Vec<f64>)> {
    tc.validate()?;
    let n = crops.len();
    let have_both = crops.iter().any(|(_, l)| *l == Label::Strabismus)
        && crops.iter().any(|(_, l)| *l == Label::Normal);
    if !have_both {
        return Err(Error::Argument("training needs at least one crop of each class".into()));
    }
    net.cfg.dropout = tc.dropout;
    let batch = tc.batch.min(n);
    let mut rng = seeded(tc.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // forces an initial shuffle
    let mut history = Vec::with_capacity(tc.iterations);
    for step in 0..tc.iterations {
        if cursor + batch > n {
            shuffle(&mut order, &mut rng);
            cursor = 0;
        }
        let picks = &order[cursor..cursor + batch];
        cursor += batch;
        let loss = train_step(&mut net, crops, picks, tc, &mut rng)
            .map_err(|e| Error::Training { step, message: e.to_string() })?;
        if !loss.is_finite() {
            return Err(Error::Training { step, message: format!("loss diverged to {loss}") });
        }
        history.push(loss);
    }
    Ok((net, history))
}

fn train_step<R: Rng>(
    net: &mut Network,
    crops: &[(Tensor, Label)],
    picks: &[usize],
    tc: &TrainConfig,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = net.params.iter().map(|p| tape.param(p)).collect();
    let batch: Vec<&Tensor> = picks.iter().map(|&i| &crops[i].0).collect();
    let logits = classifier_graph(&net.cfg, &mut tape, &ids, &batch, true, rng)?;
    let loss = match net.cfg.loss {
        LossKind::CrossEntropy => {
            let labels: Vec<usize> = picks.iter().map(|&i| class_index(crops[i].1)).collect();
            tape.softmax_cross_entropy(logits, &labels)?
        }
        LossKind::Mse => {
            let mut onehot = vec![0.0; picks.len() * 2];
            for (row, &i) in picks.iter().enumerate() {
                onehot[row * 2 + class_index(crops[i].1)] = 1.0;
            }
            let probs = tape.softmax_rows(logits)?;
            let target = Tensor::from_vec(&[picks.len(), 2], onehot)?;
            tape.mse_loss(probs, &target)?
        }
    };
    tape.backward(loss)?;
    for (param, &id) in net.params.iter_mut().zip(&ids) {
        match tape.grad(id) {
            Some(g) => param.accumulate_grad(g)?,
            None => param.set_grad(vec![0.0; param.tensor().numel()])?,
        }
    }
    sgd_step(net.params.iter_mut(), tc.lr, tc.momentum, tc.weight_decay)?;
    Ok(tape.item(loss))
}

fn shuffle<R: Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Shifts and scales each channel to zero mean and unit variance; a
/// constant channel becomes all zeros.
pub fn normalize_crop(crop: &Tensor) -> Result<Tensor> {
    let s = crop.shape();
    if s.len() != 3 {
        return Err(Error::Dim(format!("crop must be [C, H, W], got {s:?}")));
    }
    let plane = s[1] * s[2];
    let mut out = crop.data().to_vec();
    for ch in out.chunks_mut(plane) {
        let mean = ch.iter().sum::<f64>() / plane as f64;
        let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
        if var < 1e-24 {
            ch.fill(0.0);
        } else {
            let inv = 1.0 / var.sqrt();
            for v in ch.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
    }
    Tensor::from_vec(s, out)
}

/// Bilinearly resamples the box region of `image` to a `[3, side, side]`
/// crop. The box is clipped to the image first.
pub fn resize_crop(image: &Tensor, roi: &RoIBox, side: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::Dim(format!("image must be [C, H, W], got {s:?}")));
    }
    if side == 0 {
        return Err(Error::Argument("crop side must be positive".into()));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let clipped = roi.clip(w as f64, h as f64);
    if clipped.width() <= 0.0 || clipped.height() <= 0.0 {
        return Err(Error::Argument(format!(
            "box [{}, {}, {}, {}] lies outside the image",
            roi.x0, roi.y0, roi.x1, roi.y1
        )));
    }
    let data = image.data();
    let mut out = Vec::with_capacity(c * side * side);
    let sx = clipped.width() / side as f64;
    let sy = clipped.height() / side as f64;
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for i in 0..side {
            // pixel centers of the target grid mapped into source coords
            let y = (clipped.y0 + (i as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = y.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = y - y0 as f64;
            for j in 0..side {
                let x = (clipped.x0 + (j as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = x - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::from_vec(&[c, side, side], out)
}
