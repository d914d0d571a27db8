//! Reverse-mode differentiation on a linear tape.
//!
//! Every operation appends one node holding its output value and enough
//! metadata to replay the backward step. Node inputs always precede the node
//! itself, so walking indices in reverse is exactly reverse topological
//! order of forward execution. `backward` seeds a scalar root with 1 and
//! accumulates gradients into each node; leaves created from [`Parameter`]s
//! carry them back to the optimizer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::psroi::{self, PoolGeometry, RoIBox, VoteMode};
use crate::tensor::kernels;
use crate::tensor::{softmax_row, Parameter, Tensor};

/// Index of a node on its tape. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// One gather address for [`Tape::gather_map`]: a run of `len` channels at a
/// fixed spatial cell of a `[C, H, W]` input.
#[derive(Clone, Copy, Debug)]
pub struct MapPick {
    pub chan: usize,
    pub len: usize,
    pub y: usize,
    pub x: usize,
}

enum Op {
    Leaf,
    Conv2d { input: NodeId, kernels: NodeId, bias: NodeId, stride: usize },
    MaxPool2d { input: NodeId, argmax: Vec<u32> },
    Relu { input: NodeId },
    Linear { input: NodeId, weight: NodeId, bias: NodeId },
    Flatten { input: NodeId },
    RowStack { inputs: Vec<NodeId> },
    GatherMap { input: NodeId, picks: Vec<MapPick> },
    SoftmaxCe { logits: NodeId, labels: Vec<usize>, probs: Vec<f64>, mean: bool },
    SoftmaxRows { logits: NodeId },
    SelectMean { input: NodeId, indices: Vec<usize> },
    SmoothL1Rows { pred: NodeId, target: Vec<f64> },
    MseLoss { pred: NodeId, target: Vec<f64> },
    Dropout { input: NodeId, mask: Vec<f64> },
    PsRoiPool { stack: NodeId, geom: PoolGeometry, classes: usize },
    Vote { pooled: NodeId, k: usize, classes: usize, mode: VoteMode },
    AddScalars { terms: Vec<NodeId> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Relu { .. } => "relu",
            Op::Linear { .. } => "linear",
            Op::Flatten { .. } => "flatten",
            Op::RowStack { .. } => "row_stack",
            Op::GatherMap { .. } => "gather_map",
            Op::SoftmaxCe { .. } => "softmax_cross_entropy",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::SelectMean { .. } => "select_mean",
            Op::SmoothL1Rows { .. } => "smooth_l1_rows",
            Op::MseLoss { .. } => "mse_loss",
            Op::Dropout { .. } => "dropout",
            Op::PsRoiPool { .. } => "psroi_pool",
            Op::Vote { .. } => "vote",
            Op::AddScalars { .. } => "add_scalars",
        }
    }
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Records a forward computation and differentiates it once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    ran_backward: bool,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Inserts a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Inserts a parameter's current value as a differentiable leaf. After
    /// `backward`, read the gradient with [`Tape::grad`] and hand it back to
    /// the parameter.
    pub fn param(&mut self, p: &Parameter) -> NodeId {
        self.push(p.tensor().clone(), true, Op::Leaf)
    }

    /// Inserts an arbitrary differentiable leaf.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// The scalar payload of a one-element node.
    pub fn item(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.item()
    }

    /// Gradient of the last `backward` root with respect to this node, if
    /// the node participated.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, needs_grad, op });
        id
    }

    fn emit(&mut self, shape: &[usize], data: Vec<f64>, needs: bool, op: Op) -> Result<NodeId> {
        for &v in &data {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite value in {} output", op.name())));
            }
        }
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.push(t, needs, op))
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn dims3(&self, id: NodeId, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.nodes[id.0].value.shape();
        if s.len() != 3 {
            return Err(Error::Dim(format!("{what} must be 3-d, got {s:?}")));
        }
        Ok((s[0], s[1], s[2]))
    }

    fn dims2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let s = self.nodes[id.0].value.shape();
        if s.len() != 2 {
            return Err(Error::Dim(format!("{what} must be 2-d, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Valid convolution of `[C_in, H, W]` with kernels `[C_out, C_in, Kh, Kw]`
    /// and bias `[C_out]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
    ) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::Argument("conv2d stride must be at least 1".into()));
        }
        let (ci, h, w) = self.dims3(input, "conv2d input")?;
        let ks = self.nodes[kernel.0].value.shape();
        if ks.len() != 4 {
            return Err(Error::Dim(format!("conv2d kernels must be 4-d, got {ks:?}")));
        }
        let (co, kci, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kci != ci {
            return Err(Error::Dim(format!(
                "conv2d kernels expect {kci} input channels, input has {ci}"
            )));
        }
        if kh > h || kw > w {
            return Err(Error::Dim(format!(
                "conv2d kernel {kh}x{kw} larger than input {h}x{w}"
            )));
        }
        if self.nodes[bias.0].value.shape() != [co] {
            return Err(Error::Dim(format!(
                "conv2d bias must have shape [{co}], got {:?}",
                self.nodes[bias.0].value.shape()
            )));
        }
        let out = kernels::conv2d_forward(
            self.nodes[input.0].value.data(),
            (ci, h, w),
            self.nodes[kernel.0].value.data(),
            (co, kh, kw),
            self.nodes[bias.0].value.data(),
            stride,
        );
        let ho = kernels::conv_out_extent(h, kh, stride);
        let wo = kernels::conv_out_extent(w, kw, stride);
        let needs = self.needs(&[input, kernel, bias]);
        self.emit(&[co, ho, wo], out, needs, Op::Conv2d { input, kernels: kernel, bias, stride })
    }

    /// Max pooling with a square `k` window; backward routes each cell's
    /// gradient to the first maximum in row-major scan order.
    pub fn maxpool2d(&mut self, input: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        if k == 0 || stride == 0 {
            return Err(Error::Argument("maxpool window and stride must be positive".into()));
        }
        let (c, h, w) = self.dims3(input, "maxpool input")?;
        if k > h || k > w {
            return Err(Error::Dim(format!("maxpool window {k} larger than input {h}x{w}")));
        }
        let (out, argmax) = kernels::maxpool_forward(self.nodes[input.0].value.data(), (c, h, w), k, stride);
        let ho = kernels::conv_out_extent(h, k, stride);
        let wo = kernels::conv_out_extent(w, k, stride);
        let needs = self.needs(&[input]);
        self.emit(&[c, ho, wo], out, needs, Op::MaxPool2d { input, argmax })
    }

    /// Elementwise `max(0, x)`; the gradient at exactly 0 is 0.
    pub fn relu(&mut self, input: NodeId) -> Result<NodeId> {
        let value = &self.nodes[input.0].value;
        let out: Vec<f64> = value.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = value.shape().to_vec();
        let needs = self.needs(&[input]);
        self.emit(&shape, out, needs, Op::Relu { input })
    }

    /// Affine map of `[N, D]` by weight `[D, M]` plus bias `[M]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, d) = self.dims2(input, "linear input")?;
        let (wd, m) = self.dims2(weight, "linear weight")?;
        if wd != d {
            return Err(Error::Dim(format!(
                "linear weight expects {wd} input features, input has {d}"
            )));
        }
        if self.nodes[bias.0].value.shape() != [m] {
            return Err(Error::Dim(format!(
                "linear bias must have shape [{m}], got {:?}",
                self.nodes[bias.0].value.shape()
            )));
        }
        let out = kernels::linear_forward(
            self.nodes[input.0].value.data(),
            (n, d),
            self.nodes[weight.0].value.data(),
            m,
            self.nodes[bias.0].value.data(),
        );
        let needs = self.needs(&[input, weight, bias]);
        self.emit(&[n, m], out, needs, Op::Linear { input, weight, bias })
    }

    /// Reshapes any node into a single `[1, numel]` row.
    pub fn flatten_row(&mut self, input: NodeId) -> Result<NodeId> {
        let value = &self.nodes[input.0].value;
        let data = value.data().to_vec();
        let n = data.len();
        let needs = self.needs(&[input]);
        self.emit(&[1, n], data, needs, Op::Flatten { input })
    }

    /// Stacks `[1, D]` rows into `[N, D]`.
    pub fn row_stack(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::Argument("row_stack needs at least one row".into()));
        }
        let (_, d) = self.dims2(rows[0], "row_stack input")?;
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let (rn, rd) = self.dims2(r, "row_stack input")?;
            if rn != 1 || rd != d {
                return Err(Error::Dim(format!(
                    "row_stack inputs must all be [1, {d}], got [{rn}, {rd}]"
                )));
            }
            data.extend_from_slice(self.nodes[r.0].value.data());
        }
        let needs = self.needs(rows);
        self.emit(&[rows.len(), d], data, needs, Op::RowStack { inputs: rows.to_vec() })
    }

    /// Gathers channel runs at fixed cells of a `[C, H, W]` map into
    /// `[picks, len]` rows. Used to pull per-anchor logits out of dense
    /// prediction maps.
    pub fn gather_map(&mut self, input: NodeId, picks: Vec<MapPick>) -> Result<NodeId> {
        let (c, h, w) = self.dims3(input, "gather_map input")?;
        if picks.is_empty() {
            return Err(Error::Argument("gather_map needs at least one pick".into()));
        }
        let len = picks[0].len;
        if len == 0 {
            return Err(Error::Argument("gather_map pick length must be positive".into()));
        }
        let data = self.nodes[input.0].value.data();
        let mut out = Vec::with_capacity(picks.len() * len);
        for p in &picks {
            if p.len != len {
                return Err(Error::Argument("gather_map picks must share one length".into()));
            }
            if p.chan + len > c || p.y >= h || p.x >= w {
                return Err(Error::Dim(format!(
                    "gather_map pick (chan {}, len {}, y {}, x {}) outside [{c}, {h}, {w}]",
                    p.chan, p.len, p.y, p.x
                )));
            }
            for j in 0..len {
                out.push(data[(p.chan + j) * h * w + p.y * w + p.x]);
            }
        }
        let n = picks.len();
        let needs = self.needs(&[input]);
        self.emit(&[n, len], out, needs, Op::GatherMap { input, picks })
    }

    fn softmax_ce_common(&mut self, logits: NodeId, labels: &[usize], mean: bool) -> Result<NodeId> {
        let (n, c) = self.dims2(logits, "cross-entropy logits")?;
        if labels.len() != n {
            return Err(Error::Argument(format!(
                "{} labels for {n} logit rows",
                labels.len()
            )));
        }
        let data = self.nodes[logits.0].value.data();
        let mut probs = Vec::with_capacity(n * c);
        let mut losses = Vec::with_capacity(n);
        for (i, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::Argument(format!(
                    "label {label} out of range for {c} classes (row {i})"
                )));
            }
            let row = &data[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            losses.push(lse - row[label]);
            probs.extend(softmax_row(row));
        }
        let needs = self.needs(&[logits]);
        let op = Op::SoftmaxCe { logits, labels: labels.to_vec(), probs, mean };
        if mean {
            let loss = losses.iter().sum::<f64>() / n as f64;
            self.emit(&[1], vec![loss], needs, op)
        } else {
            self.emit(&[n], losses, needs, op)
        }
    }

    /// Mean over rows of `-log softmax(logits)[label]`, computed with
    /// max-subtraction so huge logits cannot overflow.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.softmax_ce_common(logits, labels, true)
    }

    /// Per-row cross-entropy losses as an `[N]` vector, for loss-based
    /// example selection before averaging.
    pub fn softmax_cross_entropy_rows(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.softmax_ce_common(logits, labels, false)
    }

    /// Row-wise softmax of an `[N, C]` matrix.
    pub fn softmax_rows(&mut self, logits: NodeId) -> Result<NodeId> {
        let (n, c) = self.dims2(logits, "softmax input")?;
        let data = self.nodes[logits.0].value.data();
        let mut out = Vec::with_capacity(n * c);
        for row in 0..n {
            out.extend(crate::tensor::softmax_row(&data[row * c..(row + 1) * c]));
        }
        let needs = self.needs(&[logits]);
        self.emit(&[n, c], out, needs, Op::SoftmaxRows { logits })
    }

    /// Mean of the selected entries of an `[N]` vector; 0 when `indices` is
    /// empty (no gradient flows in that case).
    pub fn select_mean(&mut self, input: NodeId, indices: &[usize]) -> Result<NodeId> {
        let s = self.nodes[input.0].value.shape();
        if s.len() != 1 {
            return Err(Error::Dim(format!("select_mean input must be 1-d, got {s:?}")));
        }
        let n = s[0];
        let data = self.nodes[input.0].value.data();
        let mut acc = 0.0;
        for &ix in indices {
            if ix >= n {
                return Err(Error::Argument(format!("select_mean index {ix} out of {n}")));
            }
            acc += data[ix];
        }
        let value = if indices.is_empty() { 0.0 } else { acc / indices.len() as f64 };
        let needs = !indices.is_empty() && self.needs(&[input]);
        self.emit(&[1], vec![value], needs, Op::SelectMean { input, indices: indices.to_vec() })
    }

    /// Per-row sums of elementwise smooth-L1 between `[N, M]` predictions and
    /// a constant target of the same shape; output `[N]`.
    pub fn smooth_l1_rows(&mut self, pred: NodeId, target: &[f64]) -> Result<NodeId> {
        let (n, m) = self.dims2(pred, "smooth_l1 predictions")?;
        if target.len() != n * m {
            return Err(Error::Dim(format!(
                "smooth_l1 target has {} values, predictions are [{n}, {m}]",
                target.len()
            )));
        }
        let data = self.nodes[pred.0].value.data();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..m {
                acc += kernels::smooth_l1_value(data[i * m + j] - target[i * m + j]);
            }
            out.push(acc);
        }
        let needs = self.needs(&[pred]);
        self.emit(&[n], out, needs, Op::SmoothL1Rows { pred, target: target.to_vec() })
    }

    /// `(1/N) * sum_i ||pred_i - target_i||^2` over `[N, M]` rows.
    pub fn mse_loss(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let (n, _m) = self.dims2(pred, "mse predictions")?;
        let value = &self.nodes[pred.0].value;
        if value.shape() != target.shape() {
            return Err(Error::Dim(format!(
                "mse target shape {:?} does not match predictions {:?}",
                target.shape(),
                value.shape()
            )));
        }
        let loss = value
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<f64>()
            / n as f64;
        let needs = self.needs(&[pred]);
        self.emit(&[1], vec![loss], needs, Op::MseLoss { pred, target: target.data().to_vec() })
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`, so inference
    /// (training false) is the identity.
    pub fn dropout<R: Rng>(
        &mut self,
        input: NodeId,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Argument(format!("dropout probability {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let scale = 1.0 / (1.0 - p);
        let value = &self.nodes[input.0].value;
        let mask: Vec<f64> = (0..value.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let out: Vec<f64> = value.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = value.shape().to_vec();
        let needs = self.needs(&[input]);
        self.emit(&shape, out, needs, Op::Dropout { input, mask })
    }

    /// Position-sensitive pooling of a `[k*k*classes, Hf, Wf]` stack node
    /// for one RoI; output `[k, k, classes]`.
    pub fn psroi_pool(
        &mut self,
        stack: NodeId,
        roi: &RoIBox,
        k: usize,
        classes: usize,
        stride: usize,
    ) -> Result<NodeId> {
        let (c, hf, wf) = self.dims3(stack, "psroi stack")?;
        if c != k * k * classes {
            return Err(Error::Dim(format!(
                "psroi stack has {c} channels, {k}x{k} bins with {classes} classes need {}",
                k * k * classes
            )));
        }
        let geom = psroi::pool_geometry(roi, stride, hf, wf, k)?;
        let pooled = psroi::pool_forward(self.nodes[stack.0].value.data(), &geom, classes);
        let needs = self.needs(&[stack]);
        self.emit(&[k, k, classes], pooled, needs, Op::PsRoiPool { stack, geom, classes })
    }

    /// Reduces `[k, k, classes]` bin responses to a `[1, classes]` score row.
    pub fn vote(&mut self, pooled: NodeId, mode: VoteMode) -> Result<NodeId> {
        let (k, k2, classes) = self.dims3(pooled, "vote input")?;
        if k != k2 {
            return Err(Error::Dim(format!("vote input must be square-binned, got {k}x{k2}")));
        }
        let out = psroi::vote(self.nodes[pooled.0].value.data(), k, classes, mode);
        let needs = self.needs(&[pooled]);
        self.emit(&[1, classes], out, needs, Op::Vote { pooled, k, classes, mode })
    }

    /// Sum of scalar nodes, kept exact: the output is the plain `+` fold of
    /// the inputs in order.
    pub fn add_scalars(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        if terms.is_empty() {
            return Err(Error::Argument("add_scalars needs at least one term".into()));
        }
        let mut acc = 0.0;
        for &t in terms {
            let v = &self.nodes[t.0].value;
            if v.numel() != 1 {
                return Err(Error::Dim(format!(
                    "add_scalars term must be scalar, got shape {:?}",
                    v.shape()
                )));
            }
            acc += v.item();
        }
        let needs = self.needs(terms);
        self.emit(&[1], vec![acc], needs, Op::AddScalars { terms: terms.to_vec() })
    }

    /// Runs reverse accumulation from a scalar root. Gradients are stored on
    /// the participating nodes and read back with [`Tape::grad`]. A tape
    /// differentiates once.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.ran_backward {
            return Err(Error::State("tape already differentiated".into()));
        }
        let root_node = self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::Argument("backward root not on this tape".into()))?;
        if root_node.value.numel() != 1 {
            return Err(Error::Argument(format!(
                "backward root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        self.ran_backward = true;
        if !root_node.needs_grad {
            return Ok(());
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(nodes.len(), || None);
        grads[root.0] = Some(vec![1.0]);

        // take/put-back: pull a consumer's input-gradient buffer out of the
        // table, accumulate, then return it. Input ids are always distinct
        // nodes (shape validation forbids reuse across roles).
        fn take(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId) -> Vec<f64> {
            grads[id.0]
                .take()
                .unwrap_or_else(|| vec![0.0; nodes[id.0].value.numel()])
        }

        for i in (0..=root.0).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let up = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d { input, kernels: kern, bias, stride } => {
                    let (ci, h, w) = {
                        let s = nodes[input.0].value.shape();
                        (s[0], s[1], s[2])
                    };
                    let ks = nodes[kern.0].value.shape();
                    let (co, kh, kw) = (ks[0], ks[2], ks[3]);
                    let mut d_in = if nodes[input.0].needs_grad {
                        Some(take(&mut grads, nodes, *input))
                    } else {
                        None
                    };
                    let mut d_k = take(&mut grads, nodes, *kern);
                    let mut d_b = take(&mut grads, nodes, *bias);
                    kernels::conv2d_backward(
                        nodes[input.0].value.data(),
                        (ci, h, w),
                        nodes[kern.0].value.data(),
                        (co, kh, kw),
                        *stride,
                        &up,
                        d_in.as_deref_mut(),
                        &mut d_k,
                        &mut d_b,
                    );
                    if let Some(d_in) = d_in {
                        grads[input.0] = Some(d_in);
                    }
                    if nodes[kern.0].needs_grad {
                        grads[kern.0] = Some(d_k);
                    }
                    if nodes[bias.0].needs_grad {
                        grads[bias.0] = Some(d_b);
                    }
                }
                Op::MaxPool2d { input, argmax } => {
                    if nodes[input.0].needs_grad {
                        let mut d_in = take(&mut grads, nodes, *input);
                        kernels::maxpool_backward(&up, argmax, &mut d_in);
                        grads[input.0] = Some(d_in);
                    }
                }
                Op::Relu { input } => {
                    if nodes[input.0].needs_grad {
                        let mut d_in = take(&mut grads, nodes, *input);
                        for ((slot, &x), &u) in
                            d_in.iter_mut().zip(nodes[input.0].value.data()).zip(&up)
                        {
                            if x > 0.0 {
                                *slot += u;
                            }
                        }
                        grads[input.0] = Some(d_in);
                    }
                }
                Op::Linear { input, weight, bias } => {
                    let (n, d) = {
                        let s = nodes[input.0].value.shape();
                        (s[0], s[1])
                    };
                    let m = nodes[weight.0].value.shape()[1];
                    let mut d_in = if nodes[input.0].needs_grad {
                        Some(take(&mut grads, nodes, *input))
                    } else {
                        None
                    };
                    let mut d_w = take(&mut grads, nodes, *weight);
                    let mut d_b = take(&mut grads, nodes, *bias);
                    kernels::linear_backward(
                        nodes[input.0].value.data(),
                        (n, d),
                        nodes[weight.0].value.data(),
                        m,
                        &up,
                        d_in.as_deref_mut(),
                        &mut d_w,
                        &mut d_b,
                    );
                    if let Some(d_in) = d_in {
                        grads[input.0] = Some(d_in);
                    }
                    if nodes[weight.0].needs_grad {
                        grads[weight.0] = Some(d_w);
                    }
                    if nodes[bias.0].needs_grad {
                        grads[bias.0] = Some(d_b);
                    }
                }
                Op::Flatten { input } => {
                    if nodes[input.0].needs_grad {
                        let mut d_in = take(&mut grads, nodes, *input);
                        for (slot, &u) in d_in.iter_mut().zip(&up) {
                            *slot += u;
                        }
                        grads[input.0] = Some(d_in);
                    }
                }
                Op::RowStack { inputs } => {
                    let d = nodes[i].value.shape()[1];
                    for (row, &inp) in inputs.iter().enumerate() {
                        if !nodes[inp.0].needs_grad {
                            continue;
                        }
                        let mut d_in = take(&mut grads, nodes, inp);
                        for (slot, &u) in d_in.iter_mut().zip(&up[row * d..(row + 1) * d]) {
                            *slot += u;
                        }
                        grads[inp.0] = Some(d_in);
                    }
                }
                Op::GatherMap { input, picks } => {
                    if nodes[input.0].needs_grad {
                        let s = nodes[input.0].value.shape();
                        let (h, w) = (s[1], s[2]);
                        let len = picks[0].len;
                        let mut d_in = take(&mut grads, nodes, *input);
                        for (row, p) in picks.iter().enumerate() {
                            for j in 0..len {
                                d_in[(p.chan + j) * h * w + p.y * w + p.x] += up[row * len + j];
                            }
                        }
                        grads[input.0] = Some(d_in);
                    }
                }
                Op::SoftmaxCe { logits, labels, probs, mean } => {
                    if nodes[logits.0].needs_grad {
                        let c = nodes[logits.0].value.shape()[1];
                        let n = labels.len();
                        let mut d_l = take(&mut grads, nodes, *logits);
                        for (row, &label) in labels.iter().enumerate() {
                            let g = if *mean { up[0] / n as f64 } else { up[row] };
                            for j in 0..c {
                                let onehot = if j == label { 1.0 } else { 0.0 };
                                d_l[row * c + j] += g * (probs[row * c + j] - onehot);
                            }
                        }
                        grads[logits.0] = Some(d_l);
                    }
                }
                Op::SoftmaxRows { logits } => {
                    if nodes[logits.0].needs_grad {
                        let c = nodes[logits.0].value.shape()[1];
                        let n = nodes[logits.0].value.shape()[0];
                        let probs = nodes[i].value.data();
                        let mut d_l = take(&mut grads, nodes, *logits);
                        // jacobian-vector product: dL/dz_j = p_j (g_j - sum_k g_k p_k)
                        for row in 0..n {
                            let p = &probs[row * c..(row + 1) * c];
                            let g = &up[row * c..(row + 1) * c];
                            let dot: f64 = p.iter().zip(g).map(|(&pi, &gi)| pi * gi).sum();
                            for j in 0..c {
                                d_l[row * c + j] += p[j] * (g[j] - dot);
                            }
                        }
                        grads[logits.0] = Some(d_l);
                    }
                }
                Op::SelectMean { input, indices } => {
                    if nodes[input.0].needs_grad && !indices.is_empty() {
                        let g = up[0] / indices.len() as f64;
                        let mut d_in = take(&mut grads, nodes, *input);
                        for &ix in indices {
                            d_in[ix] += g;
                        }
                        grads[input.0] = Some(d_in);
                    }
                }
                Op::SmoothL1Rows { pred, target } => {
                    if nodes[pred.0].needs_grad {
                        let m = nodes[pred.0].value.shape()[1];
                        let data = nodes[pred.0].value.data();
                        let mut d_p = take(&mut grads, nodes, *pred);
                        for (row, &u) in up.iter().enumerate() {
                            for j in 0..m {
                                let diff = data[row * m + j] - target[row * m + j];
                                d_p[row * m + j] += u * kernels::smooth_l1_grad(diff);
                            }
                        }
                        grads[pred.0] = Some(d_p);
                    }
                }
                Op::MseLoss { pred, target } => {
                    if nodes[pred.0].needs_grad {
                        let n = nodes[pred.0].value.shape()[0] as f64;
                        let data = nodes[pred.0].value.data();
                        let mut d_p = take(&mut grads, nodes, *pred);
                        for ((slot, &p), &t) in d_p.iter_mut().zip(data).zip(target) {
                            *slot += up[0] * 2.0 * (p - t) / n;
                        }
                        grads[pred.0] = Some(d_p);
                    }
                }
                Op::Dropout { input, mask } => {
                    if nodes[input.0].needs_grad {
                        let mut d_in = take(&mut grads, nodes, *input);
                        for ((slot, &m), &u) in d_in.iter_mut().zip(mask).zip(&up) {
                            *slot += m * u;
                        }
                        grads[input.0] = Some(d_in);
                    }
                }
                Op::PsRoiPool { stack, geom, classes } => {
                    if nodes[stack.0].needs_grad {
                        let mut d_s = take(&mut grads, nodes, *stack);
                        psroi::pool_backward(geom, *classes, &up, &mut d_s);
                        grads[stack.0] = Some(d_s);
                    }
                }
                Op::Vote { pooled, k, classes, mode } => {
                    if nodes[pooled.0].needs_grad {
                        let factor = match mode {
                            VoteMode::Mean => 1.0 / (k * k) as f64,
                            VoteMode::Sum => 1.0,
                        };
                        let mut d_p = take(&mut grads, nodes, *pooled);
                        for bin in 0..k * k {
                            for c in 0..*classes {
                                d_p[bin * classes + c] += up[c] * factor;
                            }
                        }
                        grads[pooled.0] = Some(d_p);
                    }
                }
                Op::AddScalars { terms } => {
                    for &t in terms {
                        if nodes[t.0].needs_grad {
                            let mut d_t = take(&mut grads, nodes, t);
                            d_t[0] += up[0];
                            grads[t.0] = Some(d_t);
                        }
                    }
                }
            }
            grads[i] = Some(up);
        }

        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = grad {
                for &v in &g {
                    if !v.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite gradient flowing into {}",
                            node.op.name()
                        )));
                    }
                }
                node.value.set_grad(Some(g));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_root(tape: &Tape, id: NodeId) -> f64 {
        tape.item(id)
    }

    #[test]
    fn relu_backward_hand_case() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let row = tape.flatten_row(r).unwrap();
        let w = tape.constant(Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]));
        let out = tape.linear(row, w, b).unwrap();
        tape.backward(out).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_gradient_goes_to_first_occurrence() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(&[1, 2, 2], vec![1.0, 5.0, 5.0, 2.0]).unwrap());
        let p = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0]);
        tape.backward(p).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_equal_logits_is_ln2() {
        let mut tape = Tape::new();
        let logits = tape.variable(Tensor::from_vec(&[1, 2], vec![0.3, 0.3]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((scalar_root(&tape, loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_huge_logit_is_stable()  {
        let mut tape = Tape::new();
        let logits = tape.variable(Tensor::from_vec(&[1, 2], vec![1000.0, 0.0]).unwrap());
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        let v = scalar_root(&tape, loss);
        assert!(v.is_finite());
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::new();
        let logits = tape.variable(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap());
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[2]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn mse_hand_cases() {
        let mut tape = Tape::new();
        let p = tape.variable(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap());
        let t = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let loss = tape.mse_loss(p, &t).unwrap();
        assert_eq!(scalar_root(&tape, loss), 25.0);

        let mut tape = Tape::new();
        let p = tape.variable(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let loss = tape.mse_loss(p, &t).unwrap();
        assert_eq!(scalar_root(&tape, loss), 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_match_hand_case() {
        let mut tape = Tape::new();
        let z = tape.variable(
            Tensor::from_vec(&[2, 3], vec![0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]).unwrap(),
        );
        let p = tape.softmax_rows(z).unwrap();
        let v = tape.value(p).data();
        for row in v.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((v[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_backward_hand_case() {
        // z = [0, 0] -> p = [1/2, 1/2]; mse against [1, 0] gives
        // dL/dp = 2(p - t) = [-1, 1] and the softmax jacobian maps that to
        // p .* (g - g.p) = [-1/2, 1/2]
        let mut tape = Tape::new();
        let z = tape.variable(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap());
        let p = tape.softmax_rows(z).unwrap();
        let t = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let loss = tape.mse_loss(p, &t).unwrap();
        assert!((tape.item(loss) - 0.5).abs() < 1e-15);
        tape.backward(loss).unwrap();
        let g = tape.grad(z).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-12);
        assert!((g[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dropout_identity_paths() {
        let mut rng = crate::rng::seeded(5);
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let eval_mode = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(eval_mode, x);
        let p_zero = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(p_zero, x);
        assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(Error::Argument(_))));
    }

    #[test]
    fn dropout_preserves_mean_at_scale() {
        let mut rng = crate::rng::seeded(9);
        let mut tape = Tape::new();
        let n = 100_000;
        let x = tape.variable(Tensor::filled(&[n], 1.0));
        let d = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let mean = tape.value(d).data().iter().sum::<f64>() / n as f64;
        assert!((0.98..=1.02).contains(&mean), "mean {mean}");
    }

    #[test]
    fn select_mean_and_smooth_l1_rows() {
        let mut tape = Tape::new();
        let pred = tape.variable(Tensor::from_vec(&[2, 2], vec![0.0, 2.0, 0.5, 0.0]).unwrap());
        let rows = tape.smooth_l1_rows(pred, &[0.0, 0.0, 0.0, 0.0]).unwrap();
        // row 0: 0 + (2 - 0.5); row 1: 0.5*0.25 + 0
        assert_eq!(tape.value(rows).data(), &[1.5, 0.125]);
        let sel = tape.select_mean(rows, &[0, 1]).unwrap();
        assert!((scalar_root(&tape, sel) - 0.8125).abs() < 1e-12);
        let empty = tape.select_mean(rows, &[]).unwrap();
        assert_eq!(scalar_root(&tape, empty), 0.0);
    }

    #[test]
    fn add_scalars_is_exact_sum() {
        let mut tape = Tape::new();
        let a = tape.variable(Tensor::scalar(0.1));
        let b = tape.variable(Tensor::scalar(0.2));
        let s = tape.add_scalars(&[a, b]).unwrap();
        assert_eq!(scalar_root(&tape, s), 0.1 + 0.2);
    }

    #[test]
    fn gather_map_pulls_channel_runs() {
        let mut tape = Tape::new();
        // [4, 2, 2] map with value 100*c + 10*y + x
        let mut data = Vec::new();
        for c in 0..4 {
            for y in 0..2 {
                for x in 0..2 {
                    data.push((100 * c + 10 * y + x) as f64);
                }
            }
        }
        let m = tape.variable(Tensor::from_vec(&[4, 2, 2], data).unwrap());
        let g = tape
            .gather_map(
                m,
                vec![
                    MapPick { chan: 0, len: 2, y: 1, x: 0 },
                    MapPick { chan: 2, len: 2, y: 0, x: 1 },
                ],
            )
            .unwrap();
        assert_eq!(tape.value(g).shape(), &[2, 2]);
        assert_eq!(tape.value(g).data(), &[10.0, 110.0, 201.0, 301.0]);
    }

    #[test]
    fn backward_requires_scalar_root_and_runs_once() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(tape.backward(x), Err(Error::Argument(_))));

        let mut tape = Tape::new();
        let x = tape.variable(Tensor::scalar(3.0));
        tape.backward(x).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::State(_))));
    }

    #[test]
    fn constant_subgraph_gets_no_gradient() {
        let mut tape = Tape::new();
        let image = tape.constant(Tensor::filled(&[1, 4, 4], 0.5));
        let k = tape.variable(Tensor::filled(&[1, 1, 3, 3], 0.1));
        let b = tape.variable(Tensor::zeros(&[1]));
        let c = tape.conv2d(image, k, b, 1).unwrap();
        let row = tape.flatten_row(c).unwrap();
        let loss = tape.softmax_cross_entropy(row, &[0]).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(image).is_none());
        assert!(tape.grad(k).is_some());
    }

    #[test]
    fn psroi_vote_on_tape_matches_pure_functions() {
        let mut tape = Tape::new();
        let mut data = Vec::new();
        for c in 0..18 {
            for _ in 0..25 {
                data.push(c as f64 * 0.5);
            }
        }
        let stack = tape.variable(Tensor::from_vec(&[18, 5, 5], data).unwrap());
        let roi = RoIBox::new(0.0, 0.0, 40.0, 40.0).unwrap();
        let pooled = tape.psroi_pool(stack, &roi, 3, 2, 8).unwrap();
        let scores = tape.vote(pooled, VoteMode::Mean).unwrap();
        let expect = {
            let (p, _) = psroi::psroi_pool(tape.value(stack), &roi, 3, 2, 8).unwrap();
            psroi::vote(&p, 3, 2, VoteMode::Mean)
        };
        assert_eq!(tape.value(scores).data(), &expect[..]);
    }
}
