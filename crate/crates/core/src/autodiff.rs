//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are pushed
//! in evaluation order, so the node vector is already topologically sorted and
//! [`Graph::backward`] only has to walk it in reverse.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Convolution hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvGeometry {
    /// Padding that keeps the spatial size for stride 1.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        ConvGeometry {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Non-convolutional building blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Relu,
    ResidualAdd,
    /// Square window with stride equal to its size.
    AvgPool(usize),
    GlobalAvgPool,
    NearestUpsample(usize),
    Affine,
}

impl FromStr for LayerKind {
    type Err = Error;

    /// Parses `relu`, `residual_add`, `avg_pool[:k]`, `global_avg_pool`,
    /// `nearest_upsample[:f]`, `affine`. Window and factor default to 2.
    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let size = || -> Result<usize> {
            match arg {
                None => Ok(2),
                Some(a) => a
                    .parse()
                    .ok()
                    .filter(|&v: &usize| v > 0)
                    .ok_or_else(|| Error::InvalidArgument(format!("bad layer argument in `{s}`"))),
            }
        };
        match name {
            "relu" => Ok(LayerKind::Relu),
            "residual_add" => Ok(LayerKind::ResidualAdd),
            "avg_pool" => Ok(LayerKind::AvgPool(size()?)),
            "global_avg_pool" => Ok(LayerKind::GlobalAvgPool),
            "nearest_upsample" => Ok(LayerKind::NearestUpsample(size()?)),
            "affine" => Ok(LayerKind::Affine),
            _ => Err(Error::InvalidArgument(format!("unknown layer kind `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxCe,
    SigmoidBce,
    Cosine,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "softmax_ce" => Ok(LossKind::SoftmaxCe),
            "sigmoid_bce" => Ok(LossKind::SigmoidBce),
            "cosine" => Ok(LossKind::Cosine),
            _ => Err(Error::InvalidArgument(format!("unknown loss kind `{s}`"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LossKind::Mse => "mse",
            LossKind::SoftmaxCe => "softmax_ce",
            LossKind::SigmoidBce => "sigmoid_bce",
            LossKind::Cosine => "cosine",
        };
        f.write_str(s)
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeometry,
        /// im2col buffers, one `[Cin*kH*kW, H'*W']` block per sample.
        cols: Vec<f64>,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Exp(NodeId),
    Sum(NodeId),
    AvgPool(NodeId, usize),
    GlobalAvgPool(NodeId),
    Upsample(NodeId, usize),
    Affine {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    /// Mean-reduced loss; `dpred` is the gradient of the loss w.r.t. `pred`.
    Loss {
        pred: NodeId,
        dpred: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One recorded forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    outputs: Vec<(String, NodeId)>,
    relu_margin: f64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            outputs: Vec::new(),
            relu_margin: f64::INFINITY,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!(
                "node {} of shape {:?}",
                self.nodes.len(),
                value.shape()
            )));
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(id)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters referenced by this graph.
    pub fn parameters(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.param_nodes.keys().copied()
    }

    pub fn set_output(&mut self, name: impl Into<String>, id: NodeId) {
        self.outputs.push((name.into(), id));
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    /// Smallest |input| seen by any relu in this pass.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if let Some(&node) = self.param_nodes.get(&id) {
            return Ok(node);
        }
        let node = self.push(store.tensor(id).clone(), Op::Leaf, true)?;
        self.param_nodes.insert(id, node);
        Ok(node)
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeometry,
    ) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects 4-d input and weight, got {xs:?} and {ws:?}"
            )));
        }
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != wcin {
            return Err(Error::Shape(format!(
                "conv2d input has {cin} channels but weight expects {wcin}"
            )));
        }
        if bs != [cout] {
            return Err(Error::Shape(format!(
                "conv2d bias shape {bs:?} does not match {cout} output channels"
            )));
        }
        if geom.dilation == 0 || geom.stride == 0 {
            return Err(Error::InvalidArgument(
                "conv2d stride and dilation must be >= 1".into(),
            ));
        }
        let (ho, wo) = match (geom.output_extent(h, kh), geom.output_extent(w, kw)) {
            (Some(a), Some(b)) if a >= 1 && b >= 1 => (a, b),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d output extent is not positive for input {h}x{w}, kernel {kh}x{kw}, {geom:?}"
                )))
            }
        };

        let k = cin * kh * kw;
        let hw = ho * wo;
        let mut cols = vec![0.0; n * k * hw];
        let mut out = vec![0.0; n * cout * hw];
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        let b = self.value(bias).data();
        for s in 0..n {
            let col = &mut cols[s * k * hw..(s + 1) * k * hw];
            im2col(&x[s * cin * h * w..(s + 1) * cin * h * w], col, cin, h, w, kh, kw, ho, wo, geom);
            let y = &mut out[s * cout * hw..(s + 1) * cout * hw];
            for (c, row) in y.chunks_exact_mut(hw).enumerate() {
                row.fill(b[c]);
            }
            gemm(cout, k, hw, wt, k, 1, col, hw, 1, y, 1.0);
        }
        let rg = self.rg(&[input, weight, bias]);
        self.push(
            Tensor::new(vec![n, cout, ho, wo], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let margin = v.data().iter().fold(f64::INFINITY, |m, a| m.min(a.abs()));
        let out = v.map(|a| if a > 0.0 { a } else { 0.0 });
        self.relu_margin = self.relu_margin.min(margin);
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Elementwise sum of equally shaped tensors (the residual skip).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "add of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!(
                "mul of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out = self.value(x).map(|v| c * v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.value(x).map(f64::exp);
        let rg = self.rg(&[x]);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn avg_pool(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || size == 0 || s[2] < size || s[3] < size {
            return Err(Error::Shape(format!("avg_pool {size} on {s:?}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / size, w / size);
        let x_data = self.value(x).data();
        let norm = 1.0 / (size * size) as f64;
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let src = &x_data[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for dy in 0..size {
                        for dx in 0..size {
                            acc += src[(oy * size + dy) * w + ox * size + dx];
                        }
                    }
                    dst[oy * wo + ox] = acc * norm;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![n, c, ho, wo], out)?, Op::AvgPool(x, size), rg)
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::Shape(format!("global_avg_pool on {s:?}")));
        }
        let hw = s[2] * s[3];
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(vec![s[0], s[1]], out)?, Op::GlobalAvgPool(x), rg)
    }

    pub fn nearest_upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::Shape(format!("nearest_upsample x{factor} on {s:?}")));
        }
        let (h, w) = (s[2], s[3]);
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; s[0] * s[1] * ho * wo];
        for plane in 0..s[0] * s[1] {
            for oy in 0..ho {
                for ox in 0..wo {
                    out[plane * ho * wo + oy * wo + ox] =
                        src[plane * h * w + (oy / factor) * w + ox / factor];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![s[0], s[1], ho, wo], out)?,
            Op::Upsample(x, factor),
            rg,
        )
    }

    /// `y = x W^T + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.value(input).shape(),
            self.value(weight).shape(),
            self.value(bias).shape(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::Shape(format!(
                "affine with input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let b = self.value(bias).data();
        let mut out: Vec<f64> = (0..n).flat_map(|_| b.iter().copied()).collect();
        gemm(
            n,
            din,
            dout,
            self.value(input).data(),
            din,
            1,
            self.value(weight).data(),
            1,
            din,
            &mut out,
            1.0,
        );
        let rg = self.rg(&[input, weight, bias]);
        self.push(
            Tensor::new(vec![n, dout], out)?,
            Op::Affine {
                input,
                weight,
                bias,
            },
            rg,
        )
    }

    /// Dispatches a building block by kind. `Affine` takes `[x, W, b]`,
    /// `ResidualAdd` takes two inputs, the rest take one.
    pub fn apply_layer(&mut self, kind: LayerKind, inputs: &[NodeId]) -> Result<NodeId> {
        let arity = match kind {
            LayerKind::Affine => 3,
            LayerKind::ResidualAdd => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::InvalidArgument(format!(
                "{kind:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match kind {
            LayerKind::Relu => self.relu(inputs[0]),
            LayerKind::ResidualAdd => self.add(inputs[0], inputs[1]),
            LayerKind::AvgPool(k) => self.avg_pool(inputs[0], k),
            LayerKind::GlobalAvgPool => self.global_avg_pool(inputs[0]),
            LayerKind::NearestUpsample(f) => self.nearest_upsample(inputs[0], f),
            LayerKind::Affine => self.affine(inputs[0], inputs[1], inputs[2]),
        }
    }

    /// Mean-reduced loss of `pred` against a constant target.
    ///
    /// * `mse`, `sigmoid_bce`: target has the shape of `pred`.
    /// * `softmax_ce`: `pred` is `[N, K, ...]` logits, target is `[N, ...]`
    ///   holding class indices.
    /// * `cosine`: vectors run along axis 1; loss is `1 - mean cos`.
    pub fn loss(&mut self, kind: LossKind, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        let p = self.value(pred);
        let (value, dpred) = match kind {
            LossKind::Mse => mse(p, target)?,
            LossKind::SoftmaxCe => softmax_ce(p, target)?,
            LossKind::SigmoidBce => sigmoid_bce(p, target)?,
            LossKind::Cosine => cosine_loss(p, target)?,
        };
        let rg = self.rg(&[pred]);
        self.push(Tensor::scalar(value), Op::Loss { pred, dpred }, rg)
    }

    /// Reverse sweep from a scalar node. Every parameter in the graph gets an
    /// entry; unreachable ones get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient at node {idx}")));
            }
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                } => self.conv2d_backward(&mut grads, &g, *input, *weight, *bias, *geom, cols),
                Op::Relu(x) => {
                    let xv = self.value(*x).data();
                    let d: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(xv)
                        .map(|(gv, &a)| if a > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.data().to_vec());
                    self.accumulate(&mut grads, *b, g.into_data());
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let da = g.data().iter().zip(vb).map(|(x, y)| x * y).collect();
                    let db = g.data().iter().zip(va).map(|(x, y)| x * y).collect();
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Scale(x, c) => {
                    let d = g.data().iter().map(|v| v * c).collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Exp(x) => {
                    let d = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(gv, e)| gv * e)
                        .collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).numel();
                    self.accumulate(&mut grads, *x, vec![g.item(); n]);
                }
                Op::AvgPool(x, size) => {
                    let s = self.value(*x).shape();
                    let (h, w) = (s[2], s[3]);
                    let (ho, wo) = (h / size, w / size);
                    let norm = 1.0 / (size * size) as f64;
                    let mut d = vec![0.0; self.value(*x).numel()];
                    for plane in 0..s[0] * s[1] {
                        let gp = &g.data()[plane * ho * wo..(plane + 1) * ho * wo];
                        let dp = &mut d[plane * h * w..(plane + 1) * h * w];
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let v = gp[oy * wo + ox] * norm;
                                for dy in 0..*size {
                                    for dx in 0..*size {
                                        dp[(oy * size + dy) * w + ox * size + dx] += v;
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, d);
                }
                Op::GlobalAvgPool(x) => {
                    let s = self.value(*x).shape();
                    let hw = s[2] * s[3];
                    let d = g
                        .data()
                        .iter()
                        .flat_map(|&v| std::iter::repeat_n(v / hw as f64, hw))
                        .collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Upsample(x, factor) => {
                    let s = self.value(*x).shape();
                    let (h, w) = (s[2], s[3]);
                    let (ho, wo) = (h * factor, w * factor);
                    let mut d = vec![0.0; self.value(*x).numel()];
                    for plane in 0..s[0] * s[1] {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                d[plane * h * w + (oy / factor) * w + ox / factor] +=
                                    g.data()[plane * ho * wo + oy * wo + ox];
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Affine {
                    input,
                    weight,
                    bias,
                } => {
                    let xs = self.value(*input).shape();
                    let (n, din) = (xs[0], xs[1]);
                    let dout = self.value(*weight).shape()[0];
                    if self.nodes[input.0].requires_grad {
                        let mut dx = vec![0.0; n * din];
                        gemm(n, dout, din, g.data(), dout, 1, self.value(*weight).data(), din, 1, &mut dx, 0.0);
                        self.accumulate(&mut grads, *input, dx);
                    }
                    if self.nodes[weight.0].requires_grad {
                        let mut dw = vec![0.0; dout * din];
                        gemm(dout, n, din, g.data(), 1, dout, self.value(*input).data(), din, 1, &mut dw, 0.0);
                        self.accumulate(&mut grads, *weight, dw);
                    }
                    if self.nodes[bias.0].requires_grad {
                        let mut db = vec![0.0; dout];
                        for row in g.data().chunks_exact(dout) {
                            for (acc, v) in db.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.accumulate(&mut grads, *bias, db);
                    }
                }
                Op::Loss { pred, dpred } => {
                    let s = g.item();
                    let d = dpred.data().iter().map(|v| v * s).collect();
                    self.accumulate(&mut grads, *pred, d);
                }
            }
        }

        let mut out = Gradients::new();
        for (&pid, &node) in &self.param_nodes {
            let g = grads[node.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(node).shape()));
            out.insert(pid, g);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, d: Vec<f64>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, v) in acc.data_mut().iter_mut().zip(&d) {
                    *a += v;
                }
            }
            slot @ None => {
                let shape = self.value(target).shape().to_vec();
                *slot = Some(Tensor::new(shape, d).expect("gradient matches node shape"));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        grads: &mut [Option<Tensor>],
        g: &Tensor,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        geom: ConvGeometry,
        cols: &[f64],
    ) {
        let xs = self.value(input).shape();
        let ws = self.value(weight).shape();
        let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, wo) = (g.shape()[2], g.shape()[3]);
        let k = cin * kh * kw;
        let hw = ho * wo;
        let gd = g.data();

        if self.nodes[weight.0].requires_grad {
            let mut dw = vec![0.0; cout * k];
            for s in 0..n {
                let gs = &gd[s * cout * hw..(s + 1) * cout * hw];
                let col = &cols[s * k * hw..(s + 1) * k * hw];
                // dW += dY · cols^T
                gemm(cout, hw, k, gs, hw, 1, col, 1, hw, &mut dw, 1.0);
            }
            self.accumulate(grads, weight, dw);
        }
        if self.nodes[bias.0].requires_grad {
            let mut db = vec![0.0; cout];
            for s in 0..n {
                for (c, acc) in db.iter_mut().enumerate() {
                    let off = (s * cout + c) * hw;
                    *acc += gd[off..off + hw].iter().sum::<f64>();
                }
            }
            self.accumulate(grads, bias, db);
        }
        if self.nodes[input.0].requires_grad {
            let wt = self.value(weight).data();
            let mut dx = vec![0.0; n * cin * h * w];
            let mut dcol = vec![0.0; k * hw];
            for s in 0..n {
                let gs = &gd[s * cout * hw..(s + 1) * cout * hw];
                // dcols = W^T · dY
                gemm(k, cout, hw, wt, 1, k, gs, hw, 1, &mut dcol, 0.0);
                col2im(&dcol, &mut dx[s * cin * h * w..(s + 1) * cin * h * w], cin, h, w, kh, kw, ho, wo, geom);
            }
            self.accumulate(grads, input, dx);
        }
    }
}

/// `c = a·b + beta·c` with explicit row/column strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: the callers size `a`, `b` and `c` for the given extents and
    // strides; `c` is row-major `[m, n]`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    col: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeometry,
) {
    let hw = ho * wo;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((c * kh + ki) * kw + kj) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ki * geom.dilation) as isize - geom.padding as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * geom.stride + kj * geom.dilation) as isize - geom.padding as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &[f64],
    dx: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    geom: ConvGeometry,
) {
    let hw = ho * wo;
    for c in 0..cin {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &col[((c * kh + ki) * kw + kj) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * geom.stride + ki * geom.dilation) as isize - geom.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * geom.stride + kj * geom.dilation) as isize - geom.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn same_shape(kind: &str, p: &Tensor, t: &Tensor) -> Result<()> {
    if p.shape() != t.shape() {
        return Err(Error::Shape(format!(
            "{kind} prediction {:?} vs target {:?}",
            p.shape(),
            t.shape()
        )));
    }
    Ok(())
}

fn mse(p: &Tensor, t: &Tensor) -> Result<(f64, Tensor)> {
    same_shape("mse", p, t)?;
    let n = p.numel() as f64;
    let mut value = 0.0;
    let d = p
        .data()
        .iter()
        .zip(t.data())
        .map(|(a, b)| {
            let r = a - b;
            value += r * r;
            2.0 * r / n
        })
        .collect();
    Ok((value / n, Tensor::new(p.shape().to_vec(), d)?))
}

/// Numerically stable `log(1 + e^z)`.
pub(crate) fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_bce(p: &Tensor, t: &Tensor) -> Result<(f64, Tensor)> {
    same_shape("sigmoid_bce", p, t)?;
    let n = p.numel() as f64;
    let mut value = 0.0;
    let d = p
        .data()
        .iter()
        .zip(t.data())
        .map(|(&z, &y)| {
            value += softplus(z) - z * y;
            (sigmoid(z) - y) / n
        })
        .collect();
    Ok((value / n, Tensor::new(p.shape().to_vec(), d)?))
}

fn softmax_ce(p: &Tensor, t: &Tensor) -> Result<(f64, Tensor)> {
    let ps = p.shape();
    if ps.len() < 2 {
        return Err(Error::Shape(format!("softmax_ce logits {ps:?} need a class axis")));
    }
    let (n, k) = (ps[0], ps[1]);
    let inner: usize = ps[2..].iter().product();
    let mut expect = vec![n];
    expect.extend_from_slice(&ps[2..]);
    if t.shape() != expect.as_slice() && !(t.numel() == n * inner && t.shape()[0] == n) {
        return Err(Error::Shape(format!(
            "softmax_ce logits {ps:?} vs class map {:?}",
            t.shape()
        )));
    }
    let m = (n * inner) as f64;
    let z = p.data();
    let mut d = vec![0.0; p.numel()];
    let mut value = 0.0;
    for s in 0..n {
        for i in 0..inner {
            let label = t.data()[s * inner + i];
            if label < 0.0 || label.fract() != 0.0 || label as usize >= k {
                return Err(Error::InvalidArgument(format!(
                    "softmax_ce target {label} is not a class index below {k}"
                )));
            }
            let at = |c: usize| (s * k + c) * inner + i;
            let zmax = (0..k).map(|c| z[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..k).map(|c| (z[at(c)] - zmax).exp()).sum();
            let lse = zmax + denom.ln();
            value += lse - z[at(label as usize)];
            for c in 0..k {
                let prob = (z[at(c)] - lse).exp();
                let onehot = if c == label as usize { 1.0 } else { 0.0 };
                d[at(c)] = (prob - onehot) / m;
            }
        }
    }
    Ok((value / m, Tensor::new(ps.to_vec(), d)?))
}

fn cosine_loss(p: &Tensor, t: &Tensor) -> Result<(f64, Tensor)> {
    same_shape("cosine", p, t)?;
    let ps = p.shape();
    if ps.len() < 2 {
        return Err(Error::Shape(format!("cosine needs a vector axis, got {ps:?}")));
    }
    let (n, c) = (ps[0], ps[1]);
    let inner: usize = ps[2..].iter().product();
    let m = (n * inner) as f64;
    let (pd, td) = (p.data(), t.data());
    let mut d = vec![0.0; p.numel()];
    let mut total = 0.0;
    for s in 0..n {
        for i in 0..inner {
            let at = |ch: usize| (s * c + ch) * inner + i;
            let (mut pp, mut tt, mut pt) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                let (a, b) = (pd[at(ch)], td[at(ch)]);
                pp += a * a;
                tt += b * b;
                pt += a * b;
            }
            if pp == 0.0 || tt == 0.0 {
                return Err(Error::InvalidArgument(
                    "cosine loss on a zero-norm vector".into(),
                ));
            }
            let (np, nt) = (pp.sqrt(), tt.sqrt());
            let cos = pt / (np * nt);
            total += cos;
            for ch in 0..c {
                let dcos = td[at(ch)] / (np * nt) - cos * pd[at(ch)] / pp;
                d[at(ch)] = -dcos / m;
            }
        }
    }
    Ok((1.0 - total / m, Tensor::new(ps.to_vec(), d)?))
}

/// Central-difference check of `backward` over every parameter the built
/// graph touches. Returns the max of `|analytic - numeric| / max(1e-12, |numeric|)`.
pub fn finite_diff_check<F>(store: &mut ParamStore, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(Graph, NodeId)>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let (graph, loss) = build(store)?;
    let grads = graph.backward(loss)?;
    let mut ids: Vec<ParamId> = graph.parameters().collect();
    ids.sort();
    drop(graph);

    let eval = |store: &ParamStore| -> Result<f64> {
        let (g, l) = build(store)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("loss during finite differences".into()));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = grads.require(store, id)?.clone();
        for i in 0..analytic.numel() {
            let orig = store.tensor(id).data()[i];
            store.tensor_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.tensor_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1e-12);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
