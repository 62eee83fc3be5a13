//! Minimal reverse-mode differentiable-computation kernel.
//!
//! A [`Graph`] is built once (construction order is the topological order),
//! retained, and re-run: set inputs, call [`Graph::forward`], build a scalar
//! loss, call [`Graph::backward`], read parameter gradients, apply
//! [`adam_step`]. Everything is dense row-major `f64`; shapes are validated
//! at node-construction time. Convolutions run through im2col + GEMM.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Dense row-major tensor, up to 4-D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::ShapeMismatch {
                node: "tensor".into(),
                detail: format!("shape {shape:?} needs {len} values, got {}", data.len()),
            });
        }
        if shape.len() > 4 {
            return Err(Error::ShapeMismatch {
                node: "tensor".into(),
                detail: format!("rank {} > 4", shape.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Kaiming-uniform style fan-in init used for conv and linear weights.
    pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut impl rand::Rng) -> Tensor {
        let bound = (1.0 / fan_in as f64).sqrt();
        let data = (0..shape.iter().product())
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }
}

pub type NodeId = usize;

/// Operation kinds. Shape rules are enforced when the node is added.
#[derive(Debug, Clone)]
enum OpKind {
    /// Externally provided value (observations, actions, advantages, …).
    Input,
    /// Trainable parameter; its value persists across forward passes.
    Param,
    /// `x [n,k] · wᵀ` with `w [m,k]` → `[n,m]`.
    MatMulNT,
    /// `x [n,m] + b [m]` broadcast over rows.
    AddRowBroadcast,
    /// `b [m]` replicated to `[rows, m]`.
    ExpandRows { rows: usize },
    /// NCHW conv, stride 1, square kernel from the weight shape, zero padding
    /// `(k−1)/2` (same-size output).
    Conv2d,
    /// `x [n,c,h,w] + b [c]` broadcast per channel.
    AddChannelBias,
    /// 2×2 max-pool, stride 2; gradient routes to the first-occurrence
    /// argmax in row-major window order.
    MaxPool2,
    /// Nearest-neighbor 2× upsampling.
    UpsampleNearest2,
    /// Channel concatenation of two NCHW tensors.
    ConcatChannels,
    Relu,
    Tanh,
    Exp,
    Sqrt,
    Square,
    Scale { c: f64 },
    AddConst { c: f64 },
    Clamp { lo: f64, hi: f64 },
    Add,
    Sub,
    Mul,
    /// Elementwise minimum; ties route the gradient to the first input.
    Min,
    /// Row-wise softmax on `[n,m]`.
    RowSoftmax,
    RowLogSoftmax,
    /// Row-wise sum `[n,m] → [n]`.
    RowSum,
    /// `x[i, idx[i]]` per row; `idx` is an input tensor of whole numbers.
    SelectPerRow,
    /// Gather pixels from `[1,c,h,w]` at flat spatial indices `[n]` → `[n,c]`.
    GatherPixels,
    SumAll,
    MeanAll,
    Reshape { shape: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    op: OpKind,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    name: String,
}

/// Retained computation graph with per-node value and gradient buffers.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    values: Vec<Option<Tensor>>,
    grads: Vec<Option<Tensor>>,
    params: Vec<NodeId>,
    forward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            nodes: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
            forward_done: false,
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn param_ids(&self) -> &[NodeId] {
        &self.params
    }

    pub fn param_name(&self, id: NodeId) -> &str {
        &self.nodes[id].name
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.values.push(None);
        self.grads.push(None);
        self.nodes.len() - 1
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Node {
            op: OpKind::Input,
            inputs: vec![],
            shape: shape.to_vec(),
            name: name.into(),
        })
    }

    pub fn param(&mut self, name: &str, init: Tensor) -> NodeId {
        let id = self.push(Node {
            op: OpKind::Param,
            inputs: vec![],
            shape: init.shape.clone(),
            name: name.into(),
        });
        self.values[id] = Some(init);
        self.params.push(id);
        id
    }

    pub fn set_input(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        if !matches!(self.nodes[id].op, OpKind::Input) {
            return Err(Error::Config(format!(
                "node {} is not an input",
                self.nodes[id].name
            )));
        }
        if value.shape != self.nodes[id].shape {
            return Err(Error::ShapeMismatch {
                node: self.nodes[id].name.clone(),
                detail: format!(
                    "expected {:?}, got {:?}",
                    self.nodes[id].shape, value.shape
                ),
            });
        }
        self.values[id] = Some(value);
        Ok(())
    }

    /// Direct access to a parameter's value (e.g. for checkpoint metadata).
    pub fn param_value(&self, id: NodeId) -> &Tensor {
        self.values[id].as_ref().expect("param always has a value")
    }

    pub fn param_value_mut(&mut self, id: NodeId) -> &mut Tensor {
        self.values[id].as_mut().expect("param always has a value")
    }

    /// Value of any node after `forward`.
    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.values[id].as_ref().ok_or_else(|| {
            Error::BackwardBeforeForward(format!(
                "value of node {} requested before forward",
                self.nodes[id].name
            ))
        })
    }

    /// Gradient of any node after `backward`; zero tensor when disconnected.
    pub fn grad(&self, id: NodeId) -> Tensor {
        self.grads[id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.nodes[id].shape))
    }

    fn mismatch(&self, name: &str, detail: String) -> Error {
        Error::ShapeMismatch {
            node: name.into(),
            detail,
        }
    }

    fn add_op(&mut self, op: OpKind, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let name = format!("{:?}#{}", op_tag(&op), self.nodes.len());
        self.push(Node {
            op,
            inputs,
            shape,
            name,
        })
    }

    // ---- shape-checked op constructors -------------------------------

    pub fn matmul_nt(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(self.mismatch("matmul_nt", format!("x {xs:?} · wᵀ {ws:?}")));
        }
        Ok(self.add_op(OpKind::MatMulNT, vec![x, w], vec![xs[0], ws[0]]))
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if xs.len() != 2 || bs != vec![xs[1]] {
            return Err(self.mismatch("add_row_broadcast", format!("x {xs:?} + b {bs:?}")));
        }
        Ok(self.add_op(OpKind::AddRowBroadcast, vec![x, b], xs))
    }

    pub fn expand_rows(&mut self, b: NodeId, rows: usize) -> Result<NodeId> {
        let bs = self.shape(b).to_vec();
        if bs.len() != 1 {
            return Err(self.mismatch("expand_rows", format!("need rank-1, got {bs:?}")));
        }
        let m = bs[0];
        Ok(self.add_op(OpKind::ExpandRows { rows }, vec![b], vec![rows, m]))
    }

    /// `x [n,c,h,w]`, `w [f,c,k,k]` with k odd → `[n,f,h,w]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(self.mismatch("conv2d", format!("x {xs:?} * w {ws:?}")));
        }
        Ok(self.add_op(
            OpKind::Conv2d,
            vec![x, w],
            vec![xs[0], ws[0], xs[2], xs[3]],
        ))
    }

    pub fn add_channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if xs.len() != 4 || bs != vec![xs[1]] {
            return Err(self.mismatch("add_channel_bias", format!("x {xs:?} + b {bs:?}")));
        }
        Ok(self.add_op(OpKind::AddChannelBias, vec![x, b], xs))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] % 2 != 0 || xs[3] % 2 != 0 {
            return Err(self.mismatch("maxpool2", format!("x {xs:?} must have even h,w")));
        }
        Ok(self.add_op(
            OpKind::MaxPool2,
            vec![x],
            vec![xs[0], xs[1], xs[2] / 2, xs[3] / 2],
        ))
    }

    pub fn upsample_nearest2(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(self.mismatch("upsample_nearest2", format!("x {xs:?}")));
        }
        Ok(self.add_op(
            OpKind::UpsampleNearest2,
            vec![x],
            vec![xs[0], xs[1], xs[2] * 2, xs[3] * 2],
        ))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (s0, s1) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if s0.len() != 4
            || s1.len() != 4
            || s0[0] != s1[0]
            || s0[2] != s1[2]
            || s0[3] != s1[3]
        {
            return Err(self.mismatch("concat_channels", format!("a {s0:?} ++ b {s1:?}")));
        }
        Ok(self.add_op(
            OpKind::ConcatChannels,
            vec![a, b],
            vec![s0[0], s0[1] + s1[1], s0[2], s0[3]],
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.add_op(OpKind::Relu, vec![x], s)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.add_op(OpKind::Tanh, vec![x], s)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.add_op(OpKind::Exp, vec![x], s)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.add_op(OpKind::Sqrt, vec![x], s)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let s = self.shape(x).to_vec();
        self.add_op(OpKind::Square, vec![x], s)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let s = self.shape(x).to_vec();
        self.add_op(OpKind::Scale { c }, vec![x], s)
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let s = self.shape(x).to_vec();
        self.add_op(OpKind::AddConst { c }, vec![x], s)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let s = self.shape(x).to_vec();
        self.add_op(OpKind::Clamp { lo, hi }, vec![x], s)
    }

    fn binary_same_shape(&mut self, op: OpKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (s0, s1) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if s0 != s1 {
            return Err(self.mismatch(
                &format!("{:?}", op_tag(&op)),
                format!("shapes {s0:?} vs {s1:?}"),
            ));
        }
        Ok(self.add_op(op, vec![a, b], s0))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(OpKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(OpKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(OpKind::Mul, a, b)
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(OpKind::Min, a, b)
    }

    pub fn row_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(self.mismatch("row_softmax", format!("x {s:?}")));
        }
        Ok(self.add_op(OpKind::RowSoftmax, vec![x], s))
    }

    pub fn row_log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(self.mismatch("row_log_softmax", format!("x {s:?}")));
        }
        Ok(self.add_op(OpKind::RowLogSoftmax, vec![x], s))
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(self.mismatch("row_sum", format!("x {s:?}")));
        }
        Ok(self.add_op(OpKind::RowSum, vec![x], vec![s[0]]))
    }

    pub fn select_per_row(&mut self, x: NodeId, idx: NodeId) -> Result<NodeId> {
        let (xs, is) = (self.shape(x).to_vec(), self.shape(idx).to_vec());
        if xs.len() != 2 || is != vec![xs[0]] {
            return Err(self.mismatch("select_per_row", format!("x {xs:?}, idx {is:?}")));
        }
        Ok(self.add_op(OpKind::SelectPerRow, vec![x, idx], vec![xs[0]]))
    }

    pub fn gather_pixels(&mut self, x: NodeId, idx: NodeId) -> Result<NodeId> {
        let (xs, is) = (self.shape(x).to_vec(), self.shape(idx).to_vec());
        if xs.len() != 4 || xs[0] != 1 || is.len() != 1 {
            return Err(self.mismatch("gather_pixels", format!("x {xs:?}, idx {is:?}")));
        }
        Ok(self.add_op(OpKind::GatherPixels, vec![x, idx], vec![is[0], xs[1]]))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        self.add_op(OpKind::SumAll, vec![x], vec![1])
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        self.add_op(OpKind::MeanAll, vec![x], vec![1])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(self.mismatch("reshape", format!("{xs:?} → {shape:?}")));
        }
        Ok(self.add_op(
            OpKind::Reshape {
                shape: shape.to_vec(),
            },
            vec![x],
            shape.to_vec(),
        ))
    }

    // ---- layer helpers ------------------------------------------------

    /// Linear layer `y = x·Wᵀ + b` with fresh fan-in-initialized parameters.
    pub fn linear(
        &mut self,
        prefix: &str,
        x: NodeId,
        out_dim: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<NodeId> {
        let in_dim = self.shape(x)[1];
        let w = self.param(
            &format!("{prefix}.w"),
            Tensor::init_uniform(&[out_dim, in_dim], in_dim, rng),
        );
        let b = self.param(&format!("{prefix}.b"), Tensor::zeros(&[out_dim]));
        let y = self.matmul_nt(x, w)?;
        self.add_row_broadcast(y, b)
    }

    /// Conv layer with bias, kernel `k`, same-size output.
    pub fn conv_layer(
        &mut self,
        prefix: &str,
        x: NodeId,
        out_ch: usize,
        k: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<NodeId> {
        let in_ch = self.shape(x)[1];
        let w = self.param(
            &format!("{prefix}.w"),
            Tensor::init_uniform(&[out_ch, in_ch, k, k], in_ch * k * k, rng),
        );
        let b = self.param(&format!("{prefix}.b"), Tensor::zeros(&[out_ch]));
        let y = self.conv2d(x, w)?;
        self.add_channel_bias(y, b)
    }

    // ---- execution ----------------------------------------------------

    /// Evaluates every node in construction (topological) order.
    pub fn forward(&mut self) -> Result<()> {
        for id in 0..self.nodes.len() {
            match self.nodes[id].op {
                OpKind::Input | OpKind::Param => {
                    if self.values[id].is_none() {
                        return Err(Error::Config(format!(
                            "input {} not set before forward",
                            self.nodes[id].name
                        )));
                    }
                }
                _ => {
                    let out = self.eval(id)?;
                    self.values[id] = Some(out);
                }
            }
        }
        self.forward_done = true;
        Ok(())
    }

    /// Reverse-mode sweep from a scalar loss node. Gradients are zeroed
    /// first; disconnected nodes keep `None` (read as zeros).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.forward_done {
            return Err(Error::BackwardBeforeForward(
                "backward called before forward".into(),
            ));
        }
        if self.nodes[loss].shape.iter().product::<usize>() != 1 {
            return Err(Error::ShapeMismatch {
                node: self.nodes[loss].name.clone(),
                detail: format!("loss must be scalar, got {:?}", self.nodes[loss].shape),
            });
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss] = Some(Tensor {
            shape: self.nodes[loss].shape.clone(),
            data: vec![1.0],
        });
        for id in (0..self.nodes.len()).rev() {
            if self.grads[id].is_none() {
                continue;
            }
            self.propagate(id)?;
        }
        Ok(())
    }

    fn accumulate_grad(&mut self, id: NodeId, delta: &[f64]) {
        let g = self.grads[id].get_or_insert_with(|| Tensor::zeros(&self.nodes[id].shape));
        for (gi, di) in g.data.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.values[id].as_ref().expect("forward populated values")
    }

    fn eval(&self, id: NodeId) -> Result<Tensor> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        Ok(match &node.op {
            OpKind::Input | OpKind::Param => unreachable!(),
            OpKind::MatMulNT => {
                let (x, w) = (self.val(ins[0]), self.val(ins[1]));
                let (n, k) = (x.shape[0], x.shape[1]);
                let m = w.shape[0];
                let mut out = vec![0.0; n * m];
                gemm(
                    n, k, m, 1.0, &x.data, k as isize, 1, &w.data, 1, k as isize, 0.0, &mut out,
                    m as isize, 1,
                );
                Tensor {
                    shape: node.shape.clone(),
                    data: out,
                }
            }
            OpKind::AddRowBroadcast => {
                let (x, b) = (self.val(ins[0]), self.val(ins[1]));
                let m = b.data.len();
                let mut out = x.data.clone();
                for (i, o) in out.iter_mut().enumerate() {
                    *o += b.data[i % m];
                }
                Tensor {
                    shape: node.shape.clone(),
                    data: out,
                }
            }
            OpKind::ExpandRows { rows } => {
                let b = self.val(ins[0]);
                let mut out = Vec::with_capacity(rows * b.data.len());
                for _ in 0..*rows {
                    out.extend_from_slice(&b.data);
                }
                Tensor {
                    shape: node.shape.clone(),
                    data: out,
                }
            }
            OpKind::Conv2d => conv2d_forward(self.val(ins[0]), self.val(ins[1])),
            OpKind::AddChannelBias => {
                let (x, b) = (self.val(ins[0]), self.val(ins[1]));
                let (n, c, h, w) = nchw(&x.shape);
                let plane = h * w;
                let mut out = x.data.clone();
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        for v in &mut out[base..base + plane] {
                            *v += b.data[ci];
                        }
                    }
                }
                Tensor {
                    shape: node.shape.clone(),
                    data: out,
                }
            }
            OpKind::MaxPool2 => {
                let x = self.val(ins[0]);
                let (n, c, h, w) = nchw(&x.shape);
                let (oh, ow) = (h / 2, w / 2);
                let mut out = vec![0.0; n * c * oh * ow];
                for ni in 0..n {
                    for ci in 0..c {
                        let ib = (ni * c + ci) * h * w;
                        let ob = (ni * c + ci) * oh * ow;
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        let v = x.data[ib + (2 * y + dy) * w + 2 * xx + dx];
                                        if v > best {
                                            best = v;
                                        }
                                    }
                                }
                                out[ob + y * ow + xx] = best;
                            }
                        }
                    }
                }
                Tensor {
                    shape: node.shape.clone(),
                    data: out,
                }
            }
            OpKind::UpsampleNearest2 => {
                let x = self.val(ins[0]);
                let (n, c, h, w) = nchw(&x.shape);
                let (oh, ow) = (h * 2, w * 2);
                let mut out = vec![0.0; n * c * oh * ow];
                for ni in 0..n {
                    for ci in 0..c {
                        let ib = (ni * c + ci) * h * w;
                        let ob = (ni * c + ci) * oh * ow;
                        for y in 0..oh {
                            for xx in 0..ow {
                                out[ob + y * ow + xx] = x.data[ib + (y / 2) * w + xx / 2];
                            }
                        }
                    }
                }
                Tensor {
                    shape: node.shape.clone(),
                    data: out,
                }
            }
            OpKind::ConcatChannels => {
                let (a, b) = (self.val(ins[0]), self.val(ins[1]));
                let (n, ca, h, w) = nchw(&a.shape);
                let cb = b.shape[1];
                let plane = h * w;
                let mut out = vec![0.0; n * (ca + cb) * plane];
                for ni in 0..n {
                    let oa = ni * (ca + cb) * plane;
                    out[oa..oa + ca * plane]
                        .copy_from_slice(&a.data[ni * ca * plane..(ni + 1) * ca * plane]);
                    out[oa + ca * plane..oa + (ca + cb) * plane]
                        .copy_from_slice(&b.data[ni * cb * plane..(ni + 1) * cb * plane]);
                }
                Tensor {
                    shape: node.shape.clone(),
                    data: out,
                }
            }
            OpKind::Relu => self.map_unary(ins[0], &node.shape, |v| v.max(0.0)),
            OpKind::Tanh => self.map_unary(ins[0], &node.shape, f64::tanh),
            OpKind::Exp => self.map_unary(ins[0], &node.shape, f64::exp),
            OpKind::Sqrt => self.map_unary(ins[0], &node.shape, f64::sqrt),
            OpKind::Square => self.map_unary(ins[0], &node.shape, |v| v * v),
            OpKind::Scale { c } => {
                let c = *c;
                self.map_unary(ins[0], &node.shape, |v| v * c)
            }
            OpKind::AddConst { c } => {
                let c = *c;
                self.map_unary(ins[0], &node.shape, |v| v + c)
            }
            OpKind::Clamp { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                self.map_unary(ins[0], &node.shape, |v| v.clamp(lo, hi))
            }
            OpKind::Add => self.map_binary(ins[0], ins[1], &node.shape, |a, b| a + b),
            OpKind::Sub => self.map_binary(ins[0], ins[1], &node.shape, |a, b| a - b),
            OpKind::Mul => self.map_binary(ins[0], ins[1], &node.shape, |a, b| a * b),
            OpKind::Min => self.map_binary(ins[0], ins[1], &node.shape, f64::min),
            OpKind::RowSoftmax | OpKind::RowLogSoftmax => {
                let x = self.val(ins[0]);
                let (n, m) = (x.shape[0], x.shape[1]);
                let log = matches!(node.op, OpKind::RowLogSoftmax);
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    let row = &x.data[i * m..(i + 1) * m];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for v in row {
                        z += (v - mx).exp();
                    }
                    let lz = z.ln();
                    for (j, v) in row.iter().enumerate() {
                        out[i * m + j] = if log { v - mx - lz } else { (v - mx - lz).exp() };
                    }
                }
                Tensor {
                    shape: node.shape.clone(),
                    data: out,
                }
            }
            OpKind::RowSum => {
                let x = self.val(ins[0]);
                let (n, m) = (x.shape[0], x.shape[1]);
                let out = (0..n)
                    .map(|i| x.data[i * m..(i + 1) * m].iter().sum())
                    .collect();
                Tensor {
                    shape: node.shape.clone(),
                    data: out,
                }
            }
            OpKind::SelectPerRow => {
                let (x, idx) = (self.val(ins[0]), self.val(ins[1]));
                let m = x.shape[1];
                let out = idx
                    .data
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| x.data[i * m + j as usize])
                    .collect();
                Tensor {
                    shape: node.shape.clone(),
                    data: out,
                }
            }
            OpKind::GatherPixels => {
                let (x, idx) = (self.val(ins[0]), self.val(ins[1]));
                let (_, c, h, w) = nchw(&x.shape);
                let plane = h * w;
                let mut out = vec![0.0; idx.data.len() * c];
                for (i, &p) in idx.data.iter().enumerate() {
                    let p = p as usize;
                    for ci in 0..c {
                        out[i * c + ci] = x.data[ci * plane + p];
                    }
                }
                Tensor {
                    shape: node.shape.clone(),
                    data: out,
                }
            }
            OpKind::SumAll => Tensor::scalar(self.val(ins[0]).data.iter().sum()),
            OpKind::MeanAll => {
                let x = self.val(ins[0]);
                Tensor::scalar(x.data.iter().sum::<f64>() / x.data.len() as f64)
            }
            OpKind::Reshape { shape } => Tensor {
                shape: shape.clone(),
                data: self.val(ins[0]).data.clone(),
            },
        })
    }

    fn map_unary(&self, x: NodeId, shape: &[usize], f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: self.val(x).data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn map_binary(
        &self,
        a: NodeId,
        b: NodeId,
        shape: &[usize],
        f: impl Fn(f64, f64) -> f64,
    ) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: self
                .val(a)
                .data
                .iter()
                .zip(&self.val(b).data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        }
    }

    fn propagate(&mut self, id: NodeId) -> Result<()> {
        let g = self.grads[id].clone().expect("caller checked");
        let node = self.nodes[id].clone();
        let ins = &node.inputs;
        match &node.op {
            OpKind::Input | OpKind::Param => {}
            OpKind::MatMulNT => {
                let (x, w) = (self.val(ins[0]).clone(), self.val(ins[1]).clone());
                let (n, k) = (x.shape[0], x.shape[1]);
                let m = w.shape[0];
                // dX = dY·W
                let mut dx = vec![0.0; n * k];
                gemm(
                    n, m, k, 1.0, &g.data, m as isize, 1, &w.data, k as isize, 1, 0.0, &mut dx,
                    k as isize, 1,
                );
                // dW = dYᵀ·X
                let mut dw = vec![0.0; m * k];
                gemm(
                    m, n, k, 1.0, &g.data, 1, m as isize, &x.data, k as isize, 1, 0.0, &mut dw,
                    k as isize, 1,
                );
                self.accumulate_grad(ins[0], &dx);
                self.accumulate_grad(ins[1], &dw);
            }
            OpKind::AddRowBroadcast => {
                let m = self.nodes[ins[1]].shape[0];
                let mut db = vec![0.0; m];
                for (i, v) in g.data.iter().enumerate() {
                    db[i % m] += v;
                }
                self.accumulate_grad(ins[0], &g.data);
                self.accumulate_grad(ins[1], &db);
            }
            OpKind::ExpandRows { rows } => {
                let m = self.nodes[ins[0]].shape[0];
                let mut db = vec![0.0; m];
                for r in 0..*rows {
                    for j in 0..m {
                        db[j] += g.data[r * m + j];
                    }
                }
                self.accumulate_grad(ins[0], &db);
            }
            OpKind::Conv2d => {
                let (x, w) = (self.val(ins[0]).clone(), self.val(ins[1]).clone());
                let (dx, dw) = conv2d_backward(&x, &w, &g);
                self.accumulate_grad(ins[0], &dx);
                self.accumulate_grad(ins[1], &dw);
            }
            OpKind::AddChannelBias => {
                let (n, c, h, w) = nchw(&self.nodes[ins[0]].shape);
                let plane = h * w;
                let mut db = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let base = (ni * c + ci) * plane;
                        db[ci] += g.data[base..base + plane].iter().sum::<f64>();
                    }
                }
                self.accumulate_grad(ins[0], &g.data);
                self.accumulate_grad(ins[1], &db);
            }
            OpKind::MaxPool2 => {
                let x = self.val(ins[0]).clone();
                let (n, c, h, w) = nchw(&x.shape);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; x.data.len()];
                for ni in 0..n {
                    for ci in 0..c {
                        let ib = (ni * c + ci) * h * w;
                        let ob = (ni * c + ci) * oh * ow;
                        for y in 0..oh {
                            for xx in 0..ow {
                                let mut best = f64::NEG_INFINITY;
                                let mut arg = 0;
                                for dy in 0..2 {
                                    for dx2 in 0..2 {
                                        let off = ib + (2 * y + dy) * w + 2 * xx + dx2;
                                        if x.data[off] > best {
                                            best = x.data[off];
                                            arg = off;
                                        }
                                    }
                                }
                                dx[arg] += g.data[ob + y * ow + xx];
                            }
                        }
                    }
                }
                self.accumulate_grad(ins[0], &dx);
            }
            OpKind::UpsampleNearest2 => {
                let (n, c, h, w) = nchw(&self.nodes[ins[0]].shape);
                let (oh, ow) = (h * 2, w * 2);
                let mut dx = vec![0.0; n * c * h * w];
                for ni in 0..n {
                    for ci in 0..c {
                        let ib = (ni * c + ci) * h * w;
                        let ob = (ni * c + ci) * oh * ow;
                        for y in 0..oh {
                            for xx in 0..ow {
                                dx[ib + (y / 2) * w + xx / 2] += g.data[ob + y * ow + xx];
                            }
                        }
                    }
                }
                self.accumulate_grad(ins[0], &dx);
            }
            OpKind::ConcatChannels => {
                let (n, ca, h, w) = nchw(&self.nodes[ins[0]].shape);
                let cb = self.nodes[ins[1]].shape[1];
                let plane = h * w;
                let mut da = vec![0.0; n * ca * plane];
                let mut db = vec![0.0; n * cb * plane];
                for ni in 0..n {
                    let oa = ni * (ca + cb) * plane;
                    da[ni * ca * plane..(ni + 1) * ca * plane]
                        .copy_from_slice(&g.data[oa..oa + ca * plane]);
                    db[ni * cb * plane..(ni + 1) * cb * plane]
                        .copy_from_slice(&g.data[oa + ca * plane..oa + (ca + cb) * plane]);
                }
                self.accumulate_grad(ins[0], &da);
                self.accumulate_grad(ins[1], &db);
            }
            OpKind::Relu => {
                let x = self.val(ins[0]);
                let dx: Vec<f64> = x
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate_grad(ins[0], &dx);
            }
            OpKind::Tanh => {
                let y = self.val(id);
                let dx: Vec<f64> = y
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| gv * (1.0 - v * v))
                    .collect();
                self.accumulate_grad(ins[0], &dx);
            }
            OpKind::Exp => {
                let y = self.val(id);
                let dx: Vec<f64> = y.data.iter().zip(&g.data).map(|(&v, &gv)| gv * v).collect();
                self.accumulate_grad(ins[0], &dx);
            }
            OpKind::Sqrt => {
                let y = self.val(id);
                let dx: Vec<f64> = y
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| gv * 0.5 / v)
                    .collect();
                self.accumulate_grad(ins[0], &dx);
            }
            OpKind::Square => {
                let x = self.val(ins[0]);
                let dx: Vec<f64> = x
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| gv * 2.0 * v)
                    .collect();
                self.accumulate_grad(ins[0], &dx);
            }
            OpKind::Scale { c } => {
                let dx: Vec<f64> = g.data.iter().map(|&gv| gv * c).collect();
                self.accumulate_grad(ins[0], &dx);
            }
            OpKind::AddConst { .. } => self.accumulate_grad(ins[0], &g.data),
            OpKind::Clamp { lo, hi } => {
                let x = self.val(ins[0]);
                let dx: Vec<f64> = x
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| if v >= *lo && v <= *hi { gv } else { 0.0 })
                    .collect();
                self.accumulate_grad(ins[0], &dx);
            }
            OpKind::Add => {
                self.accumulate_grad(ins[0], &g.data);
                self.accumulate_grad(ins[1], &g.data);
            }
            OpKind::Sub => {
                self.accumulate_grad(ins[0], &g.data);
                let neg: Vec<f64> = g.data.iter().map(|&v| -v).collect();
                self.accumulate_grad(ins[1], &neg);
            }
            OpKind::Mul => {
                let (a, b) = (self.val(ins[0]).clone(), self.val(ins[1]).clone());
                let da: Vec<f64> = b.data.iter().zip(&g.data).map(|(&v, &gv)| gv * v).collect();
                let db: Vec<f64> = a.data.iter().zip(&g.data).map(|(&v, &gv)| gv * v).collect();
                self.accumulate_grad(ins[0], &da);
                self.accumulate_grad(ins[1], &db);
            }
            OpKind::Min => {
                let (a, b) = (self.val(ins[0]).clone(), self.val(ins[1]).clone());
                let mut da = vec![0.0; a.data.len()];
                let mut db = vec![0.0; b.data.len()];
                for i in 0..a.data.len() {
                    if a.data[i] <= b.data[i] {
                        da[i] = g.data[i];
                    } else {
                        db[i] = g.data[i];
                    }
                }
                self.accumulate_grad(ins[0], &da);
                self.accumulate_grad(ins[1], &db);
            }
            OpKind::RowSoftmax => {
                let s = self.val(id).clone();
                let (n, m) = (s.shape[0], s.shape[1]);
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let srow = &s.data[i * m..(i + 1) * m];
                    let grow = &g.data[i * m..(i + 1) * m];
                    let dot: f64 = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                    for j in 0..m {
                        dx[i * m + j] = srow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate_grad(ins[0], &dx);
            }
            OpKind::RowLogSoftmax => {
                let ls = self.val(id).clone();
                let (n, m) = (ls.shape[0], ls.shape[1]);
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    let lrow = &ls.data[i * m..(i + 1) * m];
                    let grow = &g.data[i * m..(i + 1) * m];
                    let gsum: f64 = grow.iter().sum();
                    for j in 0..m {
                        dx[i * m + j] = grow[j] - lrow[j].exp() * gsum;
                    }
                }
                self.accumulate_grad(ins[0], &dx);
            }
            OpKind::RowSum => {
                let (n, m) = (self.nodes[ins[0]].shape[0], self.nodes[ins[0]].shape[1]);
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        dx[i * m + j] = g.data[i];
                    }
                }
                self.accumulate_grad(ins[0], &dx);
            }
            OpKind::SelectPerRow => {
                let idx = self.val(ins[1]).clone();
                let m = self.nodes[ins[0]].shape[1];
                let mut dx = vec![0.0; idx.data.len() * m];
                for (i, &j) in idx.data.iter().enumerate() {
                    dx[i * m + j as usize] = g.data[i];
                }
                self.accumulate_grad(ins[0], &dx);
            }
            OpKind::GatherPixels => {
                let idx = self.val(ins[1]).clone();
                let (_, c, h, w) = nchw(&self.nodes[ins[0]].shape);
                let plane = h * w;
                let mut dx = vec![0.0; c * plane];
                for (i, &p) in idx.data.iter().enumerate() {
                    let p = p as usize;
                    for ci in 0..c {
                        dx[ci * plane + p] += g.data[i * c + ci];
                    }
                }
                self.accumulate_grad(ins[0], &dx);
            }
            OpKind::SumAll => {
                let n = self.nodes[ins[0]].shape.iter().product();
                self.accumulate_grad(ins[0], &vec![g.data[0]; n]);
            }
            OpKind::MeanAll => {
                let n: usize = self.nodes[ins[0]].shape.iter().product();
                self.accumulate_grad(ins[0], &vec![g.data[0] / n as f64; n]);
            }
            OpKind::Reshape { .. } => self.accumulate_grad(ins[0], &g.data),
        }
        Ok(())
    }
}

fn op_tag(op: &OpKind) -> &'static str {
    match op {
        OpKind::Input => "input",
        OpKind::Param => "param",
        OpKind::MatMulNT => "matmul_nt",
        OpKind::AddRowBroadcast => "add_row_broadcast",
        OpKind::ExpandRows { .. } => "expand_rows",
        OpKind::Conv2d => "conv2d",
        OpKind::AddChannelBias => "add_channel_bias",
        OpKind::MaxPool2 => "maxpool2",
        OpKind::UpsampleNearest2 => "upsample_nearest2",
        OpKind::ConcatChannels => "concat_channels",
        OpKind::Relu => "relu",
        OpKind::Tanh => "tanh",
        OpKind::Exp => "exp",
        OpKind::Sqrt => "sqrt",
        OpKind::Square => "square",
        OpKind::Scale { .. } => "scale",
        OpKind::AddConst { .. } => "add_const",
        OpKind::Clamp { .. } => "clamp",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::Min => "min",
        OpKind::RowSoftmax => "row_softmax",
        OpKind::RowLogSoftmax => "row_log_softmax",
        OpKind::RowSum => "row_sum",
        OpKind::SelectPerRow => "select_per_row",
        OpKind::GatherPixels => "gather_pixels",
        OpKind::SumAll => "sum_all",
        OpKind::MeanAll => "mean_all",
        OpKind::Reshape { .. } => "reshape",
    }
}

fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Expands one sample into column-matrix form `[C·k·k, H·W]` for stride-1
/// same-padding convolution.
fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k - 1) / 2;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let base = row * hw;
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        cols[base + y * w..base + (y + 1) * w].fill(0.0);
                        continue;
                    }
                    let irow = ci * hw + iy as usize * w;
                    for x_out in 0..w {
                        let ix = x_out as isize + kx as isize - pad as isize;
                        cols[base + y * w + x_out] = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            x[irow + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of a column matrix back to image layout (adjoint of im2col).
fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize, x: &mut [f64]) {
    let pad = (k - 1) / 2;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let base = row * hw;
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = ci * hw + iy as usize * w;
                    for x_out in 0..w {
                        let ix = x_out as isize + kx as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[irow + ix as usize] += cols[base + y * w + x_out];
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, wt: &Tensor) -> Tensor {
    let (n, c, h, w) = nchw(&x.shape);
    let (f, _, k, _) = nchw(&wt.shape);
    let hw = h * w;
    let ckk = c * k * k;
    let mut out = vec![0.0; n * f * hw];
    let mut cols = vec![0.0; ckk * hw];
    for ni in 0..n {
        im2col(&x.data[ni * c * hw..(ni + 1) * c * hw], c, h, w, k, &mut cols);
        gemm(
            f,
            ckk,
            hw,
            1.0,
            &wt.data,
            ckk as isize,
            1,
            &cols,
            hw as isize,
            1,
            0.0,
            &mut out[ni * f * hw..(ni + 1) * f * hw],
            hw as isize,
            1,
        );
    }
    Tensor {
        shape: vec![n, f, h, w],
        data: out,
    }
}

fn conv2d_backward(x: &Tensor, wt: &Tensor, gout: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = nchw(&x.shape);
    let (f, _, k, _) = nchw(&wt.shape);
    let hw = h * w;
    let ckk = c * k * k;
    let mut dx = vec![0.0; x.data.len()];
    let mut dw = vec![0.0; wt.data.len()];
    let mut cols = vec![0.0; ckk * hw];
    let mut dcols = vec![0.0; ckk * hw];
    for ni in 0..n {
        let gslice = &gout.data[ni * f * hw..(ni + 1) * f * hw];
        im2col(&x.data[ni * c * hw..(ni + 1) * c * hw], c, h, w, k, &mut cols);
        // dW += dY · colsᵀ
        gemm(
            f, hw, ckk, 1.0, gslice, hw as isize, 1, &cols, 1, hw as isize, 1.0, &mut dw,
            ckk as isize, 1,
        );
        // dcols = Wᵀ · dY
        gemm(
            ckk,
            f,
            hw,
            1.0,
            &wt.data,
            1,
            ckk as isize,
            gslice,
            hw as isize,
            1,
            0.0,
            &mut dcols,
            hw as isize,
            1,
        );
        col2im(&dcols, c, h, w, k, &mut dx[ni * c * hw..(ni + 1) * c * hw]);
    }
    (dx, dw)
}

// ---- optimizer --------------------------------------------------------

/// Adam state: one pair of moment tensors per graph parameter, in
/// registration order. β₁=0.9, β₂=0.999, ε=1e-8.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn for_graph(graph: &Graph) -> AdamState {
        let m = graph
            .param_ids()
            .iter()
            .map(|&id| Tensor::zeros(graph.shape(id)))
            .collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Global gradient norm over all parameters.
pub fn global_grad_norm(graph: &Graph) -> f64 {
    let mut sq = 0.0;
    for &id in graph.param_ids() {
        sq += graph.grad(id).data.iter().map(|g| g * g).sum::<f64>();
    }
    sq.sqrt()
}

/// One bias-corrected Adam step over every parameter; gradients exceeding
/// `max_grad_norm` (global norm) are rescaled by `max/norm` first.
pub fn adam_step(
    graph: &mut Graph,
    state: &mut AdamState,
    lr: f64,
    max_grad_norm: Option<f64>,
) -> Result<()> {
    let mut scale = 1.0;
    if let Some(max) = max_grad_norm {
        let norm = global_grad_norm(graph);
        if !norm.is_finite() {
            return Err(Error::NonFinite("global gradient norm".into()));
        }
        if norm > max {
            scale = max / norm;
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let ids: Vec<NodeId> = graph.param_ids().to_vec();
    for (pi, &id) in ids.iter().enumerate() {
        let grad = graph.grad(id);
        if grad.data.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {}",
                graph.param_name(id)
            )));
        }
        let m = &mut state.m[pi];
        let v = &mut state.v[pi];
        let p = graph.param_value_mut(id);
        for i in 0..p.data.len() {
            let g = grad.data[i] * scale;
            m.data[i] = state.beta1 * m.data[i] + (1.0 - state.beta1) * g;
            v.data[i] = state.beta2 * v.data[i] + (1.0 - state.beta2) * g * g;
            let mh = m.data[i] / bc1;
            let vh = v.data[i] / bc2;
            p.data[i] -= lr * mh / (vh.sqrt() + state.eps);
        }
    }
    Ok(())
}

// ---- checkpoints -------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"TAXCKPT1";

#[derive(Serialize, Deserialize)]
struct CkptManifest {
    version: u32,
    arch: String,
    params: Vec<CkptParam>,
}

#[derive(Serialize, Deserialize)]
struct CkptParam {
    name: String,
    shape: Vec<usize>,
}

/// Serializes all graph parameters: magic, JSON manifest (names, shapes,
/// architecture descriptor), then little-endian f64 data in order.
pub fn checkpoint_bytes(arch: &str, graph: &Graph) -> Vec<u8> {
    let manifest = CkptManifest {
        version: 1,
        arch: arch.into(),
        params: graph
            .param_ids()
            .iter()
            .map(|&id| CkptParam {
                name: graph.param_name(id).into(),
                shape: graph.shape(id).to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &id in graph.param_ids() {
        for v in &graph.param_value(id).data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, arch: &str, graph: &Graph) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&checkpoint_bytes(arch, graph))?;
    Ok(())
}

/// Loads parameters into a graph with matching names/shapes/architecture.
pub fn load_checkpoint(path: &Path, expected_arch: &str, graph: &mut Graph) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    load_checkpoint_bytes(&bytes, expected_arch, graph)
}

pub fn load_checkpoint_bytes(bytes: &[u8], expected_arch: &str, graph: &mut Graph) -> Result<()> {
    if bytes.len() < 12 || &bytes[..8] != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let json_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let manifest: CkptManifest = serde_json::from_slice(
        bytes
            .get(12..12 + json_len)
            .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?,
    )?;
    if manifest.version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            manifest.version
        )));
    }
    if manifest.arch != expected_arch {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint '{}', expected '{}'",
            manifest.arch, expected_arch
        )));
    }
    let ids: Vec<NodeId> = graph.param_ids().to_vec();
    if manifest.params.len() != ids.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: {} vs {}",
            manifest.params.len(),
            ids.len()
        )));
    }
    let mut offset = 12 + json_len;
    for (meta, &id) in manifest.params.iter().zip(&ids) {
        if meta.name != graph.param_name(id) || meta.shape != graph.shape(id) {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch at '{}'",
                meta.name
            )));
        }
        let n: usize = meta.shape.iter().product();
        let end = offset + n * 8;
        let chunk = bytes
            .get(offset..end)
            .ok_or_else(|| Error::Checkpoint("truncated data".into()))?;
        let p = graph.param_value_mut(id);
        for (i, window) in chunk.chunks_exact(8).enumerate() {
            p.data[i] = f64::from_le_bytes(window.try_into().unwrap());
        }
        offset = end;
    }
    Ok(())
}
