//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is built once from leaf inputs/constants and operation nodes,
//! then evaluated any number of times with [`Graph::forward`]. Node indices
//! are a topological order: every node only refers to earlier nodes.
//!
//! Two reverse modes exist:
//!
//! * [`Graph::grad`] computes gradient tensors directly from the cached
//!   forward values.
//! * [`Graph::grad_graph`] appends nodes that *compute* the gradient, so the
//!   gradient itself can be fed into further operations and differentiated
//!   again. Relu masks and maxpool argmax indices recorded at forward time
//!   are referenced by the gradient nodes and treated as constants when
//!   differentiating a second time.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input { name: String },
    Constant,
    /// Inputs: image `C x H x W`, weight `O x C x K x K`, optional bias `O`.
    Conv2d { stride: usize, pad: usize },
    /// Gradient of `Conv2d` w.r.t. its image. Inputs: output grad, weight.
    ConvTransposeInput { stride: usize, pad: usize },
    Relu,
    /// Multiplies by the relu mask recorded at `source`.
    ReluMask { source: NodeId },
    MaxPool { size: usize, stride: usize },
    /// Routes values to the argmax positions recorded at `source`.
    MaxPoolScatter { source: NodeId },
    /// Global average pool `C x H x W -> C`.
    Gap,
    GapBroadcast,
    /// Inputs: vector `I`, weight `O x I`, optional bias `O`.
    Linear,
    /// Inputs: vector `O`, weight `O x I`; computes `W^T v`.
    LinearTranspose,
    Add,
    Mul,
    Scale(f64),
    Sum,
    /// Broadcasts a scalar to the node's shape.
    Fill,
    /// Inputs: tensor, scalar. Division by an exact zero yields zeros.
    DivByScalar,
    UpsampleNearest { factor: usize },
    BlockSum { factor: usize },
    SoftmaxCrossEntropy { target: usize },
    /// Inputs: logits, scalar upstream gradient.
    SoftmaxCrossEntropyGrad { target: usize },
    Pick { index: usize },
    OneHot { index: usize },
    /// Inputs: weights `C`, maps `C x H x W`; computes `sum_c w_c A_c`.
    ChannelWeightedSum,
    /// Inputs: map `H x W`, maps `C x H x W`; computes `<g, A_c>` per channel.
    ChannelDot,
    /// Inputs: weights `C`, map `H x W`; computes `w_c g`.
    ChannelOuter,
    /// Inputs: image `C x H x W`, patch `C x h x w`.
    Paste { top: usize, left: usize },
    Crop {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    ZeroRect {
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    /// Identity in the forward pass, zero gradient.
    StopGradient,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant => "constant",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTransposeInput { .. } => "conv2d-input-grad",
            Op::Relu => "relu",
            Op::ReluMask { .. } => "relu-mask",
            Op::MaxPool { .. } => "maxpool",
            Op::MaxPoolScatter { .. } => "maxpool-scatter",
            Op::Gap => "gap",
            Op::GapBroadcast => "gap-broadcast",
            Op::Linear => "linear",
            Op::LinearTranspose => "linear-transpose",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Scale(_) => "scalar-mul",
            Op::Sum => "sum",
            Op::Fill => "fill",
            Op::DivByScalar => "div-by-scalar",
            Op::UpsampleNearest { .. } => "upsample-nn",
            Op::BlockSum { .. } => "block-sum",
            Op::SoftmaxCrossEntropy { .. } => "softmax-ce",
            Op::SoftmaxCrossEntropyGrad { .. } => "softmax-ce-grad",
            Op::Pick { .. } => "pick",
            Op::OneHot { .. } => "one-hot",
            Op::ChannelWeightedSum => "channel-weighted-sum",
            Op::ChannelDot => "channel-dot",
            Op::ChannelOuter => "channel-outer",
            Op::Paste { .. } => "paste",
            Op::Crop { .. } => "crop",
            Op::ZeroRect { .. } => "zero-rect",
            Op::StopGradient => "stop-gradient",
        }
    }
}

#[derive(Clone, Debug, Default)]
enum Selection {
    #[default]
    None,
    Mask(Vec<bool>),
    Argmax(Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    value: Option<Tensor<T>>,
    selection: Selection,
}

/// Result of [`Graph::backward`].
#[derive(Clone, Debug)]
pub enum Gradient<T: Scalar> {
    Value(Tensor<T>),
    Graph(NodeId),
}

#[derive(Clone, Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    inputs: BTreeMap<String, NodeId>,
    /// Number of leading nodes holding values from the latest forward pass.
    evaluated: usize,
}

fn plane_dims(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    let planes = shape[..r - 2].iter().product();
    (planes, shape[r - 2], shape[r - 1])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            inputs: BTreeMap::new(),
            evaluated: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn input_id(&self, name: &str) -> Result<NodeId> {
        self.inputs
            .get(name)
            .copied()
            .ok_or_else(|| Error::NotAnInput(name.to_string()))
    }

    /// Cached value of a node from the latest forward pass.
    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        if id.0 >= self.evaluated {
            return Err(Error::NotEvaluated(id.0));
        }
        self.nodes[id.0]
            .value
            .as_ref()
            .ok_or(Error::NotEvaluated(id.0))
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        self.nodes[id.0]
            .value
            .as_ref()
            .expect("input evaluated before its consumer")
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value: None,
            selection: Selection::None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, detail: String) -> Error {
        Error::ShapeMismatch {
            node: self.nodes.len(),
            op,
            detail,
        }
    }

    // ---- builders ----------------------------------------------------

    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId> {
        if self.inputs.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate graph input `{name}`"
            )));
        }
        let id = self.push(
            Op::Input {
                name: name.to_string(),
            },
            vec![],
            shape.to_vec(),
        );
        self.inputs.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.push(Op::Constant, vec![], value.shape().to_vec());
        self.nodes[id.0].value = Some(value);
        if self.evaluated == id.0 {
            self.evaluated += 1;
        }
        id
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(self.mismatch("conv2d", format!("image {xs:?} with weight {ws:?}")));
        }
        if stride == 0 || xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[3] {
            return Err(self.mismatch(
                "conv2d",
                format!("kernel {} stride {stride} pad {pad} on {xs:?}", ws[2]),
            ));
        }
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(self.mismatch(
                    "conv2d",
                    format!("bias {:?} for {} filters", self.shape(b), ws[0]),
                ));
            }
            inputs.push(b);
        }
        let geom = ConvGeometry {
            channels: xs[0],
            height: xs[1],
            width: xs[2],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        let shape = vec![ws[0], geom.out_height(), geom.out_width()];
        Ok(self.push(Op::Conv2d { stride, pad }, inputs, shape))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu, vec![x], shape)
    }

    pub fn max_pool(&mut self, x: NodeId, size: usize, stride: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || size == 0 || stride == 0 || xs[1] < size || xs[2] < size {
            return Err(self.mismatch("maxpool", format!("window {size} on {xs:?}")));
        }
        let shape = vec![xs[0], (xs[1] - size) / stride + 1, (xs[2] - size) / stride + 1];
        Ok(self.push(Op::MaxPool { size, stride }, vec![x], shape))
    }

    pub fn gap(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(self.mismatch("gap", format!("expected C x H x W, got {xs:?}")));
        }
        Ok(self.push(Op::Gap, vec![x], vec![xs[0]]))
    }

    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] {
            return Err(self.mismatch("linear", format!("input {xs:?} with weight {ws:?}")));
        }
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(self.mismatch(
                    "linear",
                    format!("bias {:?} for {} outputs", self.shape(b), ws[0]),
                ));
            }
            inputs.push(b);
        }
        Ok(self.push(Op::Linear, inputs, vec![ws[0]]))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("add", a, b)?;
        Ok(self.push(Op::Add, vec![a, b], shape))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.same_shape("mul", a, b)?;
        Ok(self.push(Op::Mul, vec![a, b], shape))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale(factor), vec![x], shape)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x], vec![])
    }

    pub fn div_by_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].shape.iter().product::<usize>() != 1 {
            return Err(self.mismatch(
                "div-by-scalar",
                format!("divisor has shape {:?}", self.shape(s)),
            ));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::DivByScalar, vec![x, s], shape))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let mut shape = self.shape(x).to_vec();
        if shape.len() < 2 || factor == 0 {
            return Err(self.mismatch("upsample-nn", format!("factor {factor} on {shape:?}")));
        }
        let r = shape.len();
        shape[r - 2] *= factor;
        shape[r - 1] *= factor;
        Ok(self.push(Op::UpsampleNearest { factor }, vec![x], shape))
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let ls = self.shape(logits);
        if ls.len() != 1 || target >= ls[0] {
            return Err(self.mismatch(
                "softmax-ce",
                format!("target {target} for logits {ls:?}"),
            ));
        }
        Ok(self.push(Op::SoftmaxCrossEntropy { target }, vec![logits], vec![]))
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 1 || index >= xs[0] {
            return Err(self.mismatch("pick", format!("index {index} in {xs:?}")));
        }
        Ok(self.push(Op::Pick { index }, vec![x], vec![]))
    }

    pub fn channel_weighted_sum(&mut self, weights: NodeId, maps: NodeId) -> Result<NodeId> {
        let ws = self.shape(weights).to_vec();
        let ms = self.shape(maps).to_vec();
        if ws.len() != 1 || ms.len() != 3 || ws[0] != ms[0] {
            return Err(self.mismatch(
                "channel-weighted-sum",
                format!("weights {ws:?} with maps {ms:?}"),
            ));
        }
        Ok(self.push(Op::ChannelWeightedSum, vec![weights, maps], vec![ms[1], ms[2]]))
    }

    pub fn paste(&mut self, image: NodeId, patch: NodeId, top: usize, left: usize) -> Result<NodeId> {
        let is = self.shape(image).to_vec();
        let ps = self.shape(patch).to_vec();
        if is.len() != 3
            || ps.len() != 3
            || is[0] != ps[0]
            || top + ps[1] > is[1]
            || left + ps[2] > is[2]
        {
            return Err(self.mismatch(
                "paste",
                format!("patch {ps:?} at ({top}, {left}) into {is:?}"),
            ));
        }
        Ok(self.push(Op::Paste { top, left }, vec![image, patch], is))
    }

    pub fn crop(
        &mut self,
        x: NodeId,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    ) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let r = xs.len();
        if r < 2 || top + height > xs[r - 2] || left + width > xs[r - 1] {
            return Err(self.mismatch(
                "crop",
                format!("{height}x{width} at ({top}, {left}) from {xs:?}"),
            ));
        }
        let mut shape = xs;
        shape[r - 2] = height;
        shape[r - 1] = width;
        Ok(self.push(
            Op::Crop {
                top,
                left,
                height,
                width,
            },
            vec![x],
            shape,
        ))
    }

    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::StopGradient, vec![x], shape)
    }

    // ---- evaluation --------------------------------------------------

    /// Binds inputs and evaluates every node, caching values and selection
    /// patterns for later differentiation.
    pub fn forward(&mut self, bindings: &[(&str, &Tensor<T>)]) -> Result<()> {
        self.evaluated = 0;
        for (name, value) in bindings {
            let id = self.input_id(name)?;
            if value.shape() != self.nodes[id.0].shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    node: id.0,
                    op: "input",
                    detail: format!(
                        "`{name}` declared {:?}, bound {:?}",
                        self.nodes[id.0].shape,
                        value.shape()
                    ),
                });
            }
        }
        for name in self.inputs.keys() {
            if !bindings.iter().any(|(n, _)| n == name) {
                return Err(Error::UnboundInput(name.clone()));
            }
        }
        for (name, value) in bindings {
            let id = self.inputs[*name];
            self.nodes[id.0].value = Some((*value).clone());
        }
        self.evaluate_from(0)
    }

    /// Convenience: [`forward`](Self::forward) then clone one node's value.
    pub fn eval(&mut self, bindings: &[(&str, &Tensor<T>)], output: NodeId) -> Result<Tensor<T>> {
        self.forward(bindings)?;
        Ok(self.value(output)?.clone())
    }

    fn evaluate_from(&mut self, start: usize) -> Result<()> {
        for i in start..self.nodes.len() {
            if !matches!(self.nodes[i].op, Op::Input { .. } | Op::Constant) {
                let (value, selection) = self.compute(i);
                debug_assert_eq!(value.shape(), self.nodes[i].shape.as_slice());
                self.nodes[i].value = Some(value);
                self.nodes[i].selection = selection;
            }
            self.evaluated = i + 1;
        }
        Ok(())
    }

    fn mask_of(&self, id: NodeId) -> &[bool] {
        match &self.nodes[id.0].selection {
            Selection::Mask(m) => m,
            _ => panic!("node {} carries no relu mask", id.0),
        }
    }

    fn argmax_of(&self, id: NodeId) -> &[usize] {
        match &self.nodes[id.0].selection {
            Selection::Argmax(a) => a,
            _ => panic!("node {} carries no argmax", id.0),
        }
    }

    fn conv_geometry(&self, image_shape: &[usize], weight: NodeId, stride: usize, pad: usize) -> ConvGeometry {
        let ws = self.shape(weight);
        ConvGeometry {
            channels: image_shape[0],
            height: image_shape[1],
            width: image_shape[2],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            pad,
        }
    }

    fn compute(&self, i: usize) -> (Tensor<T>, Selection) {
        let node = &self.nodes[i];
        let shape = node.shape.clone();
        let inp = |k: usize| self.val(node.inputs[k]);
        let plain = |data: Vec<T>| (Tensor::from_parts(shape.clone(), data), Selection::None);
        match &node.op {
            Op::Input { .. } | Op::Constant => unreachable!("leaves are not computed"),
            Op::Conv2d { stride, pad } => {
                let x = inp(0);
                let g = self.conv_geometry(x.shape(), node.inputs[1], *stride, *pad);
                let bias = node.inputs.get(2).map(|&b| self.val(b).data());
                plain(kernels::conv2d(x.data(), inp(1).data(), bias, &g))
            }
            Op::ConvTransposeInput { stride, pad } => {
                let g = self.conv_geometry(&shape, node.inputs[1], *stride, *pad);
                plain(kernels::conv2d_input_grad(inp(0).data(), inp(1).data(), &g))
            }
            Op::Relu => {
                let x = inp(0).data();
                // NaN passes through so divergence stays visible downstream
                let mask: Vec<bool> = x.iter().map(|&v| v > T::zero() || v.is_nan()).collect();
                let data = x
                    .iter()
                    .zip(&mask)
                    .map(|(&v, &m)| if m { v } else { T::zero() })
                    .collect();
                (Tensor::from_parts(shape, data), Selection::Mask(mask))
            }
            Op::ReluMask { source } => {
                let mask = self.mask_of(*source);
                plain(apply_mask(inp(0).data(), mask))
            }
            Op::MaxPool { size, stride } => {
                let x = inp(0);
                let s = x.shape();
                let (data, arg) = kernels::maxpool(x.data(), s[0], s[1], s[2], *size, *stride);
                (Tensor::from_parts(shape, data), Selection::Argmax(arg))
            }
            Op::MaxPoolScatter { source } => {
                let arg = self.argmax_of(*source);
                plain(scatter(inp(0).data(), arg, shape.iter().product()))
            }
            Op::Gap => {
                let x = inp(0);
                let s = x.shape();
                plain(gap(x.data(), s[0], s[1] * s[2]))
            }
            Op::GapBroadcast => {
                let hw = shape[1] * shape[2];
                plain(gap_broadcast(inp(0).data(), hw))
            }
            Op::Linear => {
                let ws = self.shape(node.inputs[1]);
                let (o, n) = (ws[0], ws[1]);
                let mut out = match node.inputs.get(2) {
                    Some(&b) => self.val(b).data().to_vec(),
                    None => vec![T::zero(); o],
                };
                let acc = node.inputs.len() == 3;
                kernels::gemm(o, n, 1, inp(1).data(), false, inp(0).data(), false, &mut out, acc);
                plain(out)
            }
            Op::LinearTranspose => {
                let ws = self.shape(node.inputs[1]);
                plain(linear_transpose(inp(0).data(), inp(1).data(), ws[0], ws[1]))
            }
            Op::Add => plain(
                inp(0)
                    .data()
                    .iter()
                    .zip(inp(1).data())
                    .map(|(&a, &b)| a + b)
                    .collect(),
            ),
            Op::Mul => plain(
                inp(0)
                    .data()
                    .iter()
                    .zip(inp(1).data())
                    .map(|(&a, &b)| a * b)
                    .collect(),
            ),
            Op::Scale(f) => {
                let f = T::from_f64(*f);
                plain(inp(0).data().iter().map(|&v| v * f).collect())
            }
            Op::Sum => plain(vec![inp(0).sum()]),
            Op::Fill => plain(vec![inp(0).item(); shape.iter().product()]),
            Op::DivByScalar => {
                let s = inp(1).item();
                plain(div_scalar(inp(0).data(), s))
            }
            Op::UpsampleNearest { factor } => {
                let (p, h, w) = plane_dims(inp(0).shape());
                plain(kernels::upsample_nearest(inp(0).data(), p, h, w, *factor))
            }
            Op::BlockSum { factor } => {
                let (p, h, w) = plane_dims(&shape);
                plain(kernels::block_sum(inp(0).data(), p, h, w, *factor))
            }
            Op::SoftmaxCrossEntropy { target } => {
                plain(vec![kernels::cross_entropy(inp(0).data(), *target)])
            }
            Op::SoftmaxCrossEntropyGrad { target } => {
                let g = inp(1).item();
                let mut p = kernels::softmax(inp(0).data());
                p[*target] = p[*target] - T::one();
                plain(p.into_iter().map(|v| v * g).collect())
            }
            Op::Pick { index } => plain(vec![inp(0).data()[*index]]),
            Op::OneHot { index } => {
                let mut out = vec![T::zero(); shape[0]];
                out[*index] = inp(0).item();
                plain(out)
            }
            Op::ChannelWeightedSum => {
                let ms = inp(1).shape();
                plain(channel_weighted_sum(inp(0).data(), inp(1).data(), ms[0], ms[1] * ms[2]))
            }
            Op::ChannelDot => {
                let ms = inp(1).shape();
                plain(channel_dot(inp(0).data(), inp(1).data(), ms[0], ms[1] * ms[2]))
            }
            Op::ChannelOuter => plain(channel_outer(inp(0).data(), inp(1).data())),
            Op::Paste { top, left } => {
                let mut out = inp(0).clone();
                paste_into(&mut out, inp(1), *top, *left);
                (out, Selection::None)
            }
            Op::Crop {
                top,
                left,
                height,
                width,
            } => plain(crop(inp(0), *top, *left, *height, *width)),
            Op::ZeroRect {
                top,
                left,
                height,
                width,
            } => {
                let mut out = inp(0).clone();
                fill_rect(&mut out, *top, *left, *height, *width, T::zero());
                (out, Selection::None)
            }
            Op::StopGradient => (inp(0).clone(), Selection::None),
        }
    }

    /// Hash of every relu mask and maxpool argmax from the latest forward
    /// pass. Two evaluations with equal fingerprints lie in the same linear
    /// region of the piecewise-linear parts of the graph.
    pub fn selection_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes[..self.evaluated] {
            match &node.selection {
                Selection::None => {}
                Selection::Mask(m) => m.hash(&mut h),
                Selection::Argmax(a) => a.hash(&mut h),
            }
        }
        h.finish()
    }

    // ---- differentiation ---------------------------------------------

    /// Marks nodes lying on a path from any `wrt` node to `output`.
    fn relevant(&self, output: NodeId, wrt: &[NodeId]) -> Vec<bool> {
        let n = output.0 + 1;
        let mut depends = vec![false; n];
        for w in wrt {
            if w.0 < n {
                depends[w.0] = true;
            }
        }
        for i in 0..n {
            if !depends[i]
                && !matches!(self.nodes[i].op, Op::StopGradient)
                && self.nodes[i].inputs.iter().any(|j| depends[j.0])
            {
                depends[i] = true;
            }
        }
        let mut reach = vec![false; n];
        reach[output.0] = true;
        for i in (0..n).rev() {
            if reach[i] && depends[i] {
                for j in &self.nodes[i].inputs {
                    reach[j.0] = true;
                }
            }
        }
        depends.iter().zip(&reach).map(|(&d, &r)| d && r).collect()
    }

    fn check_scalar(&self, output: NodeId) -> Result<()> {
        let shape = &self.nodes[output.0].shape;
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput {
                node: output.0,
                shape: shape.clone(),
            });
        }
        Ok(())
    }

    /// Gradients of a scalar `output` w.r.t. each node in `wrt`, computed
    /// from the cached forward pass.
    pub fn grad(&self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor<T>>> {
        self.check_scalar(output)?;
        if output.0 >= self.evaluated {
            return Err(Error::NotEvaluated(output.0));
        }
        let rel = self.relevant(output, wrt);
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        let mut found: Vec<Option<Tensor<T>>> = vec![None; wrt.len()];
        grads[output.0] = Some(Tensor::full(self.shape(output), T::one()));
        for i in (0..=output.0).rev() {
            if !rel[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (k, w) in wrt.iter().enumerate() {
                if w.0 == i {
                    found[k] = Some(g.clone());
                }
            }
            let needs: Vec<bool> = self.nodes[i].inputs.iter().map(|j| rel[j.0]).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let vjps = self.vjp(i, &g, &needs);
            for (j, gj) in self.nodes[i].inputs.clone().into_iter().zip(vjps) {
                if let Some(gj) = gj {
                    match &mut grads[j.0] {
                        Some(acc) => acc.add_assign(&gj),
                        slot => *slot = Some(gj),
                    }
                }
            }
        }
        Ok(found
            .into_iter()
            .zip(wrt)
            .map(|(g, w)| g.unwrap_or_else(|| Tensor::zeros(self.shape(*w))))
            .collect())
    }

    /// Numeric vector-Jacobian products for each needed input of node `i`.
    fn vjp(&self, i: usize, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        let inp = |k: usize| self.val(ins[k]);
        let shp = |k: usize| self.shape(ins[k]).to_vec();
        let t = |k: usize, data: Vec<T>| Tensor::from_parts(shp(k), data);
        let mut out: Vec<Option<Tensor<T>>> = vec![None; ins.len()];
        let want = |k: usize| needs.get(k).copied().unwrap_or(false);
        let gd = g.data();
        match &node.op {
            Op::Input { .. } | Op::Constant | Op::StopGradient => {}
            Op::Conv2d { stride, pad } => {
                let x = inp(0);
                let geom = self.conv_geometry(x.shape(), ins[1], *stride, *pad);
                if want(0) {
                    out[0] = Some(t(0, kernels::conv2d_input_grad(gd, inp(1).data(), &geom)));
                }
                if want(1) {
                    out[1] = Some(t(1, kernels::conv2d_weight_grad(x.data(), gd, &geom)));
                }
                if want(2) {
                    out[2] = Some(t(2, kernels::conv2d_bias_grad(gd, geom.out_channels)));
                }
            }
            Op::ConvTransposeInput { stride, pad } => {
                // forward: y = conv^T(gy; w), image-shaped.
                let geom = self.conv_geometry(&node.shape, ins[1], *stride, *pad);
                if want(0) {
                    out[0] = Some(t(0, kernels::conv2d(gd, inp(1).data(), None, &geom)));
                }
                if want(1) {
                    out[1] = Some(t(1, kernels::conv2d_weight_grad(gd, inp(0).data(), &geom)));
                }
            }
            Op::Relu => out[0] = Some(t(0, apply_mask(gd, self.mask_of(NodeId(i))))),
            Op::ReluMask { source } => out[0] = Some(t(0, apply_mask(gd, self.mask_of(*source)))),
            Op::MaxPool { .. } => {
                let n = shp(0).iter().product();
                out[0] = Some(t(0, scatter(gd, self.argmax_of(NodeId(i)), n)));
            }
            Op::MaxPoolScatter { source } => {
                let arg = self.argmax_of(*source);
                out[0] = Some(t(0, arg.iter().map(|&a| gd[a]).collect()));
            }
            Op::Gap => {
                let s = shp(0);
                out[0] = Some(t(0, gap_broadcast(gd, s[1] * s[2])));
            }
            Op::GapBroadcast => {
                let s = &node.shape;
                out[0] = Some(t(0, gap(gd, s[0], s[1] * s[2])));
            }
            Op::Linear => {
                let ws = shp(1);
                let (o, n) = (ws[0], ws[1]);
                if want(0) {
                    out[0] = Some(t(0, linear_transpose(gd, inp(1).data(), o, n)));
                }
                if want(1) {
                    out[1] = Some(t(1, outer(gd, inp(0).data())));
                }
                if want(2) {
                    out[2] = Some(g.clone());
                }
            }
            Op::LinearTranspose => {
                // forward: y = W^T v with v = input 0.
                let ws = shp(1);
                let (o, n) = (ws[0], ws[1]);
                if want(0) {
                    let mut dv = vec![T::zero(); o];
                    kernels::gemm(o, n, 1, inp(1).data(), false, gd, false, &mut dv, false);
                    out[0] = Some(t(0, dv));
                }
                if want(1) {
                    out[1] = Some(t(1, outer(inp(0).data(), gd)));
                }
            }
            Op::Add => {
                for (k, slot) in out.iter_mut().enumerate() {
                    if want(k) {
                        *slot = Some(g.clone());
                    }
                }
            }
            Op::Mul => {
                if want(0) {
                    out[0] = Some(g.zip_map(inp(1), |a, b| a * b));
                }
                if want(1) {
                    out[1] = Some(g.zip_map(inp(0), |a, b| a * b));
                }
            }
            Op::Scale(f) => {
                let f = T::from_f64(*f);
                out[0] = Some(g.map(|v| v * f));
            }
            Op::Sum => out[0] = Some(Tensor::full(&shp(0), g.item())),
            Op::Fill => out[0] = Some(Tensor::from_parts(vec![], vec![g.sum()])),
            Op::DivByScalar => {
                let s = inp(1).item();
                if want(0) {
                    out[0] = Some(t(0, div_scalar(gd, s)));
                }
                if want(1) {
                    let y = self.val(NodeId(i));
                    let dot: f64 = gd
                        .iter()
                        .zip(y.data())
                        .map(|(a, b)| a.as_f64() * b.as_f64())
                        .sum();
                    let ds = if s == T::zero() {
                        T::zero()
                    } else {
                        -T::from_f64(dot) / s
                    };
                    out[1] = Some(t(1, vec![ds]));
                }
            }
            Op::UpsampleNearest { factor } => {
                let (p, h, w) = plane_dims(&shp(0));
                out[0] = Some(t(0, kernels::block_sum(gd, p, h, w, *factor)));
            }
            Op::BlockSum { factor } => {
                let (p, h, w) = plane_dims(&node.shape);
                out[0] = Some(t(0, kernels::upsample_nearest(gd, p, h, w, *factor)));
            }
            Op::SoftmaxCrossEntropy { target } => {
                let gv = g.item();
                let mut p = kernels::softmax(inp(0).data());
                p[*target] = p[*target] - T::one();
                out[0] = Some(t(0, p.into_iter().map(|v| v * gv).collect()));
            }
            Op::SoftmaxCrossEntropyGrad { target } => {
                let p = kernels::softmax(inp(0).data());
                if want(0) {
                    let upstream = inp(1).item();
                    let pu: T = p.iter().zip(gd).map(|(&a, &b)| a * b).sum();
                    out[0] = Some(t(
                        0,
                        p.iter()
                            .zip(gd)
                            .map(|(&pk, &uk)| upstream * pk * (uk - pu))
                            .collect(),
                    ));
                }
                if want(1) {
                    let mut s: T = p.iter().zip(gd).map(|(&a, &b)| a * b).sum();
                    s = s - gd[*target];
                    out[1] = Some(t(1, vec![s]));
                }
            }
            Op::Pick { index } => {
                let mut d = vec![T::zero(); shp(0)[0]];
                d[*index] = g.item();
                out[0] = Some(t(0, d));
            }
            Op::OneHot { index } => out[0] = Some(t(0, vec![gd[*index]])),
            Op::ChannelWeightedSum => {
                let ms = shp(1);
                let (c, hw) = (ms[0], ms[1] * ms[2]);
                if want(0) {
                    out[0] = Some(t(0, channel_dot(gd, inp(1).data(), c, hw)));
                }
                if want(1) {
                    out[1] = Some(t(1, channel_outer(inp(0).data(), gd)));
                }
            }
            Op::ChannelDot => {
                let ms = shp(1);
                let (c, hw) = (ms[0], ms[1] * ms[2]);
                if want(0) {
                    out[0] = Some(t(0, channel_weighted_sum(gd, inp(1).data(), c, hw)));
                }
                if want(1) {
                    out[1] = Some(t(1, channel_outer(gd, inp(0).data())));
                }
            }
            Op::ChannelOuter => {
                let c = shp(0)[0];
                let hw = inp(1).len();
                if want(0) {
                    out[0] = Some(t(0, channel_dot(inp(1).data(), gd, c, hw)));
                }
                if want(1) {
                    out[1] = Some(t(1, channel_weighted_sum(inp(0).data(), gd, c, hw)));
                }
            }
            Op::Paste { top, left } => {
                let ps = shp(1);
                if want(0) {
                    let mut d = g.clone();
                    fill_rect(&mut d, *top, *left, ps[1], ps[2], T::zero());
                    out[0] = Some(d);
                }
                if want(1) {
                    out[1] = Some(t(1, crop(g, *top, *left, ps[1], ps[2])));
                }
            }
            Op::Crop { top, left, .. } => {
                let mut d = Tensor::zeros(&shp(0));
                paste_into(&mut d, g, *top, *left);
                out[0] = Some(d);
            }
            Op::ZeroRect {
                top,
                left,
                height,
                width,
            } => {
                let mut d = g.clone();
                fill_rect(&mut d, *top, *left, *height, *width, T::zero());
                out[0] = Some(d);
            }
        }
        out
    }

    /// Appends nodes computing `d output / d wrt` and returns the node of
    /// the gradient. When the graph already holds a forward pass the new
    /// nodes are evaluated immediately.
    pub fn grad_graph(&mut self, output: NodeId, wrt: NodeId) -> Result<NodeId> {
        self.check_scalar(output)?;
        let start = self.nodes.len();
        let was_evaluated = self.evaluated == start;
        let rel = self.relevant(output, &[wrt]);
        let result = if !rel.get(wrt.0).copied().unwrap_or(false) {
            self.constant(Tensor::zeros(self.shape(wrt)))
        } else {
            let mut grads: Vec<Option<NodeId>> = vec![None; output.0 + 1];
            let seed = self.constant(Tensor::full(self.shape(output), T::one()));
            grads[output.0] = Some(seed);
            for i in (wrt.0 + 1..=output.0).rev() {
                if !rel[i] {
                    continue;
                }
                let Some(g) = grads[i] else { continue };
                let needs: Vec<bool> = self.nodes[i].inputs.iter().map(|j| rel[j.0]).collect();
                let vjps = self.vjp_graph(i, g, &needs)?;
                for (j, gj) in self.nodes[i].inputs.clone().into_iter().zip(vjps) {
                    if let Some(gj) = gj {
                        grads[j.0] = Some(match grads[j.0] {
                            Some(acc) => self.add(acc, gj)?,
                            None => gj,
                        });
                    }
                }
            }
            match grads[wrt.0] {
                Some(g) => g,
                None => self.constant(Tensor::zeros(self.shape(wrt))),
            }
        };
        if was_evaluated {
            self.evaluate_from(start)?;
        }
        Ok(result)
    }

    fn vjp_graph(&mut self, i: usize, g: NodeId, needs: &[bool]) -> Result<Vec<Option<NodeId>>> {
        let node = self.nodes[i].clone();
        let ins = node.inputs.clone();
        let mut out: Vec<Option<NodeId>> = vec![None; ins.len()];
        let shp = |s: &Self, k: usize| s.shape(ins[k]).to_vec();
        let unsupported = |k: usize| Error::UnsupportedGradient {
            op: node.op.kind(),
            input: k,
        };
        for (k, &need) in needs.iter().enumerate() {
            if !need {
                continue;
            }
            let id = match &node.op {
                Op::Input { .. } | Op::Constant => unreachable!("leaves have no inputs"),
                Op::StopGradient => continue,
                Op::Conv2d { stride, pad } => {
                    if k != 0 {
                        return Err(unsupported(k));
                    }
                    let shape = shp(self, 0);
                    self.push(
                        Op::ConvTransposeInput {
                            stride: *stride,
                            pad: *pad,
                        },
                        vec![g, ins[1]],
                        shape,
                    )
                }
                Op::ConvTransposeInput { stride, pad } => {
                    if k != 0 {
                        return Err(unsupported(k));
                    }
                    let shape = shp(self, 0);
                    self.push(
                        Op::Conv2d {
                            stride: *stride,
                            pad: *pad,
                        },
                        vec![g, ins[1]],
                        shape,
                    )
                }
                Op::Relu => {
                    let shape = shp(self, 0);
                    self.push(Op::ReluMask { source: NodeId(i) }, vec![g], shape)
                }
                Op::ReluMask { source } => {
                    let shape = shp(self, 0);
                    self.push(Op::ReluMask { source: *source }, vec![g], shape)
                }
                Op::MaxPool { .. } => {
                    let shape = shp(self, 0);
                    self.push(Op::MaxPoolScatter { source: NodeId(i) }, vec![g], shape)
                }
                Op::Gap => {
                    let shape = shp(self, 0);
                    self.push(Op::GapBroadcast, vec![g], shape)
                }
                Op::GapBroadcast => {
                    let shape = shp(self, 0);
                    self.push(Op::Gap, vec![g], shape)
                }
                Op::Linear => {
                    if k != 0 {
                        return Err(unsupported(k));
                    }
                    let shape = shp(self, 0);
                    self.push(Op::LinearTranspose, vec![g, ins[1]], shape)
                }
                Op::LinearTranspose => {
                    if k != 0 {
                        return Err(unsupported(k));
                    }
                    let shape = shp(self, 0);
                    self.push(Op::Linear, vec![g, ins[1]], shape)
                }
                Op::Add => g,
                Op::Mul => self.mul(g, ins[1 - k])?,
                Op::Scale(f) => self.scale(g, *f),
                Op::Sum => {
                    let shape = shp(self, 0);
                    self.push(Op::Fill, vec![g], shape)
                }
                Op::Fill => self.sum(g),
                Op::DivByScalar => {
                    if k == 0 {
                        self.div_by_scalar(g, ins[1])?
                    } else {
                        let prod = self.mul(g, NodeId(i))?;
                        let dot = self.sum(prod);
                        let q = self.div_by_scalar(dot, ins[1])?;
                        let q = self.scale(q, -1.0);
                        if self.shape(q) != self.shape(ins[1]) {
                            let shape = shp(self, 1);
                            self.push(Op::Fill, vec![q], shape)
                        } else {
                            q
                        }
                    }
                }
                Op::UpsampleNearest { factor } => {
                    let shape = shp(self, 0);
                    self.push(Op::BlockSum { factor: *factor }, vec![g], shape)
                }
                Op::BlockSum { factor } => {
                    let shape = shp(self, 0);
                    self.push(Op::UpsampleNearest { factor: *factor }, vec![g], shape)
                }
                Op::SoftmaxCrossEntropy { target } => {
                    let shape = shp(self, 0);
                    self.push(
                        Op::SoftmaxCrossEntropyGrad { target: *target },
                        vec![ins[0], g],
                        shape,
                    )
                }
                Op::Pick { index } => {
                    let shape = shp(self, 0);
                    self.push(Op::OneHot { index: *index }, vec![g], shape)
                }
                Op::OneHot { index } => self.push(Op::Pick { index: *index }, vec![g], vec![]),
                Op::ChannelWeightedSum => {
                    if k == 0 {
                        let shape = shp(self, 0);
                        self.push(Op::ChannelDot, vec![g, ins[1]], shape)
                    } else {
                        let shape = shp(self, 1);
                        self.push(Op::ChannelOuter, vec![ins[0], g], shape)
                    }
                }
                Op::ChannelDot => {
                    if k == 0 {
                        let shape = shp(self, 0);
                        self.push(Op::ChannelWeightedSum, vec![g, ins[1]], shape)
                    } else {
                        let shape = shp(self, 1);
                        self.push(Op::ChannelOuter, vec![g, ins[0]], shape)
                    }
                }
                Op::ChannelOuter => {
                    if k == 0 {
                        let shape = shp(self, 0);
                        self.push(Op::ChannelDot, vec![ins[1], g], shape)
                    } else {
                        let shape = shp(self, 1);
                        self.push(Op::ChannelWeightedSum, vec![ins[0], g], shape)
                    }
                }
                Op::Paste { top, left } => {
                    let ps = shp(self, 1);
                    if k == 0 {
                        let shape = shp(self, 0);
                        self.push(
                            Op::ZeroRect {
                                top: *top,
                                left: *left,
                                height: ps[1],
                                width: ps[2],
                            },
                            vec![g],
                            shape,
                        )
                    } else {
                        self.crop(g, *top, *left, ps[1], ps[2])?
                    }
                }
                Op::ZeroRect { .. } => {
                    let shape = shp(self, 0);
                    self.push(node.op.clone(), vec![g], shape)
                }
                Op::MaxPoolScatter { .. } | Op::SoftmaxCrossEntropyGrad { .. } | Op::Crop { .. } => {
                    return Err(unsupported(k))
                }
            };
            out[k] = Some(id);
        }
        Ok(out)
    }

    /// Differentiates `output` w.r.t. a named input, either to a tensor or
    /// (with `as_graph`) to a new differentiable node.
    pub fn backward(&mut self, output: NodeId, wrt: &str, as_graph: bool) -> Result<Gradient<T>> {
        let id = self.input_id(wrt)?;
        if as_graph {
            Ok(Gradient::Graph(self.grad_graph(output, id)?))
        } else {
            Ok(Gradient::Value(self.grad(output, &[id])?.remove(0)))
        }
    }
}

fn apply_mask<T: Scalar>(g: &[T], mask: &[bool]) -> Vec<T> {
    g.iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v } else { T::zero() })
        .collect()
}

fn scatter<T: Scalar>(g: &[T], arg: &[usize], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for (&v, &a) in g.iter().zip(arg) {
        out[a] += v;
    }
    out
}

fn gap<T: Scalar>(x: &[T], c: usize, hw: usize) -> Vec<T> {
    let inv = 1.0 / hw as f64;
    (0..c)
        .map(|k| T::from_f64(x[k * hw..(k + 1) * hw].iter().map(|v| v.as_f64()).sum::<f64>() * inv))
        .collect()
}

fn gap_broadcast<T: Scalar>(g: &[T], hw: usize) -> Vec<T> {
    let inv = T::from_f64(1.0 / hw as f64);
    g.iter()
        .flat_map(|&v| std::iter::repeat_n(v * inv, hw))
        .collect()
}

fn linear_transpose<T: Scalar>(g: &[T], w: &[T], o: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    kernels::gemm(1, o, n, g, false, w, false, &mut out, false);
    out
}

fn outer<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter()
        .flat_map(|&x| b.iter().map(move |&y| x * y))
        .collect()
}

fn div_scalar<T: Scalar>(x: &[T], s: T) -> Vec<T> {
    if s == T::zero() {
        vec![T::zero(); x.len()]
    } else {
        x.iter().map(|&v| v / s).collect()
    }
}

fn channel_weighted_sum<T: Scalar>(w: &[T], maps: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); hw];
    kernels::gemm(1, c, hw, w, false, maps, false, &mut out, false);
    out
}

fn channel_dot<T: Scalar>(g: &[T], maps: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    kernels::gemm(c, hw, 1, maps, false, g, false, &mut out, false);
    out
}

fn channel_outer<T: Scalar>(w: &[T], g: &[T]) -> Vec<T> {
    outer(w, g)
}

fn paste_into<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>, top: usize, left: usize) {
    let (p, h, w) = plane_dims(dst.shape());
    let (_, sh, sw) = plane_dims(src.shape());
    let s = src.data().to_vec();
    let d = dst.data_mut();
    for c in 0..p {
        for y in 0..sh {
            let drow = (c * h + top + y) * w + left;
            let srow = (c * sh + y) * sw;
            d[drow..drow + sw].copy_from_slice(&s[srow..srow + sw]);
        }
    }
}

fn crop<T: Scalar>(x: &Tensor<T>, top: usize, left: usize, height: usize, width: usize) -> Vec<T> {
    let (p, h, w) = plane_dims(x.shape());
    let d = x.data();
    let mut out = Vec::with_capacity(p * height * width);
    for c in 0..p {
        for y in 0..height {
            let row = (c * h + top + y) * w + left;
            out.extend_from_slice(&d[row..row + width]);
        }
    }
    out
}

fn fill_rect<T: Scalar>(x: &mut Tensor<T>, top: usize, left: usize, height: usize, width: usize, v: T) {
    let (p, h, w) = plane_dims(x.shape());
    let d = x.data_mut();
    for c in 0..p {
        for y in 0..height {
            let row = (c * h + top + y) * w + left;
            d[row..row + width].fill(v);
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diff::{finite_diff_check, GraphFunction};

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// `sum(node * c)` for a random constant `c`, so every element matters.
    fn project(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, node: NodeId) -> NodeId {
        let c = g.constant(random(rng, g.shape(node)));
        let p = g.mul(node, c).unwrap();
        g.sum(p)
    }

    fn check(g: Graph<f64>, out: NodeId, x: &Tensor<f64>, tol: f64) {
        let mut f = GraphFunction::new(g, "x", out).unwrap();
        let r = finite_diff_check(&mut f, x, 1e-5).unwrap();
        assert!(r.max_rel_error < tol, "{r:?}");
        assert!(r.checked > 0);
    }

    type Builder = fn(&mut Graph<f64>, &mut ChaCha8Rng, NodeId) -> NodeId;

    fn op_cases() -> Vec<(&'static str, Vec<usize>, Builder)> {
        vec![
            ("conv", vec![2, 7, 6], |g, r, x| {
                let w = g.constant(random(r, &[3, 2, 3, 3]));
                let b = g.constant(random(r, &[3]));
                g.conv2d(x, w, Some(b), 2, 1).unwrap()
            }),
            ("relu", vec![3, 4, 4], |g, _, x| g.relu(x)),
            ("maxpool", vec![2, 6, 6], |g, _, x| g.max_pool(x, 2, 2).unwrap()),
            ("gap", vec![3, 4, 5], |g, _, x| g.gap(x).unwrap()),
            ("linear", vec![5], |g, r, x| {
                let w = g.constant(random(r, &[3, 5]));
                let b = g.constant(random(r, &[3]));
                g.linear(x, w, Some(b)).unwrap()
            }),
            ("add-self", vec![6], |g, _, x| g.add(x, x).unwrap()),
            ("mul-self", vec![6], |g, _, x| g.mul(x, x).unwrap()),
            ("scale", vec![6], |g, _, x| g.scale(x, -2.5)),
            ("div-by-sum-sq", vec![2, 3], |g, _, x| {
                let sq = g.mul(x, x).unwrap();
                let s = g.sum(sq);
                g.div_by_scalar(x, s).unwrap()
            }),
            ("upsample", vec![2, 3, 2], |g, _, x| g.upsample_nearest(x, 3).unwrap()),
            ("softmax-ce", vec![4], |g, _, x| g.softmax_cross_entropy(x, 2).unwrap()),
            ("pick", vec![4], |g, _, x| g.pick(x, 3).unwrap()),
            ("channel-weighted-sum", vec![3, 2, 2], |g, _, x| {
                let gp = g.gap(x).unwrap();
                g.channel_weighted_sum(gp, x).unwrap()
            }),
            ("paste", vec![2, 2, 3], |g, r, x| {
                let img = g.constant(random(r, &[2, 5, 5]));
                g.paste(img, x, 1, 2).unwrap()
            }),
            ("crop", vec![2, 5, 5], |g, _, x| g.crop(x, 1, 2, 3, 2).unwrap()),
        ]
    }

    #[test]
    fn every_op_matches_finite_differences() {
        for (name, shape, build) in op_cases() {
            let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
            let mut g = Graph::<f64>::new();
            let x = g.input("x", &shape).unwrap();
            let y = build(&mut g, &mut rng, x);
            let out = if g.shape(y).is_empty() { y } else { project(&mut g, &mut rng, y) };
            let xv = random(&mut rng, &shape);
            let mut f = GraphFunction::new(g, "x", out).unwrap();
            let r = finite_diff_check(&mut f, &xv, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-6, "{name}: {r:?}");
        }
    }

    #[test]
    fn gradient_graph_matches_numeric_gradient() {
        for (name, shape, build) in op_cases() {
            if name == "crop" {
                continue;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(7 + name.len() as u64);
            let mut g = Graph::<f64>::new();
            let x = g.input("x", &shape).unwrap();
            let y = build(&mut g, &mut rng, x);
            let out = if g.shape(y).is_empty() { y } else { project(&mut g, &mut rng, y) };
            let xv = random(&mut rng, &shape);
            g.forward(&[("x", &xv)]).unwrap();
            let numeric = g.grad(out, &[x]).unwrap().remove(0);
            let node = g.grad_graph(out, x).unwrap();
            let symbolic = g.value(node).unwrap();
            assert!(numeric.max_abs_diff(symbolic) < 1e-12, "{name}");
        }
    }

    #[test]
    fn frozen_masks_give_identical_first_order_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[2, 8, 8]).unwrap();
        let w = g.constant(random(&mut rng, &[4, 2, 3, 3]));
        let c = g.conv2d(x, w, None, 1, 1).unwrap();
        let r = g.relu(c);
        let p = g.max_pool(r, 2, 2).unwrap();
        let out = project(&mut g, &mut rng, p);
        let dx = g.grad_graph(out, x).unwrap();
        for seed in 0..3 {
            let xv = random(&mut ChaCha8Rng::seed_from_u64(seed), &[2, 8, 8]);
            g.forward(&[("x", &xv)]).unwrap();
            let numeric = g.grad(out, &[x]).unwrap().remove(0);
            assert_eq!(numeric.data(), g.value(dx).unwrap().data());
        }
    }

    #[test]
    fn second_order_of_smooth_product() {
        // f = sum(c * x * x), df/dx = 2 c x, d/dx <df/dx, v> = 2 c v
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[5]).unwrap();
        let cv = random(&mut rng, &[5]);
        let vv = random(&mut rng, &[5]);
        let c = g.constant(cv.clone());
        let xx = g.mul(x, x).unwrap();
        let cxx = g.mul(c, xx).unwrap();
        let f = g.sum(cxx);
        let dfdx = g.grad_graph(f, x).unwrap();
        let v = g.constant(vv.clone());
        let dv = g.mul(dfdx, v).unwrap();
        let h = g.sum(dv);
        let xv = random(&mut rng, &[5]);
        g.forward(&[("x", &xv)]).unwrap();
        let first = g.value(dfdx).unwrap();
        for i in 0..5 {
            assert!((first.data()[i] - 2.0 * cv.data()[i] * xv.data()[i]).abs() < 1e-12);
        }
        let second = g.grad(h, &[x]).unwrap().remove(0);
        for i in 0..5 {
            assert!((second.data()[i] - 2.0 * cv.data()[i] * vv.data()[i]).abs() < 1e-12);
        }
        check(g, h, &xv, 1e-6);
    }

    #[test]
    fn second_order_through_relu_network() {
        // quadratic in relu features, so the gradient is piecewise linear
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[2, 6, 6]).unwrap();
        let w = g.constant(random(&mut rng, &[3, 2, 3, 3]));
        let c = g.conv2d(x, w, None, 1, 1).unwrap();
        let r = g.relu(c);
        let p = g.max_pool(r, 2, 2).unwrap();
        let a = g.gap(p).unwrap();
        let wa = g.channel_weighted_sum(a, p).unwrap();
        let f = project(&mut g, &mut rng, wa);
        let dfdx = g.grad_graph(f, x).unwrap();
        let h = project(&mut g, &mut rng, dfdx);
        let xv = random(&mut rng, &[2, 6, 6]);
        check(g, h, &xv, 1e-5);
    }

    #[test]
    fn upsample_and_block_sum_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xv = random(&mut rng, &[2, 3, 4]);
        let yv = random(&mut rng, &[2, 6, 8]);
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[2, 3, 4]).unwrap();
        let u = g.upsample_nearest(x, 2).unwrap();
        let y = g.constant(yv.clone());
        let uy = g.mul(u, y).unwrap();
        let out = g.sum(uy);
        g.forward(&[("x", &xv)]).unwrap();
        let lhs = g.value(out).unwrap().item();
        let by = g.grad(out, &[x]).unwrap().remove(0);
        let rhs: f64 = by.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        // block sums by hand
        for c in 0..2 {
            for i in 0..3 {
                for j in 0..4 {
                    let mut s = 0.0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            s += yv.data()[(c * 6 + 2 * i + di) * 8 + 2 * j + dj];
                        }
                    }
                    assert!((by.data()[(c * 3 + i) * 4 + j] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gradient_is_linear_in_the_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[3, 4, 4]).unwrap();
        let r = g.relu(x);
        let f1 = project(&mut g, &mut rng, r);
        let f2 = project(&mut g, &mut rng, x);
        let a = g.scale(f1, 2.0);
        let b = g.scale(f2, -3.0);
        let comb = g.add(a, b).unwrap();
        g.forward(&[("x", &random(&mut rng, &[3, 4, 4]))]).unwrap();
        let g1 = g.grad(f1, &[x]).unwrap().remove(0);
        let g2 = g.grad(f2, &[x]).unwrap().remove(0);
        let gc = g.grad(comb, &[x]).unwrap().remove(0);
        for i in 0..gc.len() {
            assert!((gc.data()[i] - (2.0 * g1.data()[i] - 3.0 * g2.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (xv, wv, bv) = (random(&mut rng, &[2, 5, 4]), random(&mut rng, &[3, 2, 3, 3]), random(&mut rng, &[3]));
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[2, 5, 4]).unwrap();
        let w = g.constant(wv.clone());
        let b = g.constant(bv.clone());
        let y = g.conv2d(x, w, Some(b), 1, 1).unwrap();
        let out = g.eval(&[("x", &xv)], y).unwrap();
        assert_eq!(out.shape(), &[3, 5, 4]);
        for o in 0..3 {
            for i in 0..5 {
                for j in 0..4 {
                    let mut s = bv.data()[o];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (yi, xj) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                                if (0..5).contains(&yi) && (0..4).contains(&xj) {
                                    s += wv.data()[((o * 2 + c) * 3 + ki) * 3 + kj]
                                        * xv.data()[(c * 5 + yi as usize) * 4 + xj as usize];
                                }
                            }
                        }
                    }
                    assert!((out.data()[(o * 5 + i) * 4 + j] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn degenerate_division_and_stop_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[3]).unwrap();
        let zero = g.constant(Tensor::scalar(0.0));
        let d = g.div_by_scalar(x, zero).unwrap();
        let s = g.sum(d);
        let stopped = g.stop_gradient(x);
        let t = g.sum(stopped);
        let xv = Tensor::from_f64_slice(&[3], &[1.0, 2.0, 3.0]).unwrap();
        g.forward(&[("x", &xv)]).unwrap();
        assert_eq!(g.value(d).unwrap().data(), &[0.0; 3]);
        assert_eq!(g.grad(s, &[x]).unwrap()[0].data(), &[0.0; 3]);
        assert_eq!(g.value(t).unwrap().item(), 6.0);
        assert_eq!(g.grad(t, &[x]).unwrap()[0].data(), &[0.0; 3]);
    }

    #[test]
    fn error_paths() {
        let mut g = Graph::<f64>::new();
        let x = g.input("x", &[2, 4, 4]).unwrap();
        assert!(g.input("x", &[1]).is_err());
        let w = g.input("w", &[3, 2, 3, 3]).unwrap();
        let c = g.conv2d(x, w, None, 1, 1).unwrap();
        let out = g.sum(c);
        assert!(matches!(g.grad(out, &[x]), Err(Error::NotEvaluated(_))));
        let xv = Tensor::zeros(&[2, 4, 4]);
        assert!(matches!(g.forward(&[("x", &xv)]), Err(Error::UnboundInput(_))));
        let bad = Tensor::zeros(&[2, 4, 5]);
        let wv = Tensor::zeros(&[3, 2, 3, 3]);
        assert!(matches!(g.forward(&[("x", &bad), ("w", &wv)]), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(g.forward(&[("y", &xv)]), Err(Error::NotAnInput(_))));
        g.forward(&[("x", &xv), ("w", &wv)]).unwrap();
        assert!(matches!(g.grad(c, &[x]), Err(Error::NonScalarOutput { .. })));
        assert!(matches!(g.grad_graph(out, w), Err(Error::UnsupportedGradient { .. })));
        assert!(g.add(x, c).is_err());
        assert!(g.max_pool(x, 5, 1).is_err());
        assert!(g.crop(x, 3, 0, 2, 2).is_err());
    }
}
