//! Tape-based reverse-mode differentiation over the layer catalogue.
//!
//! A [`Graph`] records every operation in construction order. In
//! [`Mode::Train`] the recorded nodes form a tape that [`Graph::backward`]
//! walks in reverse; in [`Mode::Infer`] no tape is kept and dropout is the
//! identity.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{EngineError, Result};
use crate::kernels::{self, ConvGeom};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// User-defined differentiable operation, used for the task losses.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradient with respect to each input, `None` where none is needed.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Param(String),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    DepthwiseConv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Reshape(NodeId),
    Upsample2x(NodeId),
    ConcatChannels(NodeId, NodeId),
    FrameWindows {
        x: NodeId,
        size: usize,
    },
    BceMean {
        p: NodeId,
        target: NodeId,
    },
    MseMean {
        x: NodeId,
        target: NodeId,
    },
    WeightedSum {
        x: NodeId,
        weights: NodeId,
    },
    Custom {
        op: Arc<dyn CustomOp>,
        inputs: Vec<NodeId>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Result of a backward pass: gradients for graph inputs created with
/// [`Graph::input`]. Parameter gradients go straight into the [`ParamStore`].
#[derive(Debug, Default)]
pub struct Gradients {
    inputs: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn input(&self, id: NodeId) -> Option<&Tensor> {
        self.inputs.get(&id)
    }
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
}

const PROB_EPS: f64 = 1e-12;

impl Graph {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, label: &str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(EngineError::Numeric {
                layer: label.to_string(),
            });
        }
        let needs_grad = needs_grad && self.mode == Mode::Train;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Differentiable input; its gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, true, "input")
    }

    /// Input that never receives a gradient (targets, masks).
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn param(&mut self, params: &ParamStore, name: &str) -> Result<NodeId> {
        let value = params.value(name)?.clone();
        self.push(value, Op::Param(name.to_string()), true, name)
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let xs = self.shape_of(x).to_vec();
        let ws = self.shape_of(w).to_vec();
        let bs = self.shape_of(b).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || bs != [ws[0]] {
            return Err(EngineError::shape(
                "conv2d",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        if xs[1] != ws[1] {
            return Err(EngineError::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", xs[1], ws[1]),
            ));
        }
        let (batch, out_ch, k) = (xs[0], ws[0], ws[2]);
        if stride == 0 || xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(EngineError::shape(
                "conv2d",
                format!("kernel {k} does not fit input {xs:?} with padding {pad}"),
            ));
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: k,
            stride,
            pad,
            out_h: (xs[2] + 2 * pad - k) / stride + 1,
            out_w: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let mut y = vec![0.0; batch * out_ch * geom.out_area()];
        kernels::conv2d_forward(
            &geom,
            batch,
            out_ch,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &mut y,
        );
        let value = Tensor::new(vec![batch, out_ch, geom.out_h, geom.out_w], y)?;
        let ng = self.grad_of(&[x, w, b]);
        self.push(value, Op::Conv2d { x, w, b, geom }, ng, "conv2d")
    }

    /// Max pooling; ties resolve to the first element in row-major order.
    pub fn max_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let xs = self.shape_of(x).to_vec();
        if xs.len() != 4 || kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel {
            return Err(EngineError::shape(
                "max_pool2d",
                format!("kernel {kernel} on input {xs:?}"),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    y.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], y)?;
        let ng = self.grad_of(&[x]);
        self.push(value, Op::MaxPool2d { x, argmax }, ng, "max_pool2d")
    }

    /// `y = x W^T + b` with `x: [n, in]`, `W: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape_of(x).to_vec();
        let ws = self.shape_of(w).to_vec();
        let bs = self.shape_of(b).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(EngineError::shape(
                "dense",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; n * out];
        for row in y.chunks_mut(out) {
            row.copy_from_slice(self.value(b).data());
        }
        kernels::gemm(
            n,
            inp,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut y,
        );
        let value = Tensor::new(vec![n, out], y)?;
        let ng = self.grad_of(&[x, w, b]);
        self.push(value, Op::Dense { x, w, b }, ng, "dense")
    }

    /// Per-channel temporal convolution with valid padding:
    /// `x: [n, t, c]`, `w: [c, k]`, `b: [c]` gives `[n, t - k + 1, c]`.
    pub fn depthwise_conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape_of(x).to_vec();
        let ws = self.shape_of(w).to_vec();
        let bs = self.shape_of(b).to_vec();
        if xs.len() != 3 || ws.len() != 2 || xs[2] != ws[0] || bs != [ws[0]] || xs[1] < ws[1] {
            return Err(EngineError::shape(
                "depthwise_conv1d",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, t, c, k) = (xs[0], xs[1], xs[2], ws[1]);
        let to = t - k + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut y = vec![0.0; n * to * c];
        for s in 0..n {
            for ot in 0..to {
                let dst = &mut y[(s * to + ot) * c..][..c];
                dst.copy_from_slice(bv);
                for kk in 0..k {
                    let src = &xv[(s * t + ot + kk) * c..][..c];
                    for ch in 0..c {
                        dst[ch] += wv[ch * k + kk] * src[ch];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, to, c], y)?;
        let ng = self.grad_of(&[x, w, b]);
        self.push(value, Op::DepthwiseConv1d { x, w, b }, ng, "depthwise_conv1d")
    }

    /// Rectifier; the subgradient at exactly zero is taken as 0.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let y = Tensor::from_fn(v.shape(), |i| v.data()[i].max(0.0));
        let ng = self.grad_of(&[x]);
        self.push(y, Op::Relu(x), ng, "relu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let y = Tensor::from_fn(v.shape(), |i| sigmoid(v.data()[i]));
        let ng = self.grad_of(&[x]);
        self.push(y, Op::Sigmoid(x), ng, "sigmoid")
    }

    /// Inverted dropout. Identity in inference mode or when `rate == 0`.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(EngineError::shape(
                "dropout",
                format!("rate {rate} outside [0, 1)"),
            ));
        }
        if self.mode == Mode::Infer || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() >= rate {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let v = self.value(x);
        let y = Tensor::from_fn(v.shape(), |i| v.data()[i] * mask[i]);
        let ng = self.grad_of(&[x]);
        self.push(y, Op::Dropout { x, mask }, ng, "dropout")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let y = self.value(x).clone().reshape(shape)?;
        let ng = self.grad_of(&[x]);
        self.push(y, Op::Reshape(x), ng, "reshape")
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape_of(x);
        let lead = s[0];
        let rest: usize = s[1..].iter().product();
        self.reshape(x, &[lead, rest])
    }

    /// Nearest-neighbour 2x spatial upsampling of `[n, c, h, w]`.
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape_of(x).to_vec();
        if xs.len() != 4 {
            return Err(EngineError::shape("upsample2x", format!("input {xs:?}")));
        }
        let (h, w) = (xs[2], xs[3]);
        let xv = self.value(x).data();
        let mut y = vec![0.0; xs[0] * xs[1] * 4 * h * w];
        for plane in 0..xs[0] * xs[1] {
            let src = &xv[plane * h * w..][..h * w];
            let dst = &mut y[plane * 4 * h * w..][..4 * h * w];
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![xs[0], xs[1], 2 * h, 2 * w], y)?;
        let ng = self.grad_of(&[x]);
        self.push(value, Op::Upsample2x(x), ng, "upsample2x")
    }

    /// Channel concatenation of two `[n, c, h, w]` tensors.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape_of(a).to_vec();
        let sb = self.shape_of(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(EngineError::shape(
                "concat_channels",
                format!("{sa:?} with {sb:?}"),
            ));
        }
        let area = sa[2] * sa[3];
        let (ca, cb) = (sa[1], sb[1]);
        let mut y = Vec::with_capacity(sa[0] * (ca + cb) * area);
        for n in 0..sa[0] {
            y.extend_from_slice(&self.value(a).data()[n * ca * area..][..ca * area]);
            y.extend_from_slice(&self.value(b).data()[n * cb * area..][..cb * area]);
        }
        let value = Tensor::new(vec![sa[0], ca + cb, sa[2], sa[3]], y)?;
        let ng = self.grad_of(&[a, b]);
        self.push(value, Op::ConcatChannels(a, b), ng, "concat_channels")
    }

    /// All step-1 windows of `size` consecutive rows: `[f, d]` becomes `[f - size + 1, size, d]`.
    pub fn frame_windows(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        let xs = self.shape_of(x).to_vec();
        if xs.len() != 2 || size == 0 || xs[0] < size {
            return Err(EngineError::shape(
                "frame_windows",
                format!("window of {size} over {xs:?}"),
            ));
        }
        let (f, d) = (xs[0], xs[1]);
        let count = f - size + 1;
        let xv = self.value(x).data();
        let mut y = Vec::with_capacity(count * size * d);
        for w in 0..count {
            y.extend_from_slice(&xv[w * d..(w + size) * d]);
        }
        let value = Tensor::new(vec![count, size, d], y)?;
        let ng = self.grad_of(&[x]);
        self.push(value, Op::FrameWindows { x, size }, ng, "frame_windows")
    }

    /// Mean binary cross-entropy of probabilities against targets in [0, 1].
    pub fn bce_mean(&mut self, p: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape("bce_mean", p, target)?;
        let pv = self.value(p).data();
        let tv = self.value(target).data();
        let n = pv.len() as f64;
        let loss = pv
            .iter()
            .zip(tv)
            .map(|(&p, &t)| {
                let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / n;
        let ng = self.grad_of(&[p]);
        self.push(Tensor::scalar(loss), Op::BceMean { p, target }, ng, "bce_mean")
    }

    pub fn mse_mean(&mut self, x: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape("mse_mean", x, target)?;
        let xv = self.value(x).data();
        let tv = self.value(target).data();
        let loss = xv.iter().zip(tv).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / xv.len() as f64;
        let ng = self.grad_of(&[x]);
        self.push(Tensor::scalar(loss), Op::MseMean { x, target }, ng, "mse_mean")
    }

    /// `sum(x * weights)` against a constant weight tensor.
    pub fn weighted_sum(&mut self, x: NodeId, weights: NodeId) -> Result<NodeId> {
        self.same_shape("weighted_sum", x, weights)?;
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(self.value(weights).data())
            .map(|(a, b)| a * b)
            .sum();
        let ng = self.grad_of(&[x]);
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, ng, "weighted_sum")
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
        let y = op.forward(&values)?;
        let ng = self.grad_of(inputs);
        let label = op.name().to_string();
        self.push(
            y,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            ng,
            &label,
        )
    }

    fn same_shape(&self, layer: &str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(EngineError::shape(
                layer,
                format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        Ok(())
    }

    /// Propagates `upstream` (the gradient of some scalar with respect to
    /// `output`) back through the tape. Parameter gradients are accumulated
    /// into `params`; gradients of [`Graph::input`] nodes are returned.
    pub fn backward(
        &self,
        output: NodeId,
        upstream: &Tensor,
        params: &mut ParamStore,
    ) -> Result<Gradients> {
        if self.mode != Mode::Train {
            return Err(EngineError::State(
                "backward requires a graph recorded in train mode".into(),
            ));
        }
        if upstream.shape() != self.shape_of(output) {
            return Err(EngineError::shape(
                "backward",
                format!(
                    "upstream gradient {:?} vs output {:?}",
                    upstream.shape(),
                    self.shape_of(output)
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(upstream.clone());
        let mut out = Gradients::default();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.inputs.insert(NodeId(idx), g);
                }
                Op::Param(name) => params.accumulate_grad(name, &g)?,
                op => {
                    for (id, gi) in self.op_backward(op, &node.value, &g)? {
                        if !self.nodes[id.0].needs_grad {
                            continue;
                        }
                        match &mut grads[id.0] {
                            Some(acc) => acc.add_assign(&gi),
                            slot => *slot = Some(gi),
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn op_backward(&self, op: &Op, y: &Tensor, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let gd = g.data();
        Ok(match op {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let batch = xv.shape()[0];
                let out_ch = wv.shape()[0];
                let mut dw = Tensor::zeros(wv.shape());
                let mut db = Tensor::zeros(self.shape_of(*b));
                let mut dx = self.nodes[x.0].needs_grad.then(|| Tensor::zeros(xv.shape()));
                kernels::conv2d_backward(
                    geom,
                    batch,
                    out_ch,
                    xv.data(),
                    wv.data(),
                    gd,
                    dw.data_mut(),
                    db.data_mut(),
                    dx.as_mut().map(|t| t.data_mut()),
                );
                let mut v = vec![(*w, dw), (*b, db)];
                if let Some(dx) = dx {
                    v.push((*x, dx));
                }
                v
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape_of(*x));
                let d = dx.data_mut();
                for (gi, &src) in gd.iter().zip(argmax) {
                    d[src] += gi;
                }
                vec![(*x, dx)]
            }
            Op::Dense { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, inp) = (xv.shape()[0], xv.shape()[1]);
                let out = wv.shape()[0];
                let mut dx = Tensor::zeros(xv.shape());
                kernels::gemm(n, out, inp, gd, false, wv.data(), false, 0.0, dx.data_mut());
                let mut dw = Tensor::zeros(wv.shape());
                kernels::gemm(out, n, inp, gd, true, xv.data(), false, 0.0, dw.data_mut());
                let mut db = Tensor::zeros(&[out]);
                for row in gd.chunks(out) {
                    for (a, b) in db.data_mut().iter_mut().zip(row) {
                        *a += b;
                    }
                }
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::DepthwiseConv1d { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, t, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let k = wv.shape()[1];
                let to = t - k + 1;
                let mut dx = Tensor::zeros(xv.shape());
                let mut dw = Tensor::zeros(wv.shape());
                let mut db = Tensor::zeros(&[c]);
                for s in 0..n {
                    for ot in 0..to {
                        let grow = &gd[(s * to + ot) * c..][..c];
                        for (a, b) in db.data_mut().iter_mut().zip(grow) {
                            *a += b;
                        }
                        for kk in 0..k {
                            let base = (s * t + ot + kk) * c;
                            for ch in 0..c {
                                dw.data_mut()[ch * k + kk] += grow[ch] * xv.data()[base + ch];
                                dx.data_mut()[base + ch] += grow[ch] * wv.data()[ch * k + kk];
                            }
                        }
                    }
                }
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = Tensor::from_fn(y.shape(), |i| if xv[i] > 0.0 { gd[i] } else { 0.0 });
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let yv = y.data();
                let dx = Tensor::from_fn(y.shape(), |i| gd[i] * yv[i] * (1.0 - yv[i]));
                vec![(*x, dx)]
            }
            Op::Dropout { x, mask } => {
                let dx = Tensor::from_fn(y.shape(), |i| gd[i] * mask[i]);
                vec![(*x, dx)]
            }
            Op::Reshape(x) => {
                vec![(*x, g.clone().reshape(self.shape_of(*x))?)]
            }
            Op::Upsample2x(x) => {
                let xs = self.shape_of(*x);
                let (h, w) = (xs[2], xs[3]);
                let mut dx = Tensor::zeros(xs);
                let d = dx.data_mut();
                for plane in 0..xs[0] * xs[1] {
                    let src = &gd[plane * 4 * h * w..][..4 * h * w];
                    let dst = &mut d[plane * h * w..][..h * w];
                    for yy in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.shape_of(*a);
                let sb = self.shape_of(*b);
                let area = sa[2] * sa[3];
                let (ca, cb) = (sa[1], sb[1]);
                let mut da = Vec::with_capacity(self.value(*a).len());
                let mut dbv = Vec::with_capacity(self.value(*b).len());
                for n in 0..sa[0] {
                    let base = n * (ca + cb) * area;
                    da.extend_from_slice(&gd[base..base + ca * area]);
                    dbv.extend_from_slice(&gd[base + ca * area..base + (ca + cb) * area]);
                }
                vec![
                    (*a, Tensor::new(sa.to_vec(), da)?),
                    (*b, Tensor::new(sb.to_vec(), dbv)?),
                ]
            }
            Op::FrameWindows { x, size } => {
                let xs = self.shape_of(*x);
                let d = xs[1];
                let count = xs[0] - size + 1;
                let mut dx = Tensor::zeros(xs);
                let dxd = dx.data_mut();
                for w in 0..count {
                    let src = &gd[w * size * d..(w + 1) * size * d];
                    for (a, b) in dxd[w * d..(w + size) * d].iter_mut().zip(src) {
                        *a += b;
                    }
                }
                vec![(*x, dx)]
            }
            Op::BceMean { p, target } => {
                let pv = self.value(*p).data();
                let tv = self.value(*target).data();
                let n = pv.len() as f64;
                let up = gd[0];
                let dp = Tensor::from_fn(self.shape_of(*p), |i| {
                    let pc = pv[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
                    up * (pc - tv[i]) / (pc * (1.0 - pc)) / n
                });
                vec![(*p, dp)]
            }
            Op::MseMean { x, target } => {
                let xv = self.value(*x).data();
                let tv = self.value(*target).data();
                let n = xv.len() as f64;
                let up = gd[0];
                let dx = Tensor::from_fn(self.shape_of(*x), |i| up * 2.0 * (xv[i] - tv[i]) / n);
                vec![(*x, dx)]
            }
            Op::WeightedSum { x, weights } => {
                let wv = self.value(*weights).data();
                let up = gd[0];
                vec![(*x, Tensor::from_fn(self.shape_of(*x), |i| up * wv[i]))]
            }
            Op::Custom { op, inputs } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&i| self.value(i)).collect();
                let gs = op.backward(&values, y, g)?;
                inputs
                    .iter()
                    .zip(gs)
                    .filter_map(|(&id, gi)| gi.map(|t| (id, t)))
                    .collect()
            }
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn dense_weight_gradient_is_outer_product() {
        let x = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut params = store(&[
            ("w", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1)),
            ("b", Tensor::zeros(&[2])),
        ]);
        let mut g = Graph::new(Mode::Train, 0);
        let xi = g.input(x.clone()).unwrap();
        let w = g.param(&params, "w").unwrap();
        let b = g.param(&params, "b").unwrap();
        let y = g.dense(xi, w, b).unwrap();
        let up = Tensor::new(vec![1, 2], vec![3.0, -1.0]).unwrap();
        g.backward(y, &up, &mut params).unwrap();
        let dw = params.grad("w").unwrap();
        let expect = [3.0, -6.0, 1.5, -1.0, 2.0, -0.5];
        assert_eq!(dw.data(), &expect);
        assert_eq!(params.grad("b").unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut params = ParamStore::new();
        let mut g = Graph::new(Mode::Train, 0);
        let x = g
            .input(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap())
            .unwrap();
        let y = g.relu(x).unwrap();
        let grads = g
            .backward(y, &Tensor::full(&[3], 1.0), &mut params)
            .unwrap();
        assert_eq!(grads.input(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_requires_train_mode() {
        let mut params = ParamStore::new();
        let mut g = Graph::new(Mode::Infer, 0);
        let x = g.input(Tensor::scalar(1.0)).unwrap();
        let y = g.sigmoid(x).unwrap();
        let err = g.backward(y, &Tensor::scalar(1.0), &mut params).unwrap_err();
        assert!(matches!(err, EngineError::State(_)));
    }

    #[test]
    fn max_pool_ties_pick_first_index() {
        let mut params = ParamStore::new();
        let mut g = Graph::new(Mode::Train, 0);
        let x = g.input(Tensor::full(&[1, 1, 2, 2], 3.0)).unwrap();
        let y = g.max_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);
        let grads = g
            .backward(y, &Tensor::full(&[1, 1, 1, 1], 1.0), &mut params)
            .unwrap();
        assert_eq!(grads.input(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_activation_is_reported() {
        let mut g = Graph::new(Mode::Infer, 0);
        let err = g.input(Tensor::scalar(f64::NAN)).unwrap_err();
        assert!(matches!(err, EngineError::Numeric { .. }));
    }

    #[test]
    fn frame_windows_backward_counts_coverage() {
        let mut params = ParamStore::new();
        let mut g = Graph::new(Mode::Train, 0);
        let x = g.input(Tensor::zeros(&[5, 1])).unwrap();
        let w = g.frame_windows(x, 3).unwrap();
        assert_eq!(g.value(w).shape(), &[3, 3, 1]);
        let grads = g
            .backward(w, &Tensor::full(&[3, 3, 1], 1.0), &mut params)
            .unwrap();
        assert_eq!(grads.input(x).unwrap().data(), &[1.0, 2.0, 3.0, 2.0, 1.0]);
    }
}
