use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};

/// Dynamic-dimension `f64` array, the tape's universal value type.
pub type Arr = ArrayD<f64>;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Escape hatch for differentiable ops defined outside this module.
/// `backward` receives the recorded input values and the output gradient and
/// must return one gradient per input, shaped like the inputs.
pub trait CustomOp {
    fn backward(&self, inputs: &[&Arr], out_value: &Arr, out_grad: &Arr) -> Vec<Arr>;
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Abs(NodeId),
    Sqrt(NodeId),
    MeanAll(NodeId),
    MatMul(NodeId, NodeId),
    AddBiasRow(NodeId, NodeId),
    AddBiasChan(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
        pad: usize,
    },
    Upsample2x(NodeId),
    Concat {
        axis: usize,
        parts: Vec<NodeId>,
    },
    Reshape(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
    },
    Custom {
        inputs: Vec<NodeId>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Arr,
    op: Op,
    needs_grad: bool,
}

/// Eager computation tape. Values are computed on insertion; `backward`
/// fills gradients for every node that transitively depends on a
/// grad-requiring leaf.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Arr>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Arr, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Arr {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` target w.r.t. this node.
    /// Zero-shaped if the node never received a contribution.
    pub fn grad(&self, id: NodeId) -> Arr {
        self.grads
            .get(id.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Arr::zeros(self.nodes[id.0].value.raw_dim()))
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().next().copied().unwrap()
    }

    pub fn leaf(&mut self, value: Arr, needs_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Arr) -> NodeId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x * c);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let ng = self.needs(a);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: f64) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| if x >= 0.0 { x } else { alpha * x });
        let ng = self.needs(a);
        self.push(v, Op::LeakyRelu(a, alpha), ng)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(sigmoid);
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::abs);
        let ng = self.needs(a);
        self.push(v, Op::Abs(a), ng)
    }

    /// Elementwise square root. Gradient at exactly zero is defined as zero so
    /// a perfect loss stays differentiable-by-convention.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let ng = self.needs(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let m = self.nodes[a.0].value.mean().unwrap_or(0.0);
        let v = Arr::from_elem(IxDyn(&[]), m);
        let ng = self.needs(a);
        self.push(v, Op::MeanAll(a), ng)
    }

    /// `(m, k) x (k, n)` matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        let v = av.dot(&bv).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `(m, n) + (n)` broadcast add for dense-layer biases.
    pub fn add_bias_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = as2(&self.nodes[x.0].value);
        let bv = &self.nodes[bias.0].value;
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let v = (&xv + &b1).into_dyn();
        let ng = self.needs(x) || self.needs(bias);
        self.push(v, Op::AddBiasRow(x, bias), ng)
    }

    /// `(b, c, h, w) + (c)` broadcast add for conv biases.
    pub fn add_bias_chan(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let xv = as4(&self.nodes[x.0].value);
        let bv = &self.nodes[bias.0].value;
        let mut v = xv.to_owned();
        for (c, b) in bv.iter().enumerate() {
            v.index_axis_mut(Axis(1), c).mapv_inplace(|t| t + b);
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(v.into_dyn(), Op::AddBiasChan(x, bias), ng)
    }

    /// 2-D convolution, `x: (b, ci, h, w)`, `w: (co, ci, kh, kw)`.
    /// The im2col buffer is recomputed in the backward pass to keep peak
    /// memory at a single conv's worth.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = as4(&self.nodes[x.0].value);
        let wv = as4(&self.nodes[w.0].value);
        let (co, ci, kh, kw) = wv.dim();
        let (b, xci, h, wd) = xv.dim();
        assert_eq!(ci, xci, "conv2d channel mismatch");
        let oh = conv_out(h, kh, stride, pad);
        let ow = conv_out(wd, kw, stride, pad);
        let cols = im2col(&xv, kh, kw, stride, pad);
        let w2 = wv
            .to_shape((co, ci * kh * kw))
            .expect("contiguous weights")
            .to_owned();
        let out2 = cols.dot(&w2.t());
        let out = out2
            .into_shape_with_order((b, oh, ow, co))
            .unwrap()
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        let ng = self.needs(x) || self.needs(w);
        self.push(out.into_dyn(), Op::Conv2d { x, w, stride, pad }, ng)
    }

    /// Nearest-neighbor 2x upsample on `(b, c, h, w)`.
    pub fn upsample2x(&mut self, a: NodeId) -> NodeId {
        let xv = as4(&self.nodes[a.0].value);
        let (b, c, h, w) = xv.dim();
        let mut out = Array4::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = xv[[bi, ci, y, x]];
                        out[[bi, ci, 2 * y, 2 * x]] = v;
                        out[[bi, ci, 2 * y, 2 * x + 1]] = v;
                        out[[bi, ci, 2 * y + 1, 2 * x]] = v;
                        out[[bi, ci, 2 * y + 1, 2 * x + 1]] = v;
                    }
                }
            }
        }
        let ng = self.needs(a);
        self.push(out.into_dyn(), Op::Upsample2x(a), ng)
    }

    /// Concatenation along `axis` (channel axis 1 for feature maps).
    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(
            v.as_standard_layout().to_owned(),
            Op::Concat {
                axis,
                parts: parts.to_vec(),
            },
            ng,
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a.0]
            .value
            .to_shape(IxDyn(shape))
            .expect("reshape size mismatch")
            .to_owned();
        let ng = self.needs(a);
        self.push(v, Op::Reshape(a), ng)
    }

    /// Mean cross-entropy over rows of `logits: (b, k)` against class indices.
    /// Numerically stable (log-sum-exp); gradients flow to the raw logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let lv = as2(&self.nodes[logits.0].value);
        let (b, _k) = lv.dim();
        assert_eq!(b, targets.len());
        let mut total = 0.0;
        for (row, &t) in lv.outer_iter().zip(targets.iter()) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let v = Arr::from_elem(IxDyn(&[]), total / b as f64);
        let ng = self.needs(logits);
        self.push(v, Op::SoftmaxCrossEntropy { logits, targets }, ng)
    }

    /// Records an externally defined differentiable op. `value` must already
    /// be computed from the inputs' current values.
    pub fn custom(&mut self, inputs: Vec<NodeId>, value: Arr, op: Box<dyn CustomOp>) -> NodeId {
        let ng = inputs.iter().any(|p| self.needs(*p));
        self.push(value, Op::Custom { inputs, op }, ng)
    }

    /// Reverse sweep from `target` (any shape; gradient seeds with ones).
    pub fn backward(&mut self, target: NodeId) {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Arr::ones(self.nodes[target.0].value.raw_dim());
        self.grads[target.0] = Some(seed);
        for i in (0..=target.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn accum(&mut self, id: NodeId, delta: Arr) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: &Arr) {
        // Ops are matched by cloning the lightweight description; values are
        // borrowed immutably before any accumulation.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                self.accum(b, g.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(a, g.clone());
                self.accum(b, g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let da = g * &self.nodes[b.0].value;
                let db = g * &self.nodes[a.0].value;
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accum(a, g.mapv(|x| x * c));
            }
            Op::Relu(a) => {
                let a = *a;
                let da = ndarray::Zip::from(g)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&gv, &xv| if xv > 0.0 { gv } else { 0.0 });
                self.accum(a, da);
            }
            Op::LeakyRelu(a, alpha) => {
                let (a, alpha) = (*a, *alpha);
                let da = ndarray::Zip::from(g)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&gv, &xv| if xv >= 0.0 { gv } else { alpha * gv });
                self.accum(a, da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let da = ndarray::Zip::from(g)
                    .and(&self.nodes[i].value)
                    .map_collect(|&gv, &sv| gv * sv * (1.0 - sv));
                self.accum(a, da);
            }
            Op::Abs(a) => {
                let a = *a;
                let da = ndarray::Zip::from(g)
                    .and(&self.nodes[a.0].value)
                    .map_collect(|&gv, &xv| gv * sign0(xv));
                self.accum(a, da);
            }
            Op::Sqrt(a) => {
                let a = *a;
                let da = ndarray::Zip::from(g)
                    .and(&self.nodes[i].value)
                    .map_collect(|&gv, &sv| if sv > 0.0 { gv * 0.5 / sv } else { 0.0 });
                self.accum(a, da);
            }
            Op::MeanAll(a) => {
                let a = *a;
                let n = self.nodes[a.0].value.len() as f64;
                let gs = g.iter().next().copied().unwrap();
                let da = Arr::from_elem(self.nodes[a.0].value.raw_dim(), gs / n);
                self.accum(a, da);
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let g2 = as2(g);
                let av = as2(&self.nodes[a.0].value);
                let bv = as2(&self.nodes[b.0].value);
                let da = g2.dot(&bv.t()).into_dyn();
                let db = av.t().dot(&g2).into_dyn();
                self.accum(a, da);
                self.accum(b, db);
            }
            Op::AddBiasRow(x, bias) => {
                let (x, bias) = (*x, *bias);
                let g2 = as2(g);
                let db = g2.sum_axis(Axis(0)).into_dyn();
                self.accum(x, g.clone());
                self.accum(bias, db);
            }
            Op::AddBiasChan(x, bias) => {
                let (x, bias) = (*x, *bias);
                let g4 = as4(g);
                let c = g4.dim().1;
                let mut db = ndarray::Array1::zeros(c);
                for ci in 0..c {
                    db[ci] = g4.index_axis(Axis(1), ci).sum();
                }
                self.accum(x, g.clone());
                self.accum(bias, db.into_dyn());
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (x, w, stride, pad) = (*x, *w, *stride, *pad);
                let xv = as4(&self.nodes[x.0].value);
                let wv = as4(&self.nodes[w.0].value);
                let (co, ci, kh, kw) = wv.dim();
                let (b, _, h, wd) = xv.dim();
                let g4 = as4(g);
                let (_, _, oh, ow) = g4.dim();
                let g2 = g4
                    .to_owned()
                    .permuted_axes([0, 2, 3, 1])
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order((b * oh * ow, co))
                    .unwrap();
                let w2 = wv
                    .to_shape((co, ci * kh * kw))
                    .expect("contiguous weights")
                    .to_owned();
                if self.needs(w) {
                    let cols = im2col(&xv, kh, kw, stride, pad);
                    let dw2 = g2.t().dot(&cols);
                    let dw = dw2
                        .as_standard_layout()
                        .to_owned()
                        .into_shape_with_order((co, ci, kh, kw))
                        .unwrap();
                    self.accum(w, dw.into_dyn());
                }
                if self.needs(x) {
                    let dcols = g2.dot(&w2);
                    let dx = col2im(&dcols, b, ci, h, wd, kh, kw, stride, pad);
                    self.accum(x, dx.into_dyn());
                }
            }
            Op::Upsample2x(a) => {
                let a = *a;
                let g4 = as4(g);
                let (b, c, h2, w2) = g4.dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let mut da = Array4::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                da[[bi, ci, y, x]] = g4[[bi, ci, 2 * y, 2 * x]]
                                    + g4[[bi, ci, 2 * y, 2 * x + 1]]
                                    + g4[[bi, ci, 2 * y + 1, 2 * x]]
                                    + g4[[bi, ci, 2 * y + 1, 2 * x + 1]];
                            }
                        }
                    }
                }
                self.accum(a, da.into_dyn());
            }
            Op::Concat { axis, parts } => {
                let axis = *axis;
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[axis];
                    let slice = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + len))
                        .to_owned();
                    offset += len;
                    self.accum(p, slice);
                }
            }
            Op::Reshape(a) => {
                let a = *a;
                let shape = self.nodes[a.0].value.raw_dim();
                let da = g.to_shape(shape).unwrap().to_owned();
                self.accum(a, da);
            }
            Op::SoftmaxCrossEntropy { logits, targets } => {
                let logits = *logits;
                let targets = targets.clone();
                let lv = as2(&self.nodes[logits.0].value);
                let (b, k) = lv.dim();
                let gs = g.iter().next().copied().unwrap();
                let mut da = Array2::zeros((b, k));
                for (r, &t) in targets.iter().enumerate() {
                    let row = lv.row(r);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - m).exp()).sum();
                    for c in 0..k {
                        let p = (row[c] - m).exp() / denom;
                        da[[r, c]] = gs * (p - if c == t { 1.0 } else { 0.0 }) / b as f64;
                    }
                }
                self.accum(logits, da.into_dyn());
            }
            Op::Custom { inputs, op: _ } => {
                // Move the op out temporarily to satisfy the borrow checker.
                let inputs = inputs.clone();
                let op = std::mem::replace(
                    &mut self.nodes[i].op,
                    Op::Custom {
                        inputs: inputs.clone(),
                        op: Box::new(NoopCustom),
                    },
                );
                let Op::Custom { op, .. } = op else { unreachable!() };
                let input_vals: Vec<&Arr> = inputs.iter().map(|p| &self.nodes[p.0].value).collect();
                let deltas = op.backward(&input_vals, &self.nodes[i].value, g);
                assert_eq!(deltas.len(), inputs.len());
                self.nodes[i].op = Op::Custom {
                    inputs: inputs.clone(),
                    op,
                };
                for (p, d) in inputs.iter().zip(deltas) {
                    self.accum(*p, d);
                }
            }
        }
    }
}

struct NoopCustom;
impl CustomOp for NoopCustom {
    fn backward(&self, _: &[&Arr], _: &Arr, _: &Arr) -> Vec<Arr> {
        unreachable!("placeholder op")
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<ndarray::Ix2>().expect("2-d value")
}

fn as4(a: &Arr) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<ndarray::Ix4>().expect("4-d value")
}

/// Row-major im2col: rows indexed by (batch, oy, ox), columns by (ci, ky, kx).
fn im2col(
    x: &ndarray::ArrayView4<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (b, ci, h, w) = x.dim();
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(w, kw, stride, pad);
    let mut cols = Array2::zeros((b * oh * ow, ci * kh * kw));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().unwrap();
    let cs = cols.as_slice_mut().unwrap();
    let ncols = ci * kh * kw;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh) + oy) * ow + ox;
                let rbase = row * ncols;
                for c in 0..ci {
                    let xbase = (bi * ci + c) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let cbase = rbase + (c * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[cbase + kx] = xs[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcols: &Array2<f64>,
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let oh = conv_out(h, kh, stride, pad);
    let ow = conv_out(w, kw, stride, pad);
    let mut dx = Array4::zeros((b, ci, h, w));
    let ds = dcols.as_slice().unwrap();
    let xs = dx.as_slice_mut().unwrap();
    let ncols = ci * kh * kw;
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh) + oy) * ow + ox;
                let rbase = row * ncols;
                for c in 0..ci {
                    let xbase = (bi * ci + c) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * w;
                        let cbase = rbase + (c * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            xs[xrow + ix as usize] += ds[cbase + kx];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Row-wise softmax as a plain function (no tape), for inference heads.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn fd_check<F>(mut f: F, x0: &mut [f64], tol_rel: f64)
    where
        F: FnMut(&[f64]) -> (f64, Vec<f64>),
    {
        let (_, grad) = f(x0);
        let eps = 1e-6;
        // Central differences carry ~|f|*1e-10 of rounding noise, hence the
        // absolute floor alongside the relative bound.
        let tol_abs = 1e-7;
        for i in 0..x0.len() {
            let orig = x0[i];
            x0[i] = orig + eps;
            let (fp, _) = f(x0);
            x0[i] = orig - eps;
            let (fm, _) = f(x0);
            x0[i] = orig;
            let num = (fp - fm) / (2.0 * eps);
            let scale = num.abs().max(grad[i].abs());
            assert!(
                (num - grad[i]).abs() < tol_abs + tol_rel * scale,
                "grad mismatch at {i}: analytic {} vs numeric {}",
                grad[i],
                num
            );
        }
    }

    #[test]
    fn conv_matches_finite_differences() {
        let mut x0: Vec<f64> = (0..2 * 2 * 4 * 4).map(|i| ((i * 37 % 17) as f64 - 8.0) / 9.0).collect();
        let w0: Vec<f64> = (0..3 * 2 * 3 * 3).map(|i| ((i * 29 % 13) as f64 - 6.0) / 7.0).collect();
        let f = |xs: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf(
                Arr::from_shape_vec(IxDyn(&[2, 2, 4, 4]), xs.to_vec()).unwrap(),
                true,
            );
            let w = t.leaf(
                Arr::from_shape_vec(IxDyn(&[3, 2, 3, 3]), w0.clone()).unwrap(),
                true,
            );
            let y = t.conv2d(x, w, 2, 1);
            let y = t.relu(y);
            let loss = t.mean_all(y);
            t.backward(loss);
            let g = t.grad(x).into_raw_vec_and_offset().0;
            (t.scalar(loss), g)
        };
        fd_check(f, &mut x0, 1e-6);
    }

    #[test]
    fn conv_weight_grad_matches_finite_differences() {
        let x0: Vec<f64> = (0..1 * 2 * 5 * 5).map(|i| ((i * 31 % 19) as f64 - 9.0) / 11.0).collect();
        let mut w0: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| ((i * 23 % 11) as f64 - 5.0) / 6.0).collect();
        let f = |ws: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf(
                Arr::from_shape_vec(IxDyn(&[1, 2, 5, 5]), x0.clone()).unwrap(),
                false,
            );
            let w = t.leaf(
                Arr::from_shape_vec(IxDyn(&[2, 2, 3, 3]), ws.to_vec()).unwrap(),
                true,
            );
            let y = t.conv2d(x, w, 1, 1);
            let y = t.sigmoid(y);
            let loss = t.mean_all(y);
            t.backward(loss);
            let g = t.grad(w).into_raw_vec_and_offset().0;
            (t.scalar(loss), g)
        };
        fd_check(f, &mut w0, 1e-6);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // matmul + bias + activations + concat + upsample + abs/sqrt mix
        let mut x0: Vec<f64> = (0..12).map(|i| (i as f64) * 0.13 - 0.7).collect();
        let f = |xs: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf(
                Arr::from_shape_vec(IxDyn(&[3, 4]), xs.to_vec()).unwrap(),
                true,
            );
            let w = t.constant(
                arr2(&[
                    [0.3, -0.2],
                    [0.11, 0.7],
                    [-0.45, 0.5],
                    [0.9, -0.13],
                ])
                .into_dyn(),
            );
            let b = t.constant(arr1(&[0.05, -0.02]).into_dyn());
            let y = t.matmul(x, w);
            let y = t.add_bias_row(y, b);
            let y1 = t.relu(y);
            let y2 = t.sigmoid(y);
            let y = t.concat(1, &[y1, y2]);
            let y = t.abs(y);
            let m = t.mean_all(y);
            let loss = t.sqrt(m);
            t.backward(loss);
            (t.scalar(loss), t.grad(x).into_raw_vec_and_offset().0)
        };
        fd_check(f, &mut x0, 1e-6);
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let mut l0: Vec<f64> = vec![0.3, -0.1, 0.9, -0.4, 0.2, 0.05];
        let f = |ls: &[f64]| {
            let mut t = Tape::new();
            let logits = t.leaf(
                Arr::from_shape_vec(IxDyn(&[2, 3]), ls.to_vec()).unwrap(),
                true,
            );
            let loss = t.softmax_cross_entropy(logits, vec![2, 0]);
            t.backward(loss);
            (t.scalar(loss), t.grad(logits).into_raw_vec_and_offset().0)
        };
        fd_check(f, &mut l0, 1e-6);
    }

    #[test]
    fn upsample_round_trip_grad() {
        let mut x0: Vec<f64> = (0..8).map(|i| i as f64 * 0.21 - 0.4).collect();
        let f = |xs: &[f64]| {
            let mut t = Tape::new();
            let x = t.leaf(
                Arr::from_shape_vec(IxDyn(&[1, 2, 2, 2]), xs.to_vec()).unwrap(),
                true,
            );
            let y = t.upsample2x(x);
            let y = t.mul(y, y);
            let loss = t.mean_all(y);
            t.backward(loss);
            (t.scalar(loss), t.grad(x).into_raw_vec_and_offset().0)
        };
        fd_check(f, &mut x0, 1e-6);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = arr2(&[[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]]);
        let p = softmax_rows(&logits);
        for row in p.outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }
}
