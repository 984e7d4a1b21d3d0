//! The tape. Operations append nodes and evaluate eagerly; [`Graph::grad`]
//! emits vector-Jacobian products as fresh nodes, so gradients of gradients
//! are ordinary taped computations.

use crate::conv::{self, ConvGeom};
use ndarray::{ArrayD, Axis, IxDyn, Slice};

pub type Tensor = ArrayD<f64>;

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    LeakyRelu(NodeId, f64),
    ClampMin(NodeId, f64),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Conv { x: NodeId, w: NodeId, geom: ConvGeom },
    ConvInputGrad { gy: NodeId, w: NodeId, geom: ConvGeom },
    ConvWGrad { x: NodeId, gy: NodeId, geom: ConvGeom },
    AddChanBias { x: NodeId, b: NodeId },
    AddRowBias { x: NodeId, b: NodeId },
    SumAll(NodeId),
    SumKeep(NodeId, Vec<usize>),
    BroadcastTo(NodeId),
    Reshape(NodeId),
    Concat(Vec<NodeId>, usize),
    Slice { x: NodeId, axis: usize, start: usize, len: usize },
    PadAxis { x: NodeId, axis: usize, before: usize },
}

impl Op {
    fn parents(&self, out: &mut Vec<NodeId>) {
        out.clear();
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => out.extend([*a, *b]),
            Op::Neg(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::LeakyRelu(a, _)
            | Op::ClampMin(a, _)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::SumAll(a)
            | Op::SumKeep(a, _)
            | Op::BroadcastTo(a)
            | Op::Reshape(a) => out.push(*a),
            Op::MatMul { a, b, .. } => out.extend([*a, *b]),
            Op::Conv { x, w, .. } => out.extend([*x, *w]),
            Op::ConvInputGrad { gy, w, .. } => out.extend([*gy, *w]),
            Op::ConvWGrad { x, gy, .. } => out.extend([*x, *gy]),
            Op::AddChanBias { x, b } | Op::AddRowBias { x, b } => out.extend([*x, *b]),
            Op::Concat(parts, _) => out.extend(parts.iter().copied()),
            Op::Slice { x, .. } | Op::PadAxis { x, .. } => out.push(*x),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn ensure_std(t: Tensor) -> Tensor {
    if t.is_standard_layout() {
        t
    } else {
        t.as_standard_layout().into_owned()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Extract a single-element node as f64. Panics on non-scalar nodes.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        assert_eq!(v.len(), 1, "scalar() on a node with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    // ---- leaves ------------------------------------------------------------

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(ensure_std(t), Op::Leaf)
    }

    pub fn scalar_input(&mut self, v: f64) -> NodeId {
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::Leaf)
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(self.val(a).shape(), self.val(b).shape(), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "add");
        let v = self.val(a) + self.val(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "sub");
        let v = self.val(a) - self.val(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "mul");
        let v = self.val(a) * self.val(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.same_shape(a, b, "div");
        let v = self.val(a) / self.val(b);
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.val(a).mapv(stable_sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.val(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> NodeId {
        let v = self.val(a).mapv(|x| x.max(floor));
        self.push(v, Op::ClampMin(a, floor))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.val(a).mapv(|x| k * x);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.val(a).mapv(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    // ---- linear algebra ----------------------------------------------------

    /// `op(a) . op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let av = self.val(a);
        let bv = self.val(b);
        assert_eq!(av.ndim(), 2, "matmul lhs must be rank 2");
        assert_eq!(bv.ndim(), 2, "matmul rhs must be rank 2");
        let a2 = av.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b2 = bv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let c = match (ta, tb) {
            (false, false) => conv::matmul_view(a2, b2),
            (true, false) => conv::matmul_view(a2.t(), b2),
            (false, true) => conv::matmul_view(a2, b2.t()),
            (true, true) => conv::matmul_view(a2.t(), b2.t()),
        };
        self.push(c.into_dyn(), Op::MatMul { a, b, ta, tb })
    }

    pub fn conv(&mut self, x: NodeId, w: NodeId, geom: ConvGeom) -> NodeId {
        let v = conv::conv_fwd(self.val(x), self.val(w), &geom);
        self.push(v, Op::Conv { x, w, geom })
    }

    /// Transposed convolution: maps from the geometry's small side to its
    /// large side. Doubles as the adjoint of [`Graph::conv`].
    pub fn conv_input_grad(&mut self, gy: NodeId, w: NodeId, geom: ConvGeom) -> NodeId {
        let v = conv::conv_input_grad(self.val(gy), self.val(w), &geom);
        self.push(v, Op::ConvInputGrad { gy, w, geom })
    }

    pub fn conv_wgrad(&mut self, x: NodeId, gy: NodeId, geom: ConvGeom) -> NodeId {
        let v = conv::conv_wgrad(self.val(x), self.val(gy), &geom);
        self.push(v, Op::ConvWGrad { x, gy, geom })
    }

    /// `x [n,c,h,w] + b [c]`, b broadcast over batch and space.
    pub fn add_chan_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = self.val(x);
        let bv = self.val(b);
        assert_eq!(xv.ndim(), 4, "chan bias input must be rank 4");
        assert_eq!(bv.shape(), [xv.shape()[1]], "chan bias length mismatch");
        let mut v = xv.clone();
        let c = bv.as_slice().unwrap();
        let (n, nc, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let vs = v.as_slice_mut().unwrap();
        let plane = h * w;
        for i in 0..n {
            for (ch, &bias) in c.iter().enumerate().take(nc) {
                let base = (i * nc + ch) * plane;
                for p in 0..plane {
                    vs[base + p] += bias;
                }
            }
        }
        self.push(v, Op::AddChanBias { x, b })
    }

    /// `x [n,k] + b [k]`, b broadcast over rows.
    pub fn add_row_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xv = self.val(x);
        let bv = self.val(b);
        assert_eq!(xv.ndim(), 2, "row bias input must be rank 2");
        assert_eq!(bv.shape(), [xv.shape()[1]], "row bias length mismatch");
        let v = xv + &bv.view().insert_axis(Axis(0));
        self.push(ensure_std(v), Op::AddRowBias { x, b })
    }

    // ---- shape and reduction -----------------------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.val(a).sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.val(a).len();
        assert!(n > 0, "mean of empty tensor");
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axes` keeping them as size-1 dimensions. Axes must be
    /// strictly increasing.
    pub fn sum_keep(&mut self, a: NodeId, axes: &[usize]) -> NodeId {
        assert!(axes.windows(2).all(|w| w[0] < w[1]), "axes must be strictly increasing");
        let mut v = self.val(a).clone();
        for &ax in axes.iter().rev() {
            v = v.sum_axis(Axis(ax));
        }
        for &ax in axes.iter() {
            v = v.insert_axis(Axis(ax));
        }
        self.push(ensure_std(v), Op::SumKeep(a, axes.to_vec()))
    }

    /// Expand size-1 dimensions to `shape`. Ranks must match.
    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let av = self.val(a);
        assert_eq!(av.ndim(), shape.len(), "broadcast rank mismatch");
        for (i, (&have, &want)) in av.shape().iter().zip(shape).enumerate() {
            assert!(have == want || have == 1, "axis {i}: cannot broadcast {have} to {want}");
        }
        let v = av.broadcast(IxDyn(shape)).unwrap().to_owned();
        self.push(ensure_std(v), Op::BroadcastTo(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .val(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count mismatch");
        self.push(v, Op::Reshape(a))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        assert!(!parts.is_empty());
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
        let v = conv::concat_std(&tensors, axis);
        self.push(v, Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice_axis(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let xv = self.val(x);
        assert!(start + len <= xv.shape()[axis], "slice out of range");
        let v = xv
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(ensure_std(v), Op::Slice { x, axis, start, len })
    }

    pub fn pad_axis(&mut self, x: NodeId, axis: usize, before: usize, after: usize) -> NodeId {
        let xv = self.val(x);
        let mut shape = xv.shape().to_vec();
        shape[axis] += before + after;
        let mut v = ArrayD::<f64>::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(axis), Slice::from(before..before + xv.shape()[axis]))
            .assign(xv);
        self.push(v, Op::PadAxis { x, axis, before })
    }

    // ---- differentiation ---------------------------------------------------

    /// Reverse-mode gradient of the single-element node `out` with respect to
    /// each node in `wrt`. Returns one entry per requested node; `None` means
    /// `out` does not depend on it (gradient identically zero).
    ///
    /// The returned gradients are graph nodes, so they can feed further taped
    /// computation, including another `grad` call (second-order derivatives).
    pub fn grad(&mut self, out: NodeId, wrt: &[NodeId]) -> Vec<Option<NodeId>> {
        assert_eq!(self.val(out).len(), 1, "grad target must be a single-element node");
        let horizon = out.0 + 1;

        // A node matters only if it transitively consumes one of the wrt
        // nodes; everything else gets pruned from the backward sweep.
        let mut reach = vec![false; horizon];
        for w in wrt {
            if w.0 < horizon {
                reach[w.0] = true;
            }
        }
        let mut parents = Vec::with_capacity(4);
        for i in 0..horizon {
            if reach[i] {
                continue;
            }
            self.nodes[i].op.parents(&mut parents);
            if parents.iter().any(|p| reach[p.0]) {
                reach[i] = true;
            }
        }

        let mut grads: Vec<Option<NodeId>> = vec![None; horizon];
        if reach[out.0] {
            let seed_shape = self.val(out).raw_dim();
            let seed = self.input(Tensor::ones(seed_shape));
            grads[out.0] = Some(seed);
            for i in (0..horizon).rev() {
                let Some(g) = grads[i] else { continue };
                let op = self.nodes[i].op.clone();
                self.backprop_one(NodeId(i), g, &op, &reach, &mut grads);
            }
        }
        wrt.iter()
            .map(|w| if w.0 < horizon { grads[w.0] } else { None })
            .collect()
    }

    /// Like [`Graph::grad`] but materializes zeros for absent dependencies.
    pub fn grad_full(&mut self, out: NodeId, wrt: &[NodeId]) -> Vec<NodeId> {
        self.grad(out, wrt)
            .into_iter()
            .zip(wrt)
            .map(|(g, w)| g.unwrap_or_else(|| {
                let z = Tensor::zeros(self.val(*w).raw_dim());
                self.input(z)
            }))
            .collect()
    }

    fn accum(&mut self, grads: &mut [Option<NodeId>], reach: &[bool], p: NodeId, contrib: impl FnOnce(&mut Self) -> NodeId) {
        if !reach[p.0] {
            return;
        }
        let c = contrib(self);
        grads[p.0] = Some(match grads[p.0] {
            None => c,
            Some(prev) => self.add(prev, c),
        });
    }

    fn backprop_one(&mut self, node: NodeId, g: NodeId, op: &Op, reach: &[bool], grads: &mut [Option<NodeId>]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, reach, a, |_| g);
                self.accum(grads, reach, b, |_| g);
            }
            Op::Sub(a, b) => {
                self.accum(grads, reach, a, |_| g);
                self.accum(grads, reach, b, |s| s.neg(g));
            }
            Op::Mul(a, b) => {
                self.accum(grads, reach, a, |s| s.mul(g, b));
                self.accum(grads, reach, b, |s| s.mul(g, a));
            }
            Op::Div(a, b) => {
                self.accum(grads, reach, a, |s| s.div(g, b));
                self.accum(grads, reach, b, |s| {
                    let q = s.div(g, b);
                    let qn = s.mul(q, node);
                    s.neg(qn)
                });
            }
            Op::Neg(a) => self.accum(grads, reach, a, |s| s.neg(g)),
            Op::Exp(a) => self.accum(grads, reach, a, |s| s.mul(g, node)),
            Op::Ln(a) => self.accum(grads, reach, a, |s| s.div(g, a)),
            Op::Sqrt(a) => self.accum(grads, reach, a, |s| {
                let h = s.scale(g, 0.5);
                s.div(h, node)
            }),
            Op::Tanh(a) => self.accum(grads, reach, a, |s| {
                let t2 = s.mul(node, node);
                let nt2 = s.neg(t2);
                let d = s.add_scalar(nt2, 1.0);
                s.mul(g, d)
            }),
            Op::Sigmoid(a) => self.accum(grads, reach, a, |s| {
                let no = s.neg(node);
                let om = s.add_scalar(no, 1.0);
                let d = s.mul(node, om);
                s.mul(g, d)
            }),
            Op::LeakyRelu(a, slope) => self.accum(grads, reach, a, |s| {
                let mask = s.val(a).mapv(|x| if x > 0.0 { 1.0 } else { slope });
                let m = s.input(mask);
                s.mul(g, m)
            }),
            Op::ClampMin(a, floor) => self.accum(grads, reach, a, |s| {
                let mask = s.val(a).mapv(|x| if x >= floor { 1.0 } else { 0.0 });
                let m = s.input(mask);
                s.mul(g, m)
            }),
            Op::Scale(a, k) => self.accum(grads, reach, a, |s| s.scale(g, k)),
            Op::AddScalar(a) => self.accum(grads, reach, a, |_| g),
            Op::MatMul { a, b, ta, tb } => {
                match (ta, tb) {
                    (false, false) => {
                        self.accum(grads, reach, a, |s| s.matmul(g, b, false, true));
                        self.accum(grads, reach, b, |s| s.matmul(a, g, true, false));
                    }
                    (true, false) => {
                        self.accum(grads, reach, a, |s| s.matmul(b, g, false, true));
                        self.accum(grads, reach, b, |s| s.matmul(a, g, false, false));
                    }
                    (false, true) => {
                        self.accum(grads, reach, a, |s| s.matmul(g, b, false, false));
                        self.accum(grads, reach, b, |s| s.matmul(g, a, true, false));
                    }
                    (true, true) => {
                        self.accum(grads, reach, a, |s| s.matmul(b, g, true, true));
                        self.accum(grads, reach, b, |s| s.matmul(g, a, true, true));
                    }
                }
            }
            Op::Conv { x, w, geom } => {
                self.accum(grads, reach, x, |s| s.conv_input_grad(g, w, geom));
                self.accum(grads, reach, w, |s| s.conv_wgrad(x, g, geom));
            }
            Op::ConvInputGrad { gy, w, geom } => {
                self.accum(grads, reach, gy, |s| s.conv(g, w, geom));
                self.accum(grads, reach, w, |s| s.conv_wgrad(g, gy, geom));
            }
            Op::ConvWGrad { x, gy, geom } => {
                self.accum(grads, reach, x, |s| s.conv_input_grad(gy, g, geom));
                self.accum(grads, reach, gy, |s| s.conv(x, g, geom));
            }
            Op::AddChanBias { x, b } => {
                self.accum(grads, reach, x, |_| g);
                self.accum(grads, reach, b, |s| {
                    let c = s.val(b).shape()[0];
                    let sk = s.sum_keep(g, &[0, 2, 3]);
                    s.reshape(sk, &[c])
                });
            }
            Op::AddRowBias { x, b } => {
                self.accum(grads, reach, x, |_| g);
                self.accum(grads, reach, b, |s| {
                    let c = s.val(b).shape()[0];
                    let sk = s.sum_keep(g, &[0]);
                    s.reshape(sk, &[c])
                });
            }
            Op::SumAll(a) => self.accum(grads, reach, a, |s| {
                let shape = s.val(a).shape().to_vec();
                if shape.is_empty() {
                    g
                } else {
                    let ones_rank = vec![1usize; shape.len()];
                    let r = s.reshape(g, &ones_rank);
                    s.broadcast_to(r, &shape)
                }
            }),
            Op::SumKeep(a, ref _axes) => self.accum(grads, reach, a, |s| {
                let shape = s.val(a).shape().to_vec();
                s.broadcast_to(g, &shape)
            }),
            Op::BroadcastTo(a) => self.accum(grads, reach, a, |s| {
                let ashape = s.val(a).shape().to_vec();
                let gshape = s.val(g).shape().to_vec();
                let axes: Vec<usize> = ashape
                    .iter()
                    .zip(&gshape)
                    .enumerate()
                    .filter(|(_, (&ad, &gd))| ad == 1 && gd != 1)
                    .map(|(i, _)| i)
                    .collect();
                if axes.is_empty() {
                    g
                } else {
                    s.sum_keep(g, &axes)
                }
            }),
            Op::Reshape(a) => self.accum(grads, reach, a, |s| {
                let shape = s.val(a).shape().to_vec();
                s.reshape(g, &shape)
            }),
            Op::Concat(ref parts, axis) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.val(p).shape()[axis];
                    self.accum(grads, reach, p, |s| s.slice_axis(g, axis, offset, len));
                    offset += len;
                }
            }
            Op::Slice { x, axis, start, len } => self.accum(grads, reach, x, |s| {
                let total = s.val(x).shape()[axis];
                s.pad_axis(g, axis, start, total - start - len)
            }),
            Op::PadAxis { x, axis, before } => self.accum(grads, reach, x, |s| {
                let len = s.val(x).shape()[axis];
                s.slice_axis(g, axis, before, len)
            }),
        }
    }
}
