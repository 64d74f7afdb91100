//! Reverse-mode automatic differentiation on a flat expression arena.
//!
//! Backward passes are themselves built out of graph operations, so a
//! gradient produced by [`Graph::backward_vars`] is an ordinary node that can
//! be fed into further expressions and differentiated again. That is exactly
//! what the gradient-penalty term needs: the penalty is a function of the
//! critic's input gradient, and its parameter gradient requires
//! differentiating through that first backward pass.
//!
//! The arena is rebuilt every optimizer step; parameters live in the layers
//! and enter the graph as leaves via `leaf`/`constant`.

use std::sync::Arc;

use ndarray::{ArrayD, Axis, Ix2, Ix4, IxDyn};
use ndarray::linalg::general_mat_mul;

use crate::conv::{conv2d, conv2d_bwd_data, conv2d_bwd_filter, ConvSpec};
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf { requires_grad: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var, f64),
    MulScalar(Var, f64),
    Sqrt(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Reshape(Var),
    SumAll(Var),
    BroadcastFull(Var),
    SumPerSample(Var),
    BroadcastPerSample(Var),
    SumToChan(Var),
    ChanBroadcast(Var),
    ChanBiasAdd(Var, Var),
    SumRows(Var),
    RowBiasAdd(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    ConvFwd { x: Var, w: Var, spec: ConvSpec },
    ConvBwdData { dy: Var, w: Var, spec: ConvSpec, in_hw: (usize, usize) },
    ConvBwdFilter { dy: Var, x: Var, spec: ConvSpec, khw: (usize, usize) },
    CrossEntropy { logits: Var, labels: Arc<Vec<usize>> },
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    op: Op,
    needs_grad: bool,
}

/// Expression arena with eager evaluation and replayable backward.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node. Cheap view; clone if it must outlive the graph.
    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> T {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        *val.iter().next().unwrap()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Leaf { requires_grad } => *requires_grad,
            other => self.parents_of(other).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn parents_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::ChanBiasAdd(a, b)
            | Op::RowBiasAdd(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::BroadcastFull(a)
            | Op::SumPerSample(a)
            | Op::BroadcastPerSample(a)
            | Op::SumToChan(a)
            | Op::ChanBroadcast(a)
            | Op::SumRows(a) => vec![*a],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::ConvFwd { x, w, .. } => vec![*x, *w],
            Op::ConvBwdData { dy, w, .. } => vec![*dy, *w],
            Op::ConvBwdFilter { dy, x, .. } => vec![*dy, *x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    // ---- leaves ------------------------------------------------------

    /// Differentiable leaf (parameter or tracked input).
    pub fn leaf(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf { requires_grad: true })
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.push(value, Op::Leaf { requires_grad: false })
    }

    pub fn constant_scalar(&mut self, v: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        self.push(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let cs = T::from_f64(c);
        let v = self.nodes[a.0].value.mapv(|x| x + cs);
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let cs = T::from_f64(c);
        let v = self.nodes[a.0].value.mapv(|x| x * cs);
        self.push(v, Op::MulScalar(a, c))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.sqrt());
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let v = self.nodes[a.0].value.mapv(|x| if x > T::zero() { x } else { x * s });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    // ---- shape / reduction --------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Broadcast a scalar node to an arbitrary shape.
    pub fn broadcast_full(&mut self, a: Var, shape: &[usize]) -> Var {
        let s = self.scalar_value(a);
        self.push(ArrayD::from_elem(IxDyn(shape), s), Op::BroadcastFull(a))
    }

    /// Sum everything except the leading (batch) axis: `(B, ...) -> (B,)`.
    pub fn sum_per_sample(&mut self, a: Var) -> Var {
        let val = &self.nodes[a.0].value;
        let b = val.shape()[0];
        let flat = val.view().into_shape_with_order((b, val.len() / b)).unwrap();
        let sums: Vec<T> = flat.axis_iter(Axis(0)).map(|row| row.sum()).collect();
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[b]), sums).unwrap(),
            Op::SumPerSample(a),
        )
    }

    /// Broadcast a `(B,)` node across each sample of a `(B, ...)` shape.
    pub fn broadcast_per_sample(&mut self, a: Var, shape: &[usize]) -> Var {
        let val = &self.nodes[a.0].value;
        let b = shape[0];
        assert_eq!(val.shape(), &[b], "broadcast_per_sample: expected (B,)");
        let inner: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(b * inner);
        for s in val.iter() {
            data.extend(std::iter::repeat(*s).take(inner));
        }
        self.push(
            ArrayD::from_shape_vec(IxDyn(shape), data).unwrap(),
            Op::BroadcastPerSample(a),
        )
    }

    /// Sum a `(B, C, H, W)` node over batch and space: result `(C,)`.
    pub fn sum_to_chan(&mut self, a: Var) -> Var {
        let val = &self.nodes[a.0].value;
        let d = val.shape();
        assert_eq!(d.len(), 4, "sum_to_chan expects (B,C,H,W)");
        let c = d[1];
        let mut out = vec![T::zero(); c];
        let v4 = val.view().into_dimensionality::<Ix4>().unwrap();
        for bi in 0..d[0] {
            for ci in 0..c {
                out[ci] = out[ci] + v4.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum();
            }
        }
        self.push(ArrayD::from_shape_vec(IxDyn(&[c]), out).unwrap(), Op::SumToChan(a))
    }

    /// Broadcast a `(C,)` node over a `(B, C, H, W)` shape.
    pub fn chan_broadcast(&mut self, a: Var, shape: &[usize]) -> Var {
        let val = &self.nodes[a.0].value;
        assert_eq!(shape.len(), 4);
        assert_eq!(val.shape(), &[shape[1]]);
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let mut data = Vec::with_capacity(b * c * h * w);
        for _ in 0..b {
            for ci in 0..c {
                data.extend(std::iter::repeat(val[[ci]]).take(h * w));
            }
        }
        self.push(
            ArrayD::from_shape_vec(IxDyn(shape), data).unwrap(),
            Op::ChanBroadcast(a),
        )
    }

    /// `(B,C,H,W) + bias[C]` per channel.
    pub fn chan_bias_add(&mut self, x: Var, b: Var) -> Var {
        let bias = self.nodes[b.0].value.clone();
        let xv = &self.nodes[x.0].value;
        let mut v = xv.clone();
        let mut v4 = v.view_mut().into_dimensionality::<Ix4>().unwrap();
        for mut sample in v4.axis_iter_mut(Axis(0)) {
            for (ci, mut plane) in sample.axis_iter_mut(Axis(0)).enumerate() {
                let bc = bias[[ci]];
                plane.mapv_inplace(|x| x + bc);
            }
        }
        self.push(v, Op::ChanBiasAdd(x, b))
    }

    /// Sum a `(B, K)` node over rows: result `(K,)`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v2 = self.nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("sum_rows expects (B,K)");
        let out = v2.sum_axis(Axis(0));
        self.push(out.into_dyn(), Op::SumRows(a))
    }

    /// `(B,K) + bias[K]` per row.
    pub fn row_bias_add(&mut self, x: Var, b: Var) -> Var {
        let bias = self.nodes[b.0].value.clone();
        let xv = &self.nodes[x.0].value;
        let mut v = xv.clone();
        {
            let mut v2 = v.view_mut().into_dimensionality::<Ix2>().unwrap();
            for mut row in v2.axis_iter_mut(Axis(0)) {
                for (k, cell) in row.iter_mut().enumerate() {
                    *cell = *cell + bias[[k]];
                }
            }
        }
        self.push(v, Op::RowBiasAdd(x, b))
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let ae = if ta { av.t() } else { av.view() };
        let be = if tb { bv.t() } else { bv.view() };
        let mut out = ndarray::Array2::<T>::zeros((ae.shape()[0], be.shape()[1]));
        general_mat_mul(T::one(), &ae, &be, T::zero(), &mut out);
        self.push(out.into_dyn(), Op::MatMul { a, b, ta, tb })
    }

    // ---- convolution -----------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let y = conv2d(&xv.view(), &wv.view(), None, &spec);
        self.push(y.into_dyn(), Op::ConvFwd { x, w, spec })
    }

    /// Transposed convolution: `bwd_data` applied to the input, with weight
    /// layout `(c_in, c_out, kh, kw)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (kh, kw) = (wv.shape()[2], wv.shape()[3]);
        let oh = spec.transpose_out_dim(xv.shape()[2], kh);
        let ow = spec.transpose_out_dim(xv.shape()[3], kw);
        let y = conv2d_bwd_data(&xv.view(), &wv.view(), &spec, (oh, ow));
        self.push(
            y.into_dyn(),
            Op::ConvBwdData { dy: x, w, spec, in_hw: (oh, ow) },
        )
    }

    fn conv_bwd_data_node(&mut self, dy: Var, w: Var, spec: ConvSpec, in_hw: (usize, usize)) -> Var {
        let dyv = self.nodes[dy.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let y = conv2d_bwd_data(&dyv.view(), &wv.view(), &spec, in_hw);
        self.push(y.into_dyn(), Op::ConvBwdData { dy, w, spec, in_hw })
    }

    fn conv_bwd_filter_node(&mut self, dy: Var, x: Var, spec: ConvSpec, khw: (usize, usize)) -> Var {
        let dyv = self.nodes[dy.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let y = conv2d_bwd_filter(&dyv.view(), &xv.view(), &spec, khw);
        self.push(y.into_dyn(), Op::ConvBwdFilter { dy, x, spec, khw })
    }

    // ---- losses -----------------------------------------------------------

    /// Mean softmax cross-entropy over the batch; `logits` is `(B, K)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.nodes[logits.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let (b, k) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(labels.len(), b, "cross_entropy: label count mismatch");
        assert!(labels.iter().all(|&l| l < k), "cross_entropy: label out of range");
        let mut total = T::zero();
        for (row, &label) in lv.axis_iter(Axis(0)).zip(labels) {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let logsum = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total = total + (logsum - row[label]);
        }
        let mean = total / T::from_usize(b);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), mean),
            Op::CrossEntropy {
                logits,
                labels: Arc::new(labels.to_vec()),
            },
        )
    }

    // ---- autodiff -----------------------------------------------------------

    /// Gradients of `out` with respect to `wrt`, as graph nodes.
    ///
    /// The returned vars participate in the graph like any other node and can
    /// be differentiated again. Vars whose gradient is identically absent
    /// (no path from `out`) come back as `None`.
    pub fn backward_vars(&mut self, out: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        let horizon = out.0 + 1;
        let mut adjoint: Vec<Option<Var>> = vec![None; horizon];
        let seed_shape = self.nodes[out.0].value.shape().to_vec();
        let seed = self.constant(ArrayD::from_elem(IxDyn(&seed_shape), T::one()));
        adjoint[out.0] = Some(seed);

        for i in (0..horizon).rev() {
            let Some(grad) = adjoint[i] else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let contributions = self.vjp(Var(i), &op, grad);
            for (parent, contrib) in contributions {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                adjoint[parent.0] = Some(match adjoint[parent.0] {
                    Some(existing) => self.add(existing, contrib),
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|v| {
                if v.0 < horizon {
                    adjoint[v.0]
                } else {
                    None
                }
            })
            .collect()
    }

    /// Gradient values of `out` with respect to `wrt` (zeros when absent).
    pub fn backward(&mut self, out: Var, wrt: &[Var]) -> Vec<ArrayD<T>> {
        let vars = self.backward_vars(out, wrt);
        vars.into_iter()
            .zip(wrt)
            .map(|(g, v)| match g {
                Some(gv) => self.nodes[gv.0].value.clone(),
                None => ArrayD::zeros(self.nodes[v.0].value.raw_dim()),
            })
            .collect()
    }

    /// Vector-Jacobian product of one node: contributions to each parent.
    fn vjp(&mut self, node: Var, op: &Op, grad: Var) -> Vec<(Var, Var)> {
        match op {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b) => vec![(*a, grad), (*b, grad)],
            Op::Sub(a, b) => {
                let nb = self.neg(grad);
                vec![(*a, grad), (*b, nb)]
            }
            Op::Mul(a, b) => {
                let ga = self.mul(grad, *b);
                let gb = self.mul(grad, *a);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Div(a, b) => {
                // d(a/b) = da/b - a*db/b^2
                let ga = self.div(grad, *b);
                let q = self.div(node, *b);
                let gq = self.mul(grad, q);
                let gb = self.neg(gq);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Neg(a) => {
                let g = self.neg(grad);
                vec![(*a, g)]
            }
            Op::AddScalar(a, _) => vec![(*a, grad)],
            Op::MulScalar(a, c) => {
                let g = self.mul_scalar(grad, *c);
                vec![(*a, g)]
            }
            Op::Sqrt(a) => {
                // d sqrt(x) = g / (2 sqrt(x))
                let twice = self.mul_scalar(node, 2.0);
                let g = self.div(grad, twice);
                vec![(*a, g)]
            }
            Op::Relu(a) => {
                let mask = self.nodes[a.0]
                    .value
                    .mapv(|x| if x > T::zero() { T::one() } else { T::zero() });
                let m = self.constant(mask);
                let g = self.mul(grad, m);
                vec![(*a, g)]
            }
            Op::LeakyRelu(a, slope) => {
                let s = T::from_f64(*slope);
                let mask = self.nodes[a.0]
                    .value
                    .mapv(|x| if x > T::zero() { T::one() } else { s });
                let m = self.constant(mask);
                let g = self.mul(grad, m);
                vec![(*a, g)]
            }
            Op::Tanh(a) => {
                // d tanh = 1 - tanh^2; the factor is constant w.r.t. further
                // differentiation, which is fine: nothing downstream needs
                // second derivatives through tanh.
                let deriv = self.nodes[node.0].value.mapv(|y| T::one() - y * y);
                let d = self.constant(deriv);
                let g = self.mul(grad, d);
                vec![(*a, g)]
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let g = self.reshape(grad, &shape);
                vec![(*a, g)]
            }
            Op::SumAll(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let g = self.broadcast_full(grad, &shape);
                vec![(*a, g)]
            }
            Op::BroadcastFull(a) => {
                let g = self.sum_all(grad);
                vec![(*a, g)]
            }
            Op::SumPerSample(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let g = self.broadcast_per_sample(grad, &shape);
                vec![(*a, g)]
            }
            Op::BroadcastPerSample(a) => {
                let g = self.sum_per_sample(grad);
                vec![(*a, g)]
            }
            Op::SumToChan(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let g = self.chan_broadcast(grad, &shape);
                vec![(*a, g)]
            }
            Op::ChanBroadcast(a) => {
                let g = self.sum_to_chan(grad);
                vec![(*a, g)]
            }
            Op::ChanBiasAdd(x, b) => {
                let gb = self.sum_to_chan(grad);
                vec![(*x, grad), (*b, gb)]
            }
            Op::SumRows(a) => {
                // upstream (K,) broadcast back over rows
                let shape = self.nodes[a.0].value.shape().to_vec();
                let zeros = self.constant(ArrayD::zeros(IxDyn(&shape)));
                let g = self.row_bias_add(zeros, grad);
                vec![(*a, g)]
            }
            Op::RowBiasAdd(x, b) => {
                let gb = self.sum_rows(grad);
                vec![(*x, grad), (*b, gb)]
            }
            Op::MatMul { a, b, ta, tb } => {
                let ga = if !*ta {
                    self.matmul_t(grad, *b, false, !*tb)
                } else {
                    self.matmul_t(*b, grad, *tb, true)
                };
                let gb = if !*tb {
                    self.matmul_t(*a, grad, !*ta, false)
                } else {
                    self.matmul_t(grad, *a, true, *ta)
                };
                vec![(*a, ga), (*b, gb)]
            }
            Op::ConvFwd { x, w, spec } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let ks = self.nodes[w.0].value.shape().to_vec();
                let gx = self.conv_bwd_data_node(grad, *w, *spec, (xs[2], xs[3]));
                let gw = self.conv_bwd_filter_node(grad, *x, *spec, (ks[2], ks[3]));
                vec![(*x, gx), (*w, gw)]
            }
            Op::ConvBwdData { dy, w, spec, .. } => {
                let ks = self.nodes[w.0].value.shape().to_vec();
                let g_dy = self.conv2d(grad, *w, *spec);
                let g_w = self.conv_bwd_filter_node(*dy, grad, *spec, (ks[2], ks[3]));
                vec![(*dy, g_dy), (*w, g_w)]
            }
            Op::ConvBwdFilter { dy, x, spec, .. } => {
                let xs = self.nodes[x.0].value.shape().to_vec();
                let g_dy = self.conv2d(*x, grad, *spec);
                let g_x = self.conv_bwd_data_node(*dy, grad, *spec, (xs[2], xs[3]));
                vec![(*dy, g_dy), (*x, g_x)]
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.nodes[logits.0]
                    .value
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let (b, k) = (lv.shape()[0], lv.shape()[1]);
                let inv_b = T::one() / T::from_usize(b);
                let mut d = ndarray::Array2::<T>::zeros((b, k));
                for (i, (row, &label)) in lv.axis_iter(Axis(0)).zip(labels.iter()).enumerate() {
                    let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                    let exps: Vec<T> = row.iter().map(|&x| (x - max).exp()).collect();
                    let sum: T = exps.iter().cloned().sum();
                    for j in 0..k {
                        let p = exps[j] / sum;
                        let delta = if j == label { T::one() } else { T::zero() };
                        d[[i, j]] = (p - delta) * inv_b;
                    }
                }
                let dc = self.constant(d.into_dyn());
                let gfull = self.broadcast_full(grad, &[b, k]);
                let g = self.mul(gfull, dc);
                vec![(*logits, g)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff, max_rel_err};
    use crate::rng::DetRng;

    fn rand(rng: &mut DetRng, shape: &[usize]) -> ArrayD<f64> {
        rng.normal_array(shape)
    }

    /// Finite-difference check for a scalar-valued graph expression in one
    /// differentiable leaf.
    fn check_grad(
        build: impl Fn(&mut Graph<f64>, Var) -> Var,
        x0: &ArrayD<f64>,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = build(&mut g, x);
        let grads = g.backward(y, &[x]);
        let numeric = finite_diff(
            &mut |v: &ArrayD<f64>| {
                let mut g = Graph::new();
                let x = g.leaf(v.clone());
                let y = build(&mut g, x);
                g.scalar_value(y)
            },
            x0,
            1e-5,
        );
        let err = max_rel_err(&grads[0], &numeric);
        assert!(err < tol, "gradient mismatch: rel err {err}");
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let mut rng = DetRng::new(5, 0);
        let x0 = rand(&mut rng, &[3, 4]);

        check_grad(|g, x| { let y = g.tanh(x); g.mean_all(y) }, &x0, 1e-6);
        check_grad(|g, x| { let y = g.mul(x, x); let z = g.add_scalar(y, 0.7); g.mean_all(z) }, &x0, 1e-6);
        check_grad(
            |g, x| {
                let y = g.leaky_relu(x, 0.2);
                let z = g.mul_scalar(y, 3.0);
                g.mean_all(z)
            },
            &x0,
            1e-5,
        );
        let pos = x0.mapv(|v| v.abs() + 0.5);
        check_grad(|g, x| { let y = g.sqrt(x); g.sum_all(y) }, &pos, 1e-6);
        check_grad(
            |g, x| {
                let c = g.constant(ArrayD::from_elem(IxDyn(&[3, 4]), 1.5));
                let y = g.div(c, x);
                g.mean_all(y)
            },
            &pos,
            1e-6,
        );
    }

    #[test]
    fn reduction_grads_match_finite_differences() {
        let mut rng = DetRng::new(6, 0);
        let x0 = rand(&mut rng, &[2, 3, 4, 4]);
        check_grad(
            |g, x| {
                let s = g.sum_per_sample(x);
                let q = g.mul(s, s);
                g.mean_all(q)
            },
            &x0,
            1e-6,
        );
        check_grad(
            |g, x| {
                let c = g.sum_to_chan(x);
                let q = g.mul(c, c);
                g.sum_all(q)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let mut rng = DetRng::new(7, 0);
        let a0 = rand(&mut rng, &[3, 4]);
        let b0 = rand(&mut rng, &[4, 2]);
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            let a_shape = if ta { vec![4, 3] } else { vec![3, 4] };
            let b_shape = if tb { vec![2, 4] } else { vec![4, 2] };
            let a1 = rand(&mut rng, &a_shape);
            let b1 = rand(&mut rng, &b_shape);

            let mut g = Graph::new();
            let a = g.leaf(a1.clone());
            let b = g.leaf(b1.clone());
            let y = g.matmul_t(a, b, ta, tb);
            let loss = g.mean_all(y);
            let grads = g.backward(loss, &[a, b]);

            let na = finite_diff(
                &mut |v: &ArrayD<f64>| {
                    let mut g = Graph::new();
                    let a = g.leaf(v.clone());
                    let b = g.constant(b1.clone());
                    let y = g.matmul_t(a, b, ta, tb);
                    let loss = g.mean_all(y);
                    g.scalar_value(loss)
                },
                &a1,
                1e-6,
            );
            assert!(max_rel_err(&grads[0], &na) < 1e-6);

            let nb = finite_diff(
                &mut |v: &ArrayD<f64>| {
                    let mut g = Graph::new();
                    let a = g.constant(a1.clone());
                    let b = g.leaf(v.clone());
                    let y = g.matmul_t(a, b, ta, tb);
                    let loss = g.mean_all(y);
                    g.scalar_value(loss)
                },
                &b1,
                1e-6,
            );
            assert!(max_rel_err(&grads[1], &nb) < 1e-6);
        }
        let _ = (a0, b0);
    }

    #[test]
    fn conv_grads_match_finite_differences() {
        let mut rng = DetRng::new(8, 0);
        let spec = ConvSpec::new(2, 1);
        let x0 = rand(&mut rng, &[2, 2, 6, 6]);
        let w0 = rand(&mut rng, &[3, 2, 4, 4]);

        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let w = g.leaf(w0.clone());
        let y = g.conv2d(x, w, spec);
        let q = g.mul(y, y);
        let loss = g.mean_all(q);
        let grads = g.backward(loss, &[x, w]);

        let nx = finite_diff(
            &mut |v: &ArrayD<f64>| {
                let mut g = Graph::new();
                let x = g.leaf(v.clone());
                let w = g.constant(w0.clone());
                let y = g.conv2d(x, w, spec);
                let q = g.mul(y, y);
                let loss = g.mean_all(q);
                g.scalar_value(loss)
            },
            &x0,
            1e-6,
        );
        assert!(max_rel_err(&grads[0], &nx) < 1e-5, "{}", max_rel_err(&grads[0], &nx));

        let nw = finite_diff(
            &mut |v: &ArrayD<f64>| {
                let mut g = Graph::new();
                let x = g.constant(x0.clone());
                let w = g.leaf(v.clone());
                let y = g.conv2d(x, w, spec);
                let q = g.mul(y, y);
                let loss = g.mean_all(q);
                g.scalar_value(loss)
            },
            &w0,
            1e-6,
        );
        assert!(max_rel_err(&grads[1], &nw) < 1e-5);
    }

    #[test]
    fn conv_transpose_grads_match_finite_differences() {
        let mut rng = DetRng::new(9, 0);
        let spec = ConvSpec::new(2, 1);
        let x0 = rand(&mut rng, &[2, 3, 4, 4]);
        let w0 = rand(&mut rng, &[3, 2, 4, 4]); // (c_in, c_out, kh, kw)

        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let w = g.leaf(w0.clone());
        let y = g.conv_transpose2d(x, w, spec);
        assert_eq!(g.value(y).shape(), &[2, 2, 8, 8]);
        let q = g.mul(y, y);
        let loss = g.mean_all(q);
        let grads = g.backward(loss, &[x, w]);

        let nx = finite_diff(
            &mut |v: &ArrayD<f64>| {
                let mut g = Graph::new();
                let x = g.leaf(v.clone());
                let w = g.constant(w0.clone());
                let y = g.conv_transpose2d(x, w, spec);
                let q = g.mul(y, y);
                let loss = g.mean_all(q);
                g.scalar_value(loss)
            },
            &x0,
            1e-6,
        );
        assert!(max_rel_err(&grads[0], &nx) < 1e-5);

        let nw = finite_diff(
            &mut |v: &ArrayD<f64>| {
                let mut g = Graph::new();
                let x = g.constant(x0.clone());
                let w = g.leaf(v.clone());
                let y = g.conv_transpose2d(x, w, spec);
                let q = g.mul(y, y);
                let loss = g.mean_all(q);
                g.scalar_value(loss)
            },
            &w0,
            1e-6,
        );
        assert!(max_rel_err(&grads[1], &nw) < 1e-5);
    }

    #[test]
    fn cross_entropy_matches_uniform_closed_form() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(ArrayD::zeros(IxDyn(&[4, 3])));
        let loss = g.cross_entropy(logits, &[0, 1, 2, 0]);
        let v = g.scalar_value(loss);
        assert!((v - 3.0_f64.ln()).abs() < 1e-12);

        let grads = g.backward(loss, &[logits]);
        // softmax uniform: p = 1/3, gradient (p - onehot)/B
        let expect = |is_label: bool| if is_label { (1.0 / 3.0 - 1.0) / 4.0 } else { (1.0 / 3.0) / 4.0 };
        assert!((grads[0][[0, 0]] - expect(true)).abs() < 1e-12);
        assert!((grads[0][[0, 1]] - expect(false)).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_grad_matches_finite_differences() {
        let mut rng = DetRng::new(10, 0);
        let x0 = rand(&mut rng, &[5, 3]);
        let labels = vec![0usize, 2, 1, 1, 0];
        let labels2 = labels.clone();
        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let loss = g.cross_entropy(x, &labels);
        let grads = g.backward(loss, &[x]);
        let n = finite_diff(
            &mut |v: &ArrayD<f64>| {
                let mut g = Graph::new();
                let x = g.leaf(v.clone());
                let loss = g.cross_entropy(x, &labels2);
                g.scalar_value(loss)
            },
            &x0,
            1e-6,
        );
        assert!(max_rel_err(&grads[0], &n) < 1e-6);
    }

    /// Second-order check in the gradient-penalty pattern: the parameter
    /// gradient of a function of an input gradient must match finite
    /// differences of that function.
    #[test]
    fn grad_of_grad_matches_finite_differences() {
        let mut rng = DetRng::new(12, 0);
        let spec = ConvSpec::new(1, 0);
        let x0 = rand(&mut rng, &[2, 1, 4, 4]);
        let w0 = rand(&mut rng, &[2, 1, 3, 3]);
        let w1 = rand(&mut rng, &[1, 2, 2, 2]);

        // penalty(w) = mean_b (||d score / d x||_2 - 1)^2 for a two-conv net
        let penalty = |g: &mut Graph<f64>, x: Var, wa: Var, wb: Var| -> Var {
            let h = g.conv2d(x, wa, spec);
            let h = g.leaky_relu(h, 0.2);
            let s = g.conv2d(h, wb, spec);
            let score = g.sum_per_sample(s);
            let total = g.sum_all(score);
            let gx = g.backward_vars(total, &[x])[0].expect("input grad");
            let sq = g.mul(gx, gx);
            let ss = g.sum_per_sample(sq);
            let norm = g.sqrt(ss);
            let dev = g.add_scalar(norm, -1.0);
            let dev2 = g.mul(dev, dev);
            g.mean_all(dev2)
        };

        let mut g = Graph::new();
        let x = g.leaf(x0.clone());
        let wa = g.leaf(w0.clone());
        let wb = g.leaf(w1.clone());
        let p = penalty(&mut g, x, wa, wb);
        let grads = g.backward(p, &[wa, wb]);

        let na = finite_diff(
            &mut |v: &ArrayD<f64>| {
                let mut g = Graph::new();
                let x = g.leaf(x0.clone());
                let wa = g.leaf(v.clone());
                let wb = g.leaf(w1.clone());
                let p = penalty(&mut g, x, wa, wb);
                g.scalar_value(p)
            },
            &w0,
            1e-5,
        );
        let err_a = max_rel_err(&grads[0], &na);
        assert!(err_a < 1e-4, "first filter: rel err {err_a}");

        let nb = finite_diff(
            &mut |v: &ArrayD<f64>| {
                let mut g = Graph::new();
                let x = g.leaf(x0.clone());
                let wa = g.leaf(w0.clone());
                let wb = g.leaf(v.clone());
                let p = penalty(&mut g, x, wa, wb);
                g.scalar_value(p)
            },
            &w1,
            1e-5,
        );
        let err_b = max_rel_err(&grads[1], &nb);
        assert!(err_b < 1e-4, "second filter: rel err {err_b}");
    }

    #[test]
    fn constant_paths_are_pruned() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0));
        let c = g.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 3.0));
        let y = g.mul(x, c);
        let loss = g.sum_all(y);
        let grads = g.backward(loss, &[x, c]);
        assert!(grads[0].iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!(grads[1].iter().all(|&v| v == 0.0));
    }
}
