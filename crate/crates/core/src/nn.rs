//! Neural-network layers.
//!
//! Every layer owns its parameters as plain tensors and exposes two paths:
//! a pure `forward` for inference, and a `bind`/`forward_bound` pair that
//! routes the same computation through a [`Graph`] when gradients are
//! needed. Binding once and reusing the returned vars is what lets several
//! forward passes (real / fake / interpolated batches) share one set of
//! parameter leaves.

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};
use ndarray::linalg::general_mat_mul;

use crate::conv::{conv2d, conv2d_bwd_data, ConvSpec};
use crate::graph::{Graph, Var};
use crate::rng::DetRng;
use crate::scalar::Scalar;

/// Uniform init in `(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default
/// for convolution and linear layers.
fn fan_in_uniform<T: Scalar>(rng: &mut DetRng, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    rng.uniform_array(shape, -bound, bound)
}

/// Bound parameter handles for a conv-style layer.
#[derive(Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

/// Standard 2-D convolution, weight layout `(c_out, c_in/groups, kh, kw)`.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Scalar> {
    pub weight: ArrayD<T>,
    pub bias: Option<ArrayD<T>>,
    pub spec: ConvSpec,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut DetRng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let fan_in = (c_in / groups) * k * k;
        let weight = fan_in_uniform(rng, &[c_out, c_in / groups, k, k], fan_in);
        let bias = bias.then(|| fan_in_uniform(rng, &[c_out], fan_in));
        Conv2d {
            weight,
            bias,
            spec: ConvSpec::grouped(stride, pad, groups),
        }
    }

    pub fn forward(&self, x: &ArrayD<T>) -> ArrayD<T> {
        let xv = x.view().into_dimensionality::<Ix4>().expect("conv input (B,C,H,W)");
        let wv = self.weight.view().into_dimensionality::<Ix4>().unwrap();
        let bias = self
            .bias
            .as_ref()
            .map(|b| b.as_slice().expect("contiguous bias"));
        conv2d(&xv.view(), &wv.view(), bias, &self.spec).into_dyn()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ConvVars {
        let weight = if trainable {
            g.leaf(self.weight.clone())
        } else {
            g.constant(self.weight.clone())
        };
        let bias = self.bias.as_ref().map(|b| {
            if trainable {
                g.leaf(b.clone())
            } else {
                g.constant(b.clone())
            }
        });
        ConvVars { weight, bias }
    }

    pub fn forward_bound(&self, g: &mut Graph<T>, vars: ConvVars, x: Var) -> Var {
        let y = g.conv2d(x, vars.weight, self.spec);
        match vars.bias {
            Some(b) => g.chan_bias_add(y, b),
            None => y,
        }
    }
}

/// Transposed 2-D convolution, weight layout `(c_in, c_out, kh, kw)`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T: Scalar> {
    pub weight: ArrayD<T>,
    pub bias: Option<ArrayD<T>>,
    pub spec: ConvSpec,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(
        rng: &mut DetRng,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = c_out * k * k;
        let weight = fan_in_uniform(rng, &[c_in, c_out, k, k], fan_in);
        let bias = bias.then(|| fan_in_uniform(rng, &[c_out], fan_in));
        ConvTranspose2d {
            weight,
            bias,
            spec: ConvSpec::new(stride, pad),
        }
    }

    pub fn forward(&self, x: &ArrayD<T>) -> ArrayD<T> {
        let xv = x.view().into_dimensionality::<Ix4>().expect("conv input (B,C,H,W)");
        let wv = self.weight.view().into_dimensionality::<Ix4>().unwrap();
        let (kh, kw) = (wv.shape()[2], wv.shape()[3]);
        let oh = self.spec.transpose_out_dim(xv.shape()[2], kh);
        let ow = self.spec.transpose_out_dim(xv.shape()[3], kw);
        let mut y = conv2d_bwd_data(&xv.view(), &wv.view(), &self.spec, (oh, ow));
        if let Some(bias) = &self.bias {
            let b1 = bias.view().into_dimensionality::<Ix1>().unwrap();
            for mut sample in y.axis_iter_mut(Axis(0)) {
                for (ci, mut plane) in sample.axis_iter_mut(Axis(0)).enumerate() {
                    let bc = b1[ci];
                    plane.mapv_inplace(|v| v + bc);
                }
            }
        }
        y.into_dyn()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ConvVars {
        let weight = if trainable {
            g.leaf(self.weight.clone())
        } else {
            g.constant(self.weight.clone())
        };
        let bias = self.bias.as_ref().map(|b| {
            if trainable {
                g.leaf(b.clone())
            } else {
                g.constant(b.clone())
            }
        });
        ConvVars { weight, bias }
    }

    pub fn forward_bound(&self, g: &mut Graph<T>, vars: ConvVars, x: Var) -> Var {
        let y = g.conv_transpose2d(x, vars.weight, self.spec);
        match vars.bias {
            Some(b) => g.chan_bias_add(y, b),
            None => y,
        }
    }
}

/// Batch statistics produced by one training-mode normalization pass.
#[derive(Clone, Debug)]
pub struct BatchStats<T: Scalar> {
    pub mean: ArrayD<T>,
    pub biased_var: ArrayD<T>,
    pub count: usize,
}

/// Bound parameter handles for a batch-norm layer.
#[derive(Clone, Copy)]
pub struct BatchNormVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Per-channel batch normalization over `(B, C, H, W)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: ArrayD<T>,
    pub beta: ArrayD<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            gamma: ArrayD::from_elem(IxDyn(&[c]), T::one()),
            beta: ArrayD::zeros(IxDyn(&[c])),
            running_mean: ArrayD::zeros(IxDyn(&[c])),
            running_var: ArrayD::from_elem(IxDyn(&[c]), T::one()),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    /// Inference-mode normalization using running statistics.
    pub fn forward(&self, x: &ArrayD<T>) -> ArrayD<T> {
        let c = self.gamma.len();
        let mut scale = Vec::with_capacity(c);
        let mut shift = Vec::with_capacity(c);
        let eps = T::from_f64(self.eps);
        for ci in 0..c {
            let s = self.gamma[[ci]] / (self.running_var[[ci]] + eps).sqrt();
            scale.push(s);
            shift.push(self.beta[[ci]] - self.running_mean[[ci]] * s);
        }
        let mut y = x.clone();
        let mut y4 = y.view_mut().into_dimensionality::<Ix4>().expect("bn input (B,C,H,W)");
        for mut sample in y4.axis_iter_mut(Axis(0)) {
            for (ci, mut plane) in sample.axis_iter_mut(Axis(0)).enumerate() {
                let (s, t) = (scale[ci], shift[ci]);
                plane.mapv_inplace(|v| v * s + t);
            }
        }
        y
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BatchNormVars {
        let gamma = if trainable {
            g.leaf(self.gamma.clone())
        } else {
            g.constant(self.gamma.clone())
        };
        let beta = if trainable {
            g.leaf(self.beta.clone())
        } else {
            g.constant(self.beta.clone())
        };
        BatchNormVars { gamma, beta }
    }

    /// Training-mode normalization with in-graph batch statistics.
    pub fn forward_bound_train(
        &self,
        g: &mut Graph<T>,
        vars: BatchNormVars,
        x: Var,
    ) -> (Var, BatchStats<T>) {
        let shape = g.value(x).shape().to_vec();
        let (b, _c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let n = b * h * w;

        let sum = g.sum_to_chan(x);
        let mean = g.mul_scalar(sum, 1.0 / n as f64);
        let mean_b = g.chan_broadcast(mean, &shape);
        let centered = g.sub(x, mean_b);
        let sq = g.mul(centered, centered);
        let var_sum = g.sum_to_chan(sq);
        let var = g.mul_scalar(var_sum, 1.0 / n as f64);
        let var_eps = g.add_scalar(var, self.eps);
        let std = g.sqrt(var_eps);
        let ones = g.constant(ArrayD::from_elem(IxDyn(&[shape[1]]), T::one()));
        let inv_std = g.div(ones, std);
        let inv_b = g.chan_broadcast(inv_std, &shape);
        let xhat = g.mul(centered, inv_b);
        let gamma_b = g.chan_broadcast(vars.gamma, &shape);
        let scaled = g.mul(xhat, gamma_b);
        let y = g.chan_bias_add(scaled, vars.beta);

        let stats = BatchStats {
            mean: g.value(mean).clone(),
            biased_var: g.value(var).clone(),
            count: n,
        };
        (y, stats)
    }

    /// Fold one batch's statistics into the running estimates
    /// (`running <- (1-m)·running + m·batch`, unbiased variance).
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        let n = stats.count;
        let unbias = if n > 1 {
            T::from_usize(n) / T::from_usize(n - 1)
        } else {
            T::one()
        };
        for ci in 0..self.running_mean.len() {
            self.running_mean[[ci]] = keep * self.running_mean[[ci]] + m * stats.mean[[ci]];
            self.running_var[[ci]] =
                keep * self.running_var[[ci]] + m * stats.biased_var[[ci]] * unbias;
        }
    }
}

/// Bound parameter handles for a linear layer.
#[derive(Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

/// Affine layer, weight layout `(in, out)`.
#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    pub weight: ArrayD<T>,
    pub bias: ArrayD<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(rng: &mut DetRng, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: fan_in_uniform(rng, &[in_dim, out_dim], in_dim),
            bias: fan_in_uniform(rng, &[out_dim], in_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &ArrayD<T>) -> ArrayD<T> {
        let x2 = x.view().into_dimensionality::<Ix2>().expect("linear input (B,In)");
        let w2 = self.weight.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = ndarray::Array2::<T>::zeros((x2.shape()[0], w2.shape()[1]));
        general_mat_mul(T::one(), &x2, &w2, T::zero(), &mut y);
        let b1 = self.bias.view().into_dimensionality::<Ix1>().unwrap();
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &b1;
        }
        y.into_dyn()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> LinearVars {
        let (weight, bias) = if trainable {
            (g.leaf(self.weight.clone()), g.leaf(self.bias.clone()))
        } else {
            (g.constant(self.weight.clone()), g.constant(self.bias.clone()))
        };
        LinearVars { weight, bias }
    }

    pub fn forward_bound(&self, g: &mut Graph<T>, vars: LinearVars, x: Var) -> Var {
        let y = g.matmul(x, vars.weight);
        g.row_bias_add(y, vars.bias)
    }
}

/// Elementwise ReLU (inference path).
pub fn relu<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    x.mapv(|v| v.max(T::zero()))
}

pub fn relu_inplace<T: Scalar>(x: &mut ArrayD<T>) {
    x.mapv_inplace(|v| v.max(T::zero()));
}

/// Elementwise leaky ReLU (inference path).
pub fn leaky_relu<T: Scalar>(x: &ArrayD<T>, slope: f64) -> ArrayD<T> {
    let s = T::from_f64(slope);
    x.mapv(|v| if v > T::zero() { v } else { v * s })
}

/// Elementwise tanh (inference path).
pub fn tanh<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    x.mapv(|v| v.tanh())
}

/// Row-wise softmax of `(B, K)` logits.
pub fn softmax<T: Scalar>(logits: &ArrayD<T>) -> ArrayD<T> {
    let l2 = logits.view().into_dimensionality::<Ix2>().expect("softmax input (B,K)");
    let mut out = l2.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out.into_dyn()
}
