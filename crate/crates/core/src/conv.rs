//! 2-D convolution kernels: forward, input-gradient, and filter-gradient.
//!
//! All three reduce to im2col/col2im plus a GEMM, which keeps them fast on
//! CPU and, more importantly, makes them mutually adjoint: `bwd_data` is the
//! exact transpose of `fwd` in the input, and `bwd_filter` the transpose in
//! the filter. Transposed convolution is `bwd_data` applied to the input,
//! matching the usual deconvolution semantics.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView3, ArrayView4, ArrayViewMut3, Axis};
use rayon::prelude::*;

use crate::scalar::Scalar;

/// Stride / padding / channel-group configuration of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvSpec {
            stride,
            pad,
            groups: 1,
        }
    }

    pub fn grouped(stride: usize, pad: usize, groups: usize) -> Self {
        ConvSpec {
            stride,
            pad,
            groups,
        }
    }

    /// Output extent of a strided convolution along one axis.
    pub fn out_dim(&self, n: usize, k: usize) -> usize {
        (n + 2 * self.pad - k) / self.stride + 1
    }

    /// Output extent of the transposed convolution along one axis.
    pub fn transpose_out_dim(&self, n: usize, k: usize) -> usize {
        (n - 1) * self.stride + k - 2 * self.pad
    }
}

/// Lowers one sample's group slice into a `(c*kh*kw, oh*ow)` column matrix.
fn im2col<T: Scalar>(
    x: &ArrayView3<'_, T>,
    kh: usize,
    kw: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    col: &mut Array2<T>,
) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    debug_assert_eq!(col.shape(), &[c * kh * kw, oh * ow]);
    let (stride, pad) = (spec.stride, spec.pad);
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let mut out_row = col.row_mut(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        for oj in 0..ow {
                            out_row[oi * ow + oj] = T::zero();
                        }
                        continue;
                    }
                    let src = plane.index_axis(Axis(0), ii as usize);
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        out_row[oi * ow + oj] = if jj < 0 || jj >= w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatters a column matrix back onto an input-shaped plane, accumulating
/// overlaps. Exact adjoint of [`im2col`].
fn col2im<T: Scalar>(
    col: &Array2<T>,
    kh: usize,
    kw: usize,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
    x: &mut ArrayViewMut3<'_, T>,
) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (stride, pad) = (spec.stride, spec.pad);
    for ci in 0..c {
        let mut plane = x.index_axis_mut(Axis(0), ci);
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let col_row = col.row(row);
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        plane[[ii as usize, jj as usize]] += col_row[oi * ow + oj];
                    }
                }
            }
        }
    }
}

/// `y[b, co] = sum_ci w[co, ci] * x[b, ci]` with stride/padding/groups.
///
/// Weight layout is `(c_out, c_in/groups, kh, kw)`.
pub fn conv2d<T: Scalar>(
    x: &ArrayView4<'_, T>,
    w: &ArrayView4<'_, T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Array4<T> {
    let (batch, c_in, h, win) = dims4(x);
    let (c_out, c_in_g, kh, kw) = dims4(w);
    let g = spec.groups;
    assert_eq!(c_in, c_in_g * g, "conv2d: channel/group mismatch");
    assert_eq!(c_out % g, 0, "conv2d: c_out must divide by groups");
    let (oh, ow) = (spec.out_dim(h, kh), spec.out_dim(win, kw));
    let cog = c_out / g;

    let w2 = w
        .to_shape((c_out, c_in_g * kh * kw))
        .expect("contiguous filter");
    let mut y = Array4::<T>::zeros((batch, c_out, oh, ow));
    y.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(b, mut yb)| {
            let xb = x.index_axis(Axis(0), b);
            let mut col = Array2::<T>::zeros((c_in_g * kh * kw, oh * ow));
            for gi in 0..g {
                let xg = xb.slice(s![gi * c_in_g..(gi + 1) * c_in_g, .., ..]);
                im2col(&xg, kh, kw, spec, oh, ow, &mut col);
                let wg = w2.slice(s![gi * cog..(gi + 1) * cog, ..]);
                let yslice = yb.slice_mut(s![gi * cog..(gi + 1) * cog, .., ..]);
                let mut y2 = yslice
                    .into_shape_with_order((cog, oh * ow))
                    .expect("contiguous output");
                general_mat_mul(T::one(), &wg, &col.view(), T::zero(), &mut y2);
            }
            if let Some(bias) = bias {
                for (co, mut plane) in yb.axis_iter_mut(Axis(0)).enumerate() {
                    plane.mapv_inplace(|v| v + bias[co]);
                }
            }
        });
    y
}

/// Gradient of [`conv2d`] with respect to its input; also the forward pass
/// of a transposed convolution whose weight layout is `(c_in, c_out, kh, kw)`.
pub fn conv2d_bwd_data<T: Scalar>(
    dy: &ArrayView4<'_, T>,
    w: &ArrayView4<'_, T>,
    spec: &ConvSpec,
    in_hw: (usize, usize),
) -> Array4<T> {
    let (batch, c_out, oh, ow) = dims4(dy);
    let (c_out_w, c_in_g, kh, kw) = dims4(w);
    assert_eq!(c_out, c_out_w, "bwd_data: channel mismatch");
    let g = spec.groups;
    let cog = c_out / g;
    let (h, win) = in_hw;
    debug_assert_eq!(spec.out_dim(h, kh), oh);
    debug_assert_eq!(spec.out_dim(win, kw), ow);

    let w2 = w
        .to_shape((c_out, c_in_g * kh * kw))
        .expect("contiguous filter");
    let mut dx = Array4::<T>::zeros((batch, c_in_g * g, h, win));
    dx.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(b, mut dxb)| {
            let dyb = dy.index_axis(Axis(0), b);
            let mut col = Array2::<T>::zeros((c_in_g * kh * kw, oh * ow));
            for gi in 0..g {
                let dyg = dyb.slice(s![gi * cog..(gi + 1) * cog, .., ..]);
                let dy2 = dyg
                    .to_shape((cog, oh * ow))
                    .expect("contiguous upstream gradient");
                let wg = w2.slice(s![gi * cog..(gi + 1) * cog, ..]);
                general_mat_mul(T::one(), &wg.t(), &dy2.view(), T::zero(), &mut col);
                let mut dxg = dxb.slice_mut(s![gi * c_in_g..(gi + 1) * c_in_g, .., ..]);
                col2im(&col, kh, kw, spec, oh, ow, &mut dxg);
            }
        });
    dx
}

/// Gradient of [`conv2d`] with respect to its filter.
pub fn conv2d_bwd_filter<T: Scalar>(
    dy: &ArrayView4<'_, T>,
    x: &ArrayView4<'_, T>,
    spec: &ConvSpec,
    khw: (usize, usize),
) -> Array4<T> {
    let (batch, c_out, oh, ow) = dims4(dy);
    let (batch_x, c_in, _, _) = dims4(x);
    assert_eq!(batch, batch_x, "bwd_filter: batch mismatch");
    let g = spec.groups;
    let (kh, kw) = khw;
    let c_in_g = c_in / g;
    let cog = c_out / g;

    // Per-sample partial filter gradients, reduced in index order so the
    // result does not depend on thread scheduling.
    let partials: Vec<Array2<T>> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let xb = x.index_axis(Axis(0), b);
            let dyb = dy.index_axis(Axis(0), b);
            let mut col = Array2::<T>::zeros((c_in_g * kh * kw, oh * ow));
            let mut dw2 = Array2::<T>::zeros((c_out, c_in_g * kh * kw));
            for gi in 0..g {
                let xg = xb.slice(s![gi * c_in_g..(gi + 1) * c_in_g, .., ..]);
                im2col(&xg, kh, kw, spec, oh, ow, &mut col);
                let dyg = dyb.slice(s![gi * cog..(gi + 1) * cog, .., ..]);
                let dy2 = dyg
                    .to_shape((cog, oh * ow))
                    .expect("contiguous upstream gradient");
                let mut dwg = dw2.slice_mut(s![gi * cog..(gi + 1) * cog, ..]);
                general_mat_mul(T::one(), &dy2.view(), &col.t(), T::zero(), &mut dwg);
            }
            dw2
        })
        .collect();

    let mut dw2 = Array2::<T>::zeros((c_out, c_in_g * kh * kw));
    for p in partials {
        dw2 += &p;
    }
    dw2.into_shape_with_order((c_out, c_in_g, kh, kw))
        .expect("filter reshape")
}

fn dims4<T>(a: &ArrayView4<'_, T>) -> (usize, usize, usize, usize) {
    let d = a.shape();
    (d[0], d[1], d[2], d[3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use ndarray::Array1;

    /// Direct reference convolution, no im2col: the independent oracle.
    fn conv2d_naive(
        x: &Array4<f64>,
        w: &Array4<f64>,
        bias: Option<&[f64]>,
        spec: &ConvSpec,
    ) -> Array4<f64> {
        let (batch, c_in, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, c_in_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let g = spec.groups;
        let cog = c_out / g;
        let (oh, ow) = (spec.out_dim(h, kh), spec.out_dim(win, kw));
        let mut y = Array4::<f64>::zeros((batch, c_out, oh, ow));
        for b in 0..batch {
            for co in 0..c_out {
                let gi = co / cog;
                for oi in 0..oh {
                    for oj in 0..ow {
                        let mut acc = bias.map(|bv| bv[co]).unwrap_or(0.0);
                        for cg in 0..c_in_g {
                            let ci = gi * c_in_g + cg;
                            debug_assert!(ci < c_in);
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                                    let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < win
                                    {
                                        acc += x[[b, ci, ii as usize, jj as usize]]
                                            * w[[co, cg, ki, kj]];
                                    }
                                }
                            }
                        }
                        y[[b, co, oi, oj]] = acc;
                    }
                }
            }
        }
        y
    }

    fn rand4(rng: &mut DetRng, d: (usize, usize, usize, usize)) -> Array4<f64> {
        rng.normal_array::<f64>(&[d.0, d.1, d.2, d.3])
            .into_dimensionality()
            .unwrap()
    }

    fn assert_close(a: &Array4<f64>, b: &Array4<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < tol, "{x} vs {y}");
        }
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = DetRng::new(11, 0);
        for &(spec, xd, wd) in &[
            (ConvSpec::new(1, 0), (2, 3, 5, 5), (4, 3, 3, 3)),
            (ConvSpec::new(2, 1), (2, 3, 8, 8), (4, 3, 4, 4)),
            (ConvSpec::new(1, 2), (1, 2, 6, 7), (3, 2, 5, 5)),
            (ConvSpec::grouped(1, 1, 2), (2, 4, 6, 6), (6, 2, 3, 3)),
            (ConvSpec::grouped(2, 1, 4), (1, 4, 8, 8), (4, 1, 3, 3)),
        ] {
            let x = rand4(&mut rng, xd);
            let w = rand4(&mut rng, wd);
            let bias: Array1<f64> = rng
                .normal_array::<f64>(&[wd.0])
                .into_dimensionality()
                .unwrap();
            let got = conv2d(
                &x.view(),
                &w.view(),
                Some(bias.as_slice().unwrap()),
                &spec,
            );
            let want = conv2d_naive(&x, &w, Some(bias.as_slice().unwrap()), &spec);
            assert_close(&got, &want, 1e-10);
        }
    }

    /// Adjointness: <dy, conv(x)> == <bwd_data(dy), x> and likewise for the
    /// filter. This pins the backward kernels against the forward oracle.
    #[test]
    fn backward_kernels_are_adjoint() {
        let mut rng = DetRng::new(13, 0);
        for &(spec, xd, wd) in &[
            (ConvSpec::new(1, 1), (2, 3, 6, 6), (4, 3, 3, 3)),
            (ConvSpec::new(2, 1), (2, 2, 9, 9), (3, 2, 4, 4)),
            (ConvSpec::grouped(2, 2, 2), (2, 4, 8, 8), (6, 2, 5, 5)),
        ] {
            let x = rand4(&mut rng, xd);
            let w = rand4(&mut rng, wd);
            let y = conv2d(&x.view(), &w.view(), None, &spec);
            let dy = rand4(
                &mut rng,
                (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]),
            );

            let dx = conv2d_bwd_data(&dy.view(), &w.view(), &spec, (xd.2, xd.3));
            let lhs: f64 = (&dy * &y).sum();
            let rhs: f64 = (&dx * &x).sum();
            assert!((lhs - rhs).abs() < 1e-8, "data adjoint: {lhs} vs {rhs}");

            let dw = conv2d_bwd_filter(&dy.view(), &x.view(), &spec, (wd.2, wd.3));
            let rhs_w: f64 = (&dw * &w).sum();
            assert!((lhs - rhs_w).abs() < 1e-8, "filter adjoint: {lhs} vs {rhs_w}");
        }
    }

    #[test]
    fn transpose_conv_shapes() {
        let spec = ConvSpec::new(2, 1);
        assert_eq!(spec.transpose_out_dim(4, 4), 8);
        assert_eq!(spec.transpose_out_dim(64, 4), 128);
        let first = ConvSpec::new(1, 0);
        assert_eq!(first.transpose_out_dim(1, 4), 4);
    }
}
