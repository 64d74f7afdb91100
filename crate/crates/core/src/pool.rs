//! Pooling operators used by the frozen classifier backbones.
//!
//! These run only in inference mode (the backbones are never trained here),
//! so no gradient paths are provided.

use ndarray::{Array2, Array4, ArrayView4, Axis};

use crate::scalar::Scalar;

fn pool_out_dim(n: usize, k: usize, s: usize, p: usize, ceil: bool) -> usize {
    let num = n + 2 * p - k;
    let mut out = if ceil {
        num.div_ceil(s) + 1
    } else {
        num / s + 1
    };
    // A ceil-mode window must start inside the input or left padding.
    if ceil && (out - 1) * s >= n + p {
        out -= 1;
    }
    out
}

/// Max pooling with optional zero-area padding and ceil-mode output sizing.
/// Padding cells never win the max: windows are clamped to valid pixels.
pub fn max_pool2d<T: Scalar>(
    x: &ArrayView4<'_, T>,
    k: usize,
    stride: usize,
    pad: usize,
    ceil: bool,
) -> Array4<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let oh = pool_out_dim(h, k, stride, pad, ceil);
    let ow = pool_out_dim(w, k, stride, pad, ceil);
    let mut y = Array4::<T>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), bi);
            let plane = plane.index_axis(Axis(0), ci);
            for oi in 0..oh {
                for oj in 0..ow {
                    let i0 = (oi * stride) as isize - pad as isize;
                    let j0 = (oj * stride) as isize - pad as isize;
                    let mut best = T::neg_infinity();
                    for ki in 0..k {
                        for kj in 0..k {
                            let ii = i0 + ki as isize;
                            let jj = j0 + kj as isize;
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                best = best.max(plane[[ii as usize, jj as usize]]);
                            }
                        }
                    }
                    y[[bi, ci, oi, oj]] = best;
                }
            }
        }
    }
    y
}

/// Adaptive average pooling with the floor/ceil bin rule: bin `i` covers
/// `[floor(i*n/out), ceil((i+1)*n/out))`.
pub fn adaptive_avg_pool2d<T: Scalar>(x: &ArrayView4<'_, T>, out: (usize, usize)) -> Array4<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = out;
    let mut y = Array4::<T>::zeros((b, c, oh, ow));
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), bi);
            let plane = plane.index_axis(Axis(0), ci);
            for oi in 0..oh {
                let i0 = oi * h / oh;
                let i1 = ((oi + 1) * h).div_ceil(oh);
                for oj in 0..ow {
                    let j0 = oj * w / ow;
                    let j1 = ((oj + 1) * w).div_ceil(ow);
                    let mut acc = T::zero();
                    for ii in i0..i1 {
                        for jj in j0..j1 {
                            acc = acc + plane[[ii, jj]];
                        }
                    }
                    y[[bi, ci, oi, oj]] = acc / T::from_usize((i1 - i0) * (j1 - j0));
                }
            }
        }
    }
    y
}

/// Mean over the spatial axes: `(B, C, H, W) -> (B, C)`.
pub fn spatial_mean<T: Scalar>(x: &ArrayView4<'_, T>) -> Array2<T> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = Array2::<T>::zeros((b, c));
    let inv = T::one() / T::from_usize(h * w);
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), bi);
            y[[bi, ci]] = plane.index_axis(Axis(0), ci).sum() * inv;
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn floor_and_ceil_output_sizes() {
        // 112 -> 56 under k3 s2 ceil (the first pooling stage at 224 input)
        assert_eq!(pool_out_dim(112, 3, 2, 0, true), 56);
        assert_eq!(pool_out_dim(112, 3, 2, 0, false), 55);
        // k2 s2 ceil on odd size rounds up
        assert_eq!(pool_out_dim(7, 2, 2, 0, true), 4);
        assert_eq!(pool_out_dim(7, 2, 2, 0, false), 3);
        // k3 s2 p1 floor (224 -> 112)
        assert_eq!(pool_out_dim(224, 3, 2, 1, false), 112);
    }

    #[test]
    fn max_pool_picks_window_max() {
        let mut x = Array4::<f64>::zeros((1, 1, 4, 4));
        for i in 0..4 {
            for j in 0..4 {
                x[[0, 0, i, j]] = (i * 4 + j) as f64;
            }
        }
        let y = max_pool2d(&x.view(), 2, 2, 0, false);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 1, 1]], 15.0);
    }

    #[test]
    fn adaptive_pool_to_one_is_global_mean() {
        let x = Array4::<f64>::from_elem((2, 3, 5, 7), 2.5);
        let y = adaptive_avg_pool2d(&x.view(), (1, 1));
        assert_eq!(y.shape(), &[2, 3, 1, 1]);
        assert!((y[[0, 0, 0, 0]] - 2.5).abs() < 1e-12);
        let m = spatial_mean(&x.view());
        assert!((m[[1, 2]] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn adaptive_pool_identity_when_sizes_match() {
        let mut x = Array4::<f64>::zeros((1, 1, 7, 7));
        x[[0, 0, 3, 4]] = 9.0;
        let y = adaptive_avg_pool2d(&x.view(), (7, 7));
        assert_eq!(y, x);
    }
}
