//! Central finite differences for gradient verification.

use ndarray::ArrayD;

use crate::scalar::Scalar;

/// Central-difference gradient of a scalar function of a tensor.
pub fn finite_diff<T: Scalar>(
    f: &mut dyn FnMut(&ArrayD<T>) -> T,
    x: &ArrayD<T>,
    eps: f64,
) -> ArrayD<T> {
    let h = T::from_f64(eps);
    let two_h = T::from_f64(2.0 * eps);
    let mut grad = ArrayD::<T>::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / two_h;
    }
    grad
}

/// Worst relative error between two tensors, with an absolute floor so that
/// near-zero entries compare absolutely instead of blowing up the ratio.
pub fn max_rel_err<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_err: shape mismatch");
    let floor = 1e-6;
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64(), y.to_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}
