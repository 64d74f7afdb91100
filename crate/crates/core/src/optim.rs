//! Adam optimizer with serializable state.

use ndarray::ArrayD;

use crate::scalar::Scalar;

/// Adam hyperparameters. Betas are kept in `f64` so checkpointed configs
/// round-trip exactly regardless of the training scalar type.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamConfig {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig::new(1e-3, 0.9, 0.999)
    }
}

/// Adam state: first/second moment estimates per parameter, plus the shared
/// step counter used for bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar> {
    pub cfg: AdamConfig,
    pub step_count: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update. Parameter order must be stable across calls; moment slots
    /// are allocated on first use.
    pub fn step(&mut self, params: &mut [&mut ArrayD<T>], grads: &[ArrayD<T>]) {
        assert_eq!(params.len(), grads.len(), "adam: param/grad count mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        assert_eq!(self.m.len(), params.len(), "adam: slot count changed");

        self.step_count += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let bias1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.step_count as i32));
        let bias2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.step_count as i32));
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);

        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(param.shape(), grad.shape(), "adam: grad shape mismatch");
            azip_update(m, grad, |m, g| b1 * m + (one - b1) * g);
            azip_update(v, grad, |v, g| b2 * v + (one - b2) * g * g);
            for ((p, &m), &v) in param.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = m / bias1;
                let vhat = v / bias2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

fn azip_update<T: Scalar>(dst: &mut ArrayD<T>, src: &ArrayD<T>, f: impl Fn(T, T) -> T) {
    ndarray::Zip::from(dst).and(src).for_each(|d, &s| *d = f(*d, s));
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    /// Adam on f(x) = x^2 converges toward 0.
    #[test]
    fn adam_descends_quadratic() {
        let mut x = ArrayD::from_elem(IxDyn(&[1]), 5.0f64);
        let mut opt = Adam::new(AdamConfig::new(0.1, 0.9, 0.999));
        for _ in 0..500 {
            let grad = x.mapv(|v| 2.0 * v);
            opt.step(&mut [&mut x], &[grad]);
        }
        assert!(x[[0]].abs() < 1e-2, "got {}", x[[0]]);
    }

    /// First step moves by exactly lr in the gradient sign direction
    /// (bias-corrected moments cancel on step one, up to eps).
    #[test]
    fn first_step_is_signed_lr() {
        let mut x = ArrayD::from_elem(IxDyn(&[2]), 1.0f64);
        let mut opt = Adam::new(AdamConfig::new(0.01, 0.9, 0.999));
        let mut grad = ArrayD::zeros(IxDyn(&[2]));
        grad[[0]] = 3.0;
        grad[[1]] = -0.5;
        opt.step(&mut [&mut x], &[grad]);
        assert!((x[[0]] - (1.0 - 0.01)).abs() < 1e-6);
        assert!((x[[1]] - (1.0 + 0.01)).abs() < 1e-6);
    }
}
