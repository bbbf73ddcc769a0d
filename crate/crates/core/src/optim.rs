use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

/// Learning-rate schedule over a fixed number of optimizer steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    LinearDecay,
}

impl Schedule {
    /// Learning rate for `step` (0-based) out of `total` steps.
    pub fn rate(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::LinearDecay => {
                if total == 0 {
                    base
                } else {
                    base * (1.0 - step as f64 / total as f64).max(0.0)
                }
            }
        }
    }
}

/// Adam with bias correction. Slots are created on first use so parameter
/// sets may grow between steps.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: Vec<u64>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), t: Vec::new() }
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Update `param` (slot `slot`) in place from `grad`.
    pub fn update(&mut self, slot: usize, param: &mut Tensor<T>, grad: &[T], lr: f64) {
        if self.m.len() <= slot {
            self.m.resize_with(slot + 1, Vec::new);
            self.v.resize_with(slot + 1, Vec::new);
            self.t.resize(slot + 1, 0);
        }
        let n = param.len();
        if self.m[slot].is_empty() {
            self.m[slot] = vec![T::zero(); n];
            self.v[slot] = vec![T::zero(); n];
        }
        self.t[slot] += 1;
        let t = self.t[slot] as i32;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let c1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(self.eps);
        let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
        for (i, p) in param.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = b1 * m[i] + (T::one() - b1) * g;
            v[i] = b2 * v[i] + (T::one() - b2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_decay_reaches_zero() {
        assert_eq!(Schedule::LinearDecay.rate(1.0, 0, 4), 1.0);
        assert_eq!(Schedule::LinearDecay.rate(1.0, 2, 4), 0.5);
        assert_eq!(Schedule::LinearDecay.rate(1.0, 4, 4), 0.0);
        assert_eq!(Schedule::Constant.rate(0.3, 9, 4), 0.3);
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut p = Tensor::<f64>::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let mut adam = Adam::new();
        adam.update(0, &mut p, &[0.5, -2.0, 0.0], 0.1);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] - 1.1).abs() < 1e-6);
        assert_eq!(p.data()[2], 1.0);
    }

    #[test]
    fn zero_rate_leaves_params_unchanged() {
        let mut p = Tensor::<f32>::full(&[4], 0.25);
        let before = p.clone();
        let mut adam = Adam::new();
        adam.update(3, &mut p, &[1.0, -1.0, 2.0, 0.1], 0.0);
        assert_eq!(p, before);
    }
}
