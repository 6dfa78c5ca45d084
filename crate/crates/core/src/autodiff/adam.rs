use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Hyper-parameters shared by every moment buffer of one optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for a single parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first_moment: Tensor,
    second_moment: Tensor,
    step_count: u64,
}

impl AdamState {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: Tensor::zeros(shape.to_vec()),
            second_moment: Tensor::zeros(shape.to_vec()),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &Tensor {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &Tensor {
        &self.second_moment
    }

    /// One update of `param` against `grad`. A non-finite gradient leaves both
    /// the parameter and the state untouched.
    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() || param.shape() != self.first_moment.shape() {
            return Err(Error::dim("adam_step", param.shape(), grad.shape()));
        }
        if !grad.is_finite() {
            return Err(Error::Numeric("adam_step gradient".into()));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let m = self.first_moment.data_mut();
        let v = self.second_moment.data_mut();
        for (((p, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut p = Tensor::vector(&[1.0, -2.0]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(p.shape(), AdamConfig::default());
        s.step(&mut p, &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::vector(&[1.0]).unwrap();
        let mut s = AdamState::new(p.shape(), AdamConfig::with_lr(1e-3));
        s.step(&mut p, &Tensor::vector(&[0.5]).unwrap()).unwrap();
        // m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] - 0.999).abs() < 1e-9);
    }

    #[test]
    fn repeated_steps_move_against_gradient_sign() {
        let mut p = Tensor::vector(&[0.0, 0.0]).unwrap();
        let g = Tensor::vector(&[0.3, -0.7]).unwrap();
        let mut s = AdamState::new(p.shape(), AdamConfig::default());
        s.step(&mut p, &g).unwrap();
        let after_one = p.clone();
        s.step(&mut p, &g).unwrap();
        assert!(after_one.data()[0] < 0.0 && p.data()[0] < after_one.data()[0]);
        assert!(after_one.data()[1] > 0.0 && p.data()[1] > after_one.data()[1]);
    }

    #[test]
    fn non_finite_gradient_refused() {
        let mut p = Tensor::vector(&[1.0]).unwrap();
        let mut s = AdamState::new(p.shape(), AdamConfig::default());
        let bad = Tensor::from_parts(vec![1], vec![f64::INFINITY]);
        assert!(matches!(s.step(&mut p, &bad), Err(Error::Numeric(_))));
        assert_eq!(s.step_count(), 0);
        assert_eq!(p.data(), &[1.0]);
    }

    #[test]
    fn shape_mismatch_refused() {
        let mut p = Tensor::vector(&[1.0, 2.0]).unwrap();
        let mut s = AdamState::new(p.shape(), AdamConfig::default());
        assert!(s.step(&mut p, &Tensor::zeros(vec![3])).is_err());
    }
}
