//! Plain SGD, with optional heavy-ball momentum and global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `p ← p − lr·grad(p)` for every tensor, then clears the gradients.
pub fn sgd_step<T: Scalar>(params: &mut [&mut Tensor<T>], lr: T) -> Result<()> {
    Sgd::new(lr.to_f64(), None).step(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: Option<f64>,
    /// Rescale the joint gradient to at most this L2 norm before stepping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 0.1, momentum: None, clip_norm: None }
    }
}

/// Stateful SGD. The velocity buffers are keyed by parameter position, so the
/// caller must pass parameters in the same order on every step.
#[derive(Debug, Clone)]
pub struct Sgd<T: Scalar = f32> {
    lr: T,
    momentum: Option<T>,
    clip_norm: Option<f64>,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: Option<f64>) -> Self {
        Self { lr: T::of(lr), momentum: momentum.map(T::of), clip_norm: None, velocity: Vec::new() }
    }

    pub fn with_clip(mut self, clip_norm: Option<f64>) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    pub fn from_config(cfg: &OptimizerConfig) -> Self {
        Self::new(cfg.lr, cfg.momentum).with_clip(cfg.clip_norm)
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(Error::Contract(format!("parameter {i} has no gradient")));
        }
        let mut factor = T::one();
        if let Some(c) = self.clip_norm {
            let norm = params
                .iter()
                .flat_map(|p| p.grad.as_ref().expect("checked above"))
                .map(|&g| Scalar::to_f64(g) * Scalar::to_f64(g))
                .sum::<f64>()
                .sqrt();
            if norm > c {
                factor = <T as Scalar>::of(c / norm);
            }
        }
        if self.momentum.is_some() && self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        }
        for (i, p) in params.iter_mut().enumerate() {
            let mut grad = p.grad.take().expect("checked above");
            if factor != T::one() {
                grad.iter_mut().for_each(|g| *g = *g * factor);
            }
            match self.momentum {
                Some(mu) => {
                    let vel = &mut self.velocity[i];
                    for ((x, v), g) in p.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                        *v = mu * *v + g;
                        *x = *x - self.lr * *v;
                    }
                }
                None => {
                    for (x, g) in p.data_mut().iter_mut().zip(grad) {
                        *x = *x - self.lr * g;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f32, g: f32) -> Tensor<f32> {
        let mut t = Tensor::new(&[1], vec![v]).unwrap().with_grad();
        t.grad = Some(vec![g]);
        t
    }

    #[test]
    fn hand_arithmetic() {
        let mut p = param(1.0, 2.0);
        sgd_step(&mut [&mut p], 0.1).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-7);
        assert!(p.grad.is_none());
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = param(0.37, 0.0);
        sgd_step(&mut [&mut p], 0.5).unwrap();
        assert_eq!(p.data()[0], 0.37);
    }

    #[test]
    fn two_steps_equal_one_summed_step() {
        let mut a = param(1.0, 0.25);
        let mut opt = Sgd::new(0.5, None);
        opt.step(&mut [&mut a]).unwrap();
        a.grad = Some(vec![0.25]);
        opt.step(&mut [&mut a]).unwrap();
        let mut b = param(1.0, 0.5);
        sgd_step(&mut [&mut b], 0.5).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        assert!(matches!(sgd_step(&mut [&mut p], 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = param(0.0, 1.0);
        let mut opt = Sgd::new(1.0, Some(0.5));
        opt.step(&mut [&mut p]).unwrap();
        p.grad = Some(vec![1.0]);
        opt.step(&mut [&mut p]).unwrap();
        // v1 = 1, v2 = 1.5
        assert_eq!(p.data()[0], -2.5);
    }

    #[test]
    fn clipping_rescales_the_joint_norm() {
        // joint gradient (3, 4) has norm 5; clipped to 1 it becomes (0.6, 0.8)
        let (mut a, mut b) = (param(0.0, 3.0), param(0.0, 4.0));
        Sgd::new(1.0, None).with_clip(Some(1.0)).step(&mut [&mut a, &mut b]).unwrap();
        assert!((a.data()[0] + 0.6).abs() < 1e-7 && (b.data()[0] + 0.8).abs() < 1e-7);
        let mut c = param(0.0, 0.5);
        Sgd::new(1.0, None).with_clip(Some(1.0)).step(&mut [&mut c]).unwrap();
        assert_eq!(c.data()[0], -0.5);
    }
}
