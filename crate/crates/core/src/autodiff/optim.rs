use super::Params;
use crate::error::{argument, Result};

/// Momentum SGD with L2 weight decay.
///
/// `v ← μ·v + lr·(g + λ·θ)`, `θ ← θ − v`. Velocity buffers start at zero
/// and persist across steps.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(argument!("learning rate must be positive, got {lr}"));
        }
        let tensors = params.tensors_mut();
        if grads.len() != tensors.len() {
            return Err(argument!("{} gradients for {} parameters", grads.len(), tensors.len()));
        }
        for (t, g) in tensors.iter().zip(grads) {
            if t.len() != g.len() {
                return Err(argument!(
                    "gradient of length {} for parameter of shape {:?}",
                    g.len(),
                    t.shape()
                ));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        }
        for ((t, g), v) in tensors.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, gv), vel) in t.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vel = self.momentum * *vel + lr * (gv + self.weight_decay * *p);
                *p -= *vel;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar_params(v: f64) -> Params {
        let mut p = Params::new();
        p.add("w", Tensor::vector(vec![v]));
        p
    }

    fn value(p: &Params) -> f64 {
        p.iter().next().unwrap().1.data()[0]
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = scalar_params(0.7);
        let mut opt = Sgd::new(0.9, 0.0);
        for _ in 0..3 {
            opt.step(&mut p, &[vec![0.0]], 0.1).unwrap();
        }
        assert_eq!(value(&p), 0.7);
    }

    #[test]
    fn plain_step() {
        let mut p = scalar_params(1.0);
        Sgd::new(0.0, 0.0).step(&mut p, &[vec![1.0]], 0.1).unwrap();
        assert!((value(&p) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = scalar_params(0.0);
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut p, &[vec![1.0]], 0.1).unwrap();
        let first = -value(&p);
        opt.step(&mut p, &[vec![1.0]], 0.1).unwrap();
        let second = -value(&p) - first;
        assert!((second / first - 1.9).abs() < 1e-12);
    }

    #[test]
    fn misaligned_gradients_rejected() {
        let mut p = scalar_params(0.0);
        let mut opt = Sgd::new(0.9, 0.0);
        assert!(opt.step(&mut p, &[vec![1.0, 2.0]], 0.1).is_err());
        assert!(opt.step(&mut p, &[], 0.1).is_err());
        assert!(opt.step(&mut p, &[vec![1.0]], 0.0).is_err());
    }
}
