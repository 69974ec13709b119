use crate::nn::NamedTensors;
use crate::{Result, Scalar, TensorError};

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &NamedTensors<T>, lr: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![T::zero(); t.numel()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. A non-finite gradient rejects the step and leaves both the
    /// parameters and the moment estimates untouched.
    pub fn step(&mut self, params: &mut NamedTensors<T>, grads: &[Vec<T>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(TensorError::Config(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if g.len() != p.numel() {
                return Err(TensorError::shape("adam", format!("gradient for `{name}` has {} values, expected {}", g.len(), p.numel())));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "adam", context: format!(" in gradient of `{name}` at index {i}") });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (T::one() - b1, T::one() - b2);
        let bc1 = T::lit(1.0 - self.beta1.powi(t));
        let bc2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + c1 * gi;
                *vi = b2 * *vi + c2 * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn single(vals: Vec<f64>) -> NamedTensors<f64> {
        let mut p = NamedTensors::new();
        p.push("w", Tensor::new(vec![vals.len()], vals).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = single(vec![1.0, -2.0, 0.5]);
        let before = p.clone();
        let mut opt = Adam::new(&p, 1e-3);
        for _ in 0..5 {
            opt.step(&mut p, &[vec![0.0; 3]]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias correction makes the first step exactly lr·sign(g) up to ε.
        let mut p = single(vec![1.0, 1.0]);
        let mut opt = Adam::new(&p, 0.01);
        opt.step(&mut p, &[vec![3.0, -0.2]]).unwrap();
        assert!((p.get(0).data()[0] - 0.99).abs() < 1e-8);
        assert!((p.get(0).data()[1] - 1.01).abs() < 1e-7);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut p = single(vec![1.0, 1.0]);
        let before = p.clone();
        let mut opt = Adam::new(&p, 0.01);
        let err = opt.step(&mut p, &[vec![1.0, f64::NAN]]).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { .. }));
        assert_eq!(p, before);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn minimises_quadratic() {
        let mut p = single(vec![3.0]);
        let mut opt = Adam::new(&p, 0.1);
        for _ in 0..500 {
            let g = 2.0 * p.get(0).data()[0];
            opt.step(&mut p, &[vec![g]]).unwrap();
        }
        assert!(p.get(0).data()[0].abs() < 1e-2);
    }
}
