use crate::error::{Result, TensorError};
use crate::params::ParamStore;

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// First-order optimizer state for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn sgd(learning_rate: f32) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f32) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f32) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        Self {
            kind,
            learning_rate,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update to every trainable parameter holding a gradient and
    /// clear all gradients. A non-finite gradient anywhere rejects the whole
    /// update.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store
            .iter()
            .find(|p| p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        {
            return Err(TensorError::NonFiniteGrad {
                param: p.name.clone(),
            });
        }
        self.step += 1;
        if self.kind == OptimizerKind::Adam && self.m.len() < store.len() {
            for p in store.iter().skip(self.m.len()) {
                self.m.push(vec![0.0; p.tensor.numel()]);
                self.v.push(vec![0.0; p.tensor.numel()]);
            }
        }
        let lr = self.learning_rate;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let Some(grad) = p.tensor.take_grad() else { continue };
            if !p.trainable {
                continue;
            }
            let data = p.tensor.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in data.iter_mut().zip(&grad) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..data.len() {
                        let g = grad[j];
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        data[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
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
    use crate::tensor::Tensor;

    fn store_with(v: f32) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v));
        s
    }

    #[test]
    fn sgd_single_step() {
        let mut s = store_with(1.0);
        s.iter_mut().next().unwrap().tensor.set_grad(vec![2.0]).unwrap();
        let mut opt = OptimizerState::sgd(0.1);
        opt.step(&mut s).unwrap();
        assert!((s.by_name("p").unwrap().item() - 0.8).abs() < 1e-7);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let mut s = store_with(0.0);
        s.iter_mut().next().unwrap().tensor.set_grad(vec![3.7]).unwrap();
        let mut opt = OptimizerState::adam(0.01);
        opt.step(&mut s).unwrap();
        assert!((s.by_name("p").unwrap().item().abs() - 0.01).abs() < 1e-6);
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        // f(p) = (p - 3)^2, grad 2(p - 3); error shrinks by 0.8 per step
        let mut s = store_with(0.0);
        let mut opt = OptimizerState::sgd(0.1);
        for _ in 0..100 {
            let p = s.by_name("p").unwrap().item();
            s.iter_mut().next().unwrap().tensor.set_grad(vec![2.0 * (p - 3.0)]).unwrap();
            opt.step(&mut s).unwrap();
        }
        assert!((s.by_name("p").unwrap().item() - 3.0).abs() < 1e-4);
        assert_eq!(opt.steps(), 100);
    }

    #[test]
    fn non_finite_gradient_rejected_with_name() {
        let mut s = store_with(1.0);
        s.iter_mut().next().unwrap().tensor.set_grad(vec![f32::NAN]).unwrap();
        let mut opt = OptimizerState::sgd(0.1);
        let err = opt.step(&mut s).unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGrad { param: "p".into() });
        assert_eq!(s.by_name("p").unwrap().item(), 1.0);
        assert_eq!(opt.steps(), 0);
    }
}
