//! Adam with bias correction.

use std::collections::HashMap;

use crate::error::TensorError;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<ParamId, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter in `ids` from its gradient, then clears the
    /// gradients. Fails before touching anything if one is missing.
    pub fn step(&mut self, store: &mut ParamStore<T>, ids: &[ParamId]) -> Result<(), TensorError> {
        if let Some(&id) = ids.iter().find(|&&id| store.tensor(id).grad().is_none()) {
            return Err(TensorError::MissingGrad(store.get(id).name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let bc1 = T::from_f64_lossy(1.0 - self.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = T::from_f64_lossy(self.lr);
        let eps = T::from_f64_lossy(self.eps);
        for &id in ids {
            let tensor = store.tensor_mut(id);
            let grad = tensor.grad().expect("checked above").to_vec();
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (vec![T::zero(); grad.len()], vec![T::zero(); grad.len()]));
            for (((w, &g), mi), vi) in tensor.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            tensor.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::params::ParamGroup;
    use crate::tensor::Tensor;

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ParamGroup::Predictor, Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        store.tensor_mut(id).accumulate_grad(&[0.0; 3]).unwrap();
        let mut adam = Adam::new(0.1);
        adam.step(&mut store, &[id]).unwrap();
        assert_eq!(store.tensor(id).data(), &[1.0, -2.0, 0.5]);
        assert!(store.tensor(id).grad().is_none());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ParamGroup::Predictor, Tensor::scalar(2.0));
        store.tensor_mut(id).accumulate_grad(&[1.0]).unwrap();
        Adam::new(0.01).step(&mut store, &[id]).unwrap();
        assert!((store.tensor(id).data()[0] - (2.0 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", ParamGroup::Encoder, Tensor::scalar(1.0));
        let err = Adam::new(0.1).step(&mut store, &[id]).unwrap_err();
        assert_eq!(err, TensorError::MissingGrad("w".into()));
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", ParamGroup::Predictor, Tensor::scalar(0.0));
        let mut adam = Adam::new(0.1);
        for _ in 0..100 {
            let mut g = Graph::new();
            let w = g.param(id, store.tensor(id), true);
            let three = g.constant(Tensor::scalar(3.0));
            let loss = g.loss(w, three, crate::autodiff::LossKind::Mse).unwrap();
            g.backward(loss).unwrap();
            store.accumulate_grads(&g).unwrap();
            adam.step(&mut store, &[id]).unwrap();
        }
        assert!((store.tensor(id).data()[0] - 3.0).abs() < 0.1);
    }
}
