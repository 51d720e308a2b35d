//! Adam with bias-corrected moments.

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros = |_| Vec::new();
        Adam {
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: (0..store.len()).map(zeros).collect(),
            second: (0..store.len()).map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; parameters missing from `grads` keep their values and moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, grad) in grads {
            let i = id.index();
            let param = store.get_mut(*id);
            if param.len() != grad.len() {
                return Err(Error::shape("adam", param.shape(), &[grad.len()]));
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            if m.is_empty() {
                m.resize(grad.len(), 0.0);
                v.resize(grad.len(), 0.0);
            }
            for (j, (w, g)) in param.data_mut().iter_mut().zip(grad).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::default();
        let id = store.add("w", Tensor::vector(vec![1.0, -1.0, 0.5]).unwrap()).unwrap();
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        adam.step(&mut store, &[(id, vec![3.0, -0.2, 0.0])], 0.1).unwrap();
        let w = store.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::default();
        let id = store.add("w", Tensor::vector(vec![5.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let w = store.get(id).data()[0];
            adam.step(&mut store, &[(id, vec![2.0 * (w - 2.0)])], 0.05).unwrap();
        }
        assert!((store.get(id).data()[0] - 2.0).abs() < 1e-3);
    }
}
