//! Adam with bias correction over any [`Tensors`] container.

use crate::params::{Group, Tensors};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Number of updates applied so far.
    pub step: u64,
    /// First and second moments, one buffer per tensor in visiting order.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Tensors>(params: &T) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every tensor whose group passes `trainable`.
    ///
    /// Frozen tensors keep both their values and their moments.
    pub fn update<T: Tensors>(
        &mut self,
        params: &mut T,
        grads: &T,
        learning_rate: f64,
        trainable: impl Fn(Group) -> bool,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let grads = grads.tensors();
        let params = params.tensors_mut();
        assert_eq!(params.len(), self.m.len(), "optimizer state does not match parameters");
        assert_eq!(params.len(), grads.len(), "gradient layout does not match parameters");
        for (idx, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if !trainable(p.group) {
                continue;
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for (((x, &gi), mi), vi) in p.data.iter_mut().zip(g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
    }

    /// Updates every tensor.
    pub fn step<T: Tensors>(&mut self, params: &mut T, grads: &T, learning_rate: f64) {
        self.update(params, grads, learning_rate, |_| true);
    }
}
