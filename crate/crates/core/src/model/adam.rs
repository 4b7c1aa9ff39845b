//! Adaptive moment estimation optimizer.

use ndarray::Array2;

#[derive(Debug, Clone)]
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    moments: Vec<(Array2<f64>, Array2<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// Advance the global step counter. Call once per batch before updating
    /// tensors with [`Adam::update_tensor`].
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Update one parameter tensor in place. Tensors must be presented in
    /// the same order every step; state is keyed by that order.
    pub fn update_tensor(&mut self, index: usize, param: &mut Array2<f64>, grad: &Array2<f64>) {
        while self.moments.len() <= index {
            self.moments
                .push((Array2::zeros(param.dim()), Array2::zeros(param.dim())));
        }
        let (m, v) = &mut self.moments[index];
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m_e, v_e)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m_e = self.beta1 * *m_e + (1.0 - self.beta1) * g;
            *v_e = self.beta2 * *v_e + (1.0 - self.beta2) * g * g;
            let m_hat = *m_e / bc1;
            let v_hat = *v_e / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
