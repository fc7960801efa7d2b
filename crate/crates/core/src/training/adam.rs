//! First-order moment-adaptive optimizer with bias correction.

use super::TrainingError;

/// Optimizer state: exponential moving averages of the gradient and its
/// square, one entry per parameter, plus the step counter driving bias
/// correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Standard defaults: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One full-batch update in place. The step counter advances even for a
    /// zero gradient (the moments decay identically, parameters stay put).
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<(), TrainingError> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(TrainingError::LengthMismatch {
                expected: self.m.len(),
                got: params.len().max(grad.len()),
            });
        }
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
