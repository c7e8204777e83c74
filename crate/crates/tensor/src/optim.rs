//! Adam with bias correction, plus a step-decay learning-rate schedule.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// One Adam update using the tensor's accumulated gradient. A missing or
    /// all-zero gradient leaves a freshly initialized parameter unchanged.
    pub fn step(&mut self, param: &mut Tensor, cfg: &AdamConfig) {
        debug_assert_eq!(self.m.len(), param.numel());
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let grad: Vec<f64> = match param.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; param.numel()],
        };
        let data = param.data_mut();
        for j in 0..data.len() {
            self.m[j] = cfg.beta1 * self.m[j] + (1.0 - cfg.beta1) * grad[j];
            self.v[j] = cfg.beta2 * self.v[j] + (1.0 - cfg.beta2) * grad[j] * grad[j];
            let mh = self.m[j] / bc1;
            let vh = self.v[j] / bc2;
            data[j] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Learning rate after step decay: multiplied by `factor` at each epoch
/// listed in `decay_epochs` that `epoch` has reached (1-based epochs).
pub fn decayed_lr(base: f64, epoch: usize, decay_epochs: &[usize], factor: f64) -> f64 {
    let hits = decay_epochs.iter().filter(|&&e| epoch >= e).count();
    base * factor.powi(hits as i32)
}
