//! Adam with decoupled weight decay and global gradient-norm clipping.

use super::mat::Mat;
use super::params::ModelParams;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm limit; `None` disables clipping.
    pub clip_norm: Option<f64>,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, clip_norm: Option<f64>) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, clip_norm, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Apply one update and return the gradient norm before clipping.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Mat]) -> f64 {
        assert_eq!(params.num_tensors(), grads.len(), "gradient count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Mat::zeros(g.rows, g.cols)).collect();
            self.v = self.m.clone();
        }
        let norm = grads.iter().map(Mat::norm_sq).sum::<f64>().sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / (norm + 1e-12),
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.tensors_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i] * scale;
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                p.data[i] -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p.data[i]);
            }
        }
        norm
    }
}
