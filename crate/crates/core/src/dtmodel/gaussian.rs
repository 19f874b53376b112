//! Diagonal Gaussian action distributions, plain and on the tape.

use rand_distr::{Distribution, StandardNormal};

use super::mat::Mat;
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::seed::Rng;

pub const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl GaussianDist {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Input(format!("mean has {} dims but var has {}", mean.len(), var.len())));
        }
        if mean.iter().any(|m| !m.is_finite()) || var.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Input("gaussian parameters must be finite with positive variance".into()));
        }
        Ok(Self { mean, var })
    }

    pub fn from_log_std(mean: Vec<f64>, log_std: &[f64]) -> Self {
        let var = log_std.iter().map(|l| (2.0 * l).exp()).collect();
        Self { mean, var }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_std(&self) -> Vec<f64> {
        self.var.iter().map(|v| 0.5 * v.ln()).collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(m, v)| {
                let z: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * z
            })
            .collect()
    }

    pub fn mean_var(&self) -> f64 {
        self.var.iter().sum::<f64>() / self.var.len() as f64
    }
}

pub fn log_prob(dist: &GaussianDist, action: &[f64]) -> f64 {
    assert_eq!(dist.dim(), action.len(), "action dimension mismatch");
    dist.mean
        .iter()
        .zip(&dist.var)
        .zip(action)
        .map(|((m, v), a)| -0.5 * (LN_2PI + v.ln()) - (a - m) * (a - m) / (2.0 * v))
        .sum()
}

pub fn entropy(dist: &GaussianDist) -> f64 {
    let d = dist.dim() as f64;
    0.5 * d * (1.0 + LN_2PI) + 0.5 * dist.var.iter().map(|v| v.ln()).sum::<f64>()
}

/// `KL(p || q)`.
pub fn gaussian_kl(p: &GaussianDist, q: &GaussianDist) -> f64 {
    assert_eq!(p.dim(), q.dim(), "distribution dimension mismatch");
    let mut kl = 0.0;
    for i in 0..p.dim() {
        let dm = q.mean[i] - p.mean[i];
        kl += p.var[i] / q.var[i] + dm * dm / q.var[i] - 1.0 + (q.var[i] / p.var[i]).ln();
    }
    0.5 * kl
}

/// Row-wise log-density on the tape: `mean`, `log_std` are `n x d`, `actions` is an `n x d` constant.
pub fn tape_log_prob(t: &mut Tape, mean: NodeId, log_std: NodeId, actions: Mat) -> NodeId {
    let d = actions.cols as f64;
    let a = t.constant(actions);
    let diff = t.sub(a, mean);
    let sq = t.mul(diff, diff);
    let m2 = t.scale(log_std, -2.0);
    let inv_var = t.exp(m2);
    let z = t.mul(sq, inv_var);
    let half = t.scale(z, -0.5);
    let terms = t.sub(half, log_std);
    let s = t.sum_cols(terms);
    t.add_scalar(s, -0.5 * d * LN_2PI)
}

pub fn tape_entropy(t: &mut Tape, log_std: NodeId) -> NodeId {
    let d = t.value(log_std).cols as f64;
    let s = t.sum_cols(log_std);
    t.add_scalar(s, 0.5 * d * (1.0 + LN_2PI))
}

/// Row-wise `KL(p || q)` with `q` held constant.
pub fn tape_kl(t: &mut Tape, mean_p: NodeId, log_std_p: NodeId, mean_q: Mat, log_std_q: Mat) -> NodeId {
    let d = mean_q.cols as f64;
    let inv_var_q = t.constant(log_std_q.map(|l| (-2.0 * l).exp()));
    let two_ls_q = t.constant(log_std_q.map(|l| 2.0 * l));
    let mq = t.constant(mean_q);
    let two_ls_p = t.scale(log_std_p, 2.0);
    let log_ratio = t.sub(two_ls_p, two_ls_q);
    let ratio = t.exp(log_ratio);
    let dm = t.sub(mq, mean_p);
    let dm2 = t.mul(dm, dm);
    let dm2 = t.mul(dm2, inv_var_q);
    let inner = t.add(ratio, dm2);
    let inner = t.sub(inner, log_ratio);
    let s = t.sum_cols(inner);
    let s = t.add_scalar(s, -d);
    t.scale(s, 0.5)
}
