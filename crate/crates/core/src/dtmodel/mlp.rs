//! Small fully connected networks for value and Q functions.

use serde::{Deserialize, Serialize};

use super::mat::{affine_row, Mat};
use super::params::{Bound, Checkpoint, ModelParams};
use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::seed::Rng;

pub const CHECKPOINT_KIND: &str = "mlp";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputInit {
    Zero,
    Small,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub layer_norm: bool,
    pub output_init: OutputInit,
}

/// Two SiLU hidden layers and a scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    pub params: ModelParams,
}

const LAYERS: [&str; 2] = ["l0", "l1"];

impl Mlp {
    pub fn new(config: MlpConfig, rng: &mut Rng) -> Result<Self> {
        if config.input_dim == 0 || config.hidden == 0 {
            return Err(Error::Config("mlp dimensions must be positive".into()));
        }
        let mut p = ModelParams::new();
        let mut fan_in = config.input_dim;
        for l in LAYERS {
            p.insert_normal(&format!("{l}.w"), fan_in, config.hidden, 1.0 / (fan_in as f64).sqrt(), rng);
            p.insert_const(&format!("{l}.b"), 1, config.hidden, 0.0);
            if config.layer_norm {
                p.insert_const(&format!("{l}.ln.g"), 1, config.hidden, 1.0);
                p.insert_const(&format!("{l}.ln.b"), 1, config.hidden, 0.0);
            }
            fan_in = config.hidden;
        }
        let out_std = match config.output_init {
            OutputInit::Zero => 0.0,
            OutputInit::Small => 0.1 / (fan_in as f64).sqrt(),
        };
        p.insert_normal("out.w", fan_in, 1, out_std, rng);
        p.insert_const("out.b", 1, 1, 0.0);
        Ok(Self { config, params: p })
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.config.input_dim {
            return Err(Error::Input(format!("mlp input has {} dims, expected {}", x.len(), self.config.input_dim)));
        }
        let p = &self.params;
        let mut h = x.to_vec();
        for l in LAYERS {
            h = affine_row(&h, p.get(&format!("{l}.w")), p.get(&format!("{l}.b")));
            if self.config.layer_norm {
                let n = h.len() as f64;
                let mu = h.iter().sum::<f64>() / n;
                let var = h.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                let is = 1.0 / (var + 1e-5).sqrt();
                let (g, b) = (p.get(&format!("{l}.ln.g")), p.get(&format!("{l}.ln.b")));
                for (j, v) in h.iter_mut().enumerate() {
                    *v = (*v - mu) * is * g.data[j] + b.data[j];
                }
            }
            h.iter_mut().for_each(|v| *v /= 1.0 + (-*v).exp());
        }
        Ok(affine_row(&h, p.get("out.w"), p.get("out.b"))[0])
    }

    /// Batched forward on the tape: `x` is `n x input_dim`, the result `n x 1`.
    pub fn forward_tape(&self, t: &mut Tape, bound: &Bound, x: NodeId) -> NodeId {
        let p = &self.params;
        let id = |n: String| bound.id(p, &n);
        let mut h = x;
        for l in LAYERS {
            let y = t.matmul(h, id(format!("{l}.w")));
            h = t.add_row(y, id(format!("{l}.b")));
            if self.config.layer_norm {
                h = t.layer_norm(h, id(format!("{l}.ln.g")), id(format!("{l}.ln.b")));
            }
            h = t.silu(h);
        }
        let y = t.matmul(h, id("out.w".into()));
        t.add_row(y, id("out.b".into()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config_json: serde_json::to_string(&self.config).expect("config serializes"),
            params: self.params.clone(),
        }
    }
}

/// Stack row vectors into a constant matrix.
pub fn rows_to_mat(rows: &[Vec<f64>]) -> Mat {
    let cols = rows.first().map_or(0, Vec::len);
    Mat::from_rows(rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use rand::Rng as _;

    fn cfg(ln: bool, init: OutputInit) -> MlpConfig {
        MlpConfig { input_dim: 3, hidden: 8, layer_norm: ln, output_init: init }
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut rng = rng_from(1);
        let m = Mlp::new(cfg(false, OutputInit::Zero), &mut rng).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-5.0..5.0)).collect();
            assert_eq!(m.forward(&x).unwrap(), 0.0);
        }
    }

    #[test]
    fn differently_seeded_nets_differ() {
        let a = Mlp::new(cfg(false, OutputInit::Small), &mut rng_from(1)).unwrap();
        let b = Mlp::new(cfg(false, OutputInit::Small), &mut rng_from(2)).unwrap();
        assert_ne!(a.forward(&[0.1, 0.2, 0.3]).unwrap(), b.forward(&[0.1, 0.2, 0.3]).unwrap());
    }

    #[test]
    fn finite_on_bounded_inputs_and_tape_matches() {
        let mut rng = rng_from(3);
        for ln in [false, true] {
            let m = Mlp::new(cfg(ln, OutputInit::Small), &mut rng).unwrap();
            let xs: Vec<Vec<f64>> = (0..10_000).map(|_| (0..3).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
            let plain: Vec<f64> = xs.iter().map(|x| m.forward(x).unwrap()).collect();
            assert!(plain.iter().all(|v| v.is_finite()));
            let mut t = Tape::new();
            let b = m.params.bind_const(&mut t);
            let x = t.constant(rows_to_mat(&xs[..50]));
            let y = m.forward_tape(&mut t, &b, x);
            for (a, b) in t.value(y).data.iter().zip(&plain) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_input_dim_is_rejected() {
        let m = Mlp::new(cfg(false, OutputInit::Zero), &mut rng_from(4)).unwrap();
        assert!(m.forward(&[1.0]).is_err());
    }
}
