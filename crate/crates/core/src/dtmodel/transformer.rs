//! Causal Decision Transformer with a diagonal Gaussian action head.
//!
//! Each step contributes up to three tokens in the order (rtg, state, action).
//! There are no positional embeddings; order enters only through the causal
//! mask. The action for a step is read from the output at its state token.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::gaussian::{tape_entropy, tape_log_prob, GaussianDist};
use super::mat::{affine_row, Mat};
use super::params::{Bound, Checkpoint, ModelParams};
use super::tape::{NodeId, Segment, Tape};
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::traj::{Context, SubTrajRecord, Trajectory};

pub const CHECKPOINT_KIND: &str = "decision-transformer";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DtConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    /// Maximum number of steps in a context window.
    pub context_len: usize,
    pub action_dim: usize,
    pub obs_dim: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
    pub dropout: f64,
    /// Multiplier applied to return-to-go values before embedding.
    pub rtg_scale: f64,
}

impl Default for DtConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            embed_dim: 64,
            context_len: 20,
            action_dim: 2,
            obs_dim: 4,
            log_std_min: -5.0,
            log_std_max: 2.0,
            dropout: 0.1,
            rtg_scale: 0.1,
        }
    }
}

impl DtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_layers == 0 || self.n_heads == 0 || self.embed_dim == 0 {
            return bad("model: n_layers, n_heads and embed_dim must be positive");
        }
        if self.embed_dim % self.n_heads != 0 {
            return bad("model: embed_dim must be divisible by n_heads");
        }
        if self.context_len == 0 {
            return bad("model: context_len must be >= 1");
        }
        if self.action_dim == 0 || self.obs_dim == 0 {
            return bad("model: action_dim and obs_dim must be positive");
        }
        if !(self.log_std_min < self.log_std_max) {
            return bad("model: log_std_min must be below log_std_max");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("model: dropout must lie in [0, 1)");
        }
        if !(self.rtg_scale.is_finite() && self.rtg_scale > 0.0) {
            return bad("model: rtg_scale must be positive");
        }
        Ok(())
    }
}

/// One input sequence for the batched forward pass.
///
/// `actions` has either one entry per step or one fewer (the last step's
/// action is not yet known). `predict` lists the steps whose action
/// distributions are wanted.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub rtgs: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub predict: Vec<usize>,
}

impl Sequence {
    pub fn from_context(ctx: &Context) -> Self {
        let mut rtgs: Vec<f64> = ctx.history.iter().map(|t| t.rtg).collect();
        let mut states: Vec<Vec<f64>> = ctx.history.iter().map(|t| t.state.clone()).collect();
        let actions = ctx.history.iter().map(|t| t.action.clone()).collect();
        rtgs.push(ctx.rtg);
        states.push(ctx.state.clone());
        let last = rtgs.len() - 1;
        Self { rtgs, states, actions, predict: vec![last] }
    }

    /// Steps `start..start + len` of `tr`, predicting every step.
    pub fn segment(tr: &Trajectory, start: usize, len: usize) -> Self {
        let end = start + len;
        Self {
            rtgs: tr.rtgs[start..end].to_vec(),
            states: tr.states[start..end].to_vec(),
            actions: tr.actions[start..end - 1].to_vec(),
            predict: (0..len).collect(),
        }
    }

    pub fn steps(&self) -> usize {
        self.rtgs.len()
    }

    pub fn n_tokens(&self) -> usize {
        2 * self.steps() + self.actions.len()
    }

    /// Index of step `i`'s state token inside this sequence.
    fn state_token(i: usize) -> usize {
        3 * i + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtPolicy {
    pub config: DtConfig,
    pub params: ModelParams,
}

fn block_name(l: usize, part: &str) -> String {
    format!("blocks.{l}.{part}")
}

impl DtPolicy {
    pub fn new(config: DtConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let (d, o) = (config.action_dim, config.obs_dim);
        let mut p = ModelParams::new();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        p.insert_normal("embed.rtg.w", 1, e, 1.0, rng);
        p.insert_const("embed.rtg.b", 1, e, 0.0);
        p.insert_normal("embed.state.w", o, e, inv(o), rng);
        p.insert_const("embed.state.b", 1, e, 0.0);
        p.insert_normal("embed.action.w", d, e, inv(d), rng);
        p.insert_const("embed.action.b", 1, e, 0.0);
        let proj_std = inv(e) / ((2 * config.n_layers) as f64).sqrt();
        for l in 0..config.n_layers {
            p.insert_const(&block_name(l, "ln1.g"), 1, e, 1.0);
            p.insert_const(&block_name(l, "ln1.b"), 1, e, 0.0);
            for name in ["attn.q", "attn.k", "attn.v"] {
                p.insert_normal(&block_name(l, &format!("{name}.w")), e, e, inv(e), rng);
                p.insert_const(&block_name(l, &format!("{name}.b")), 1, e, 0.0);
            }
            p.insert_normal(&block_name(l, "attn.o.w"), e, e, proj_std, rng);
            p.insert_const(&block_name(l, "attn.o.b"), 1, e, 0.0);
            p.insert_const(&block_name(l, "ln2.g"), 1, e, 1.0);
            p.insert_const(&block_name(l, "ln2.b"), 1, e, 0.0);
            p.insert_normal(&block_name(l, "mlp.fc.w"), e, 4 * e, inv(e), rng);
            p.insert_const(&block_name(l, "mlp.fc.b"), 1, 4 * e, 0.0);
            p.insert_normal(&block_name(l, "mlp.proj.w"), 4 * e, e, proj_std / 2.0, rng);
            p.insert_const(&block_name(l, "mlp.proj.b"), 1, e, 0.0);
        }
        p.insert_const("ln_f.g", 1, e, 1.0);
        p.insert_const("ln_f.b", 1, e, 0.0);
        p.insert_normal("head.mean.w", e, d, 0.1 * inv(e), rng);
        p.insert_const("head.mean.b", 1, d, 0.0);
        p.insert_normal("head.log_std.w", e, d, 0.0, rng);
        p.insert_const("head.log_std.b", 1, d, 0.0);
        Ok(Self { config, params: p })
    }

    /// Zero both output heads: every context then maps to mean 0, var 1.
    pub fn zero_heads(&mut self) {
        for name in ["head.mean.w", "head.mean.b", "head.log_std.w", "head.log_std.b"] {
            self.params.get_mut(name).data.fill(0.0);
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: CHECKPOINT_KIND.into(),
            config_json: serde_json::to_string(&self.config).expect("config serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Input(format!("checkpoint holds a {:?}, not a decision transformer", ck.kind)));
        }
        let config: DtConfig = serde_json::from_str(&ck.config_json)?;
        config.validate()?;
        let mut rng = crate::seed::rng_from(0);
        let template = Self::new(config.clone(), &mut rng)?;
        if template.params.names() != ck.params.names()
            || template.params.tensors().iter().zip(ck.params.tensors()).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Input("checkpoint tensors do not match the stored config".into()));
        }
        Ok(Self { config, params: ck.params.clone() })
    }

    fn check(&self, seq: &Sequence) -> Result<()> {
        let c = &self.config;
        let n = seq.steps();
        if n == 0 || seq.states.len() != n {
            return Err(Error::Input("sequence needs matching, nonempty rtg and state lists".into()));
        }
        if seq.actions.len() != n && seq.actions.len() + 1 != n {
            return Err(Error::Input(format!("sequence of {n} steps has {} actions", seq.actions.len())));
        }
        if let Some(s) = seq.states.iter().find(|s| s.len() != c.obs_dim) {
            return Err(Error::Input(format!("state has {} dims, model expects {}", s.len(), c.obs_dim)));
        }
        if let Some(a) = seq.actions.iter().find(|a| a.len() != c.action_dim) {
            return Err(Error::Input(format!("action has {} dims, model expects {}", a.len(), c.action_dim)));
        }
        if seq.predict.iter().any(|&i| i >= n) {
            return Err(Error::Input("prediction index out of range".into()));
        }
        Ok(())
    }

    /// Action distribution for a single context.
    pub fn forward(&self, ctx: &Context) -> Result<GaussianDist> {
        Ok(self.forward_seq(&Sequence::from_context(ctx))?.pop().expect("one prediction"))
    }

    /// Plain (tape-free) forward pass over one sequence.
    pub fn forward_seq(&self, seq: &Sequence) -> Result<Vec<GaussianDist>> {
        self.check(seq)?;
        let c = &self.config;
        let p = &self.params;
        let e = c.embed_dim;
        let mut x = Mat::zeros(seq.n_tokens(), e);
        let mut tok = 0;
        for i in 0..seq.steps() {
            let r = [seq.rtgs[i] * c.rtg_scale];
            x.row_mut(tok).copy_from_slice(&affine_row(&r, p.get("embed.rtg.w"), p.get("embed.rtg.b")));
            x.row_mut(tok + 1).copy_from_slice(&affine_row(&seq.states[i], p.get("embed.state.w"), p.get("embed.state.b")));
            tok += 2;
            if i < seq.actions.len() {
                x.row_mut(tok).copy_from_slice(&affine_row(&seq.actions[i], p.get("embed.action.w"), p.get("embed.action.b")));
                tok += 1;
            }
        }
        for l in 0..c.n_layers {
            let g = |n: &str| p.get(&block_name(l, n));
            let h = plain::layer_norm(&x, g("ln1.g"), g("ln1.b"));
            let q = plain::linear(&h, g("attn.q.w"), g("attn.q.b"));
            let k = plain::linear(&h, g("attn.k.w"), g("attn.k.b"));
            let v = plain::linear(&h, g("attn.v.w"), g("attn.v.b"));
            let a = plain::causal_attention(&q, &k, &v, c.n_heads);
            x.add_assign(&plain::linear(&a, g("attn.o.w"), g("attn.o.b")));
            let h = plain::layer_norm(&x, g("ln2.g"), g("ln2.b"));
            let f = plain::linear(&h, g("mlp.fc.w"), g("mlp.fc.b")).map(plain::silu);
            x.add_assign(&plain::linear(&f, g("mlp.proj.w"), g("mlp.proj.b")));
        }
        let x = plain::layer_norm(&x, p.get("ln_f.g"), p.get("ln_f.b"));
        Ok(seq
            .predict
            .iter()
            .map(|&i| {
                let hrow = x.row(Sequence::state_token(i));
                let mean = affine_row(hrow, p.get("head.mean.w"), p.get("head.mean.b"));
                let ls: Vec<f64> = affine_row(hrow, p.get("head.log_std.w"), p.get("head.log_std.b"))
                    .into_iter()
                    .map(|v| v.clamp(c.log_std_min, c.log_std_max))
                    .collect();
                GaussianDist::from_log_std(mean, &ls)
            })
            .collect())
    }

    /// Batched forward on the tape. Returns `(mean, log_std)` nodes with one
    /// row per prediction, ordered by sequence then by `predict` entry.
    /// Dropout is applied when `dropout_rng` is given and the configured rate is positive.
    pub fn forward_tape(
        &self,
        t: &mut Tape,
        bound: &Bound,
        seqs: &[Sequence],
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<(NodeId, NodeId)> {
        if seqs.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        for s in seqs {
            self.check(s)?;
        }
        let c = &self.config;
        let p = &self.params;
        let id = |name: &str| bound.id(p, name);
        let bid = |l: usize, name: &str| bound.id(p, &block_name(l, name));

        let n_steps: usize = seqs.iter().map(Sequence::steps).sum();
        let n_actions: usize = seqs.iter().map(|s| s.actions.len()).sum();
        let mut rtg_data = Vec::with_capacity(n_steps);
        let mut state_data = Vec::with_capacity(n_steps * c.obs_dim);
        let mut action_data = Vec::with_capacity(n_actions.max(1) * c.action_dim);
        let mut order = Vec::with_capacity(2 * n_steps + n_actions);
        let mut segments = Vec::with_capacity(seqs.len());
        let mut predict_rows = Vec::new();
        let (mut si, mut ai) = (0usize, 0usize);
        let mut tok = 0usize;
        for s in seqs {
            segments.push(Segment { start: tok, len: s.n_tokens() });
            for i in 0..s.steps() {
                rtg_data.push(s.rtgs[i] * c.rtg_scale);
                state_data.extend_from_slice(&s.states[i]);
                order.push(si);
                order.push(n_steps + si);
                si += 1;
                if i < s.actions.len() {
                    action_data.extend_from_slice(&s.actions[i]);
                    order.push(2 * n_steps + ai);
                    ai += 1;
                }
            }
            predict_rows.extend(s.predict.iter().map(|&i| tok + Sequence::state_token(i)));
            tok += s.n_tokens();
        }

        let embed = |t: &mut Tape, data: Vec<f64>, rows: usize, cols: usize, w: &str, b: &str| {
            let m = t.constant(Mat::from_vec(rows, cols, data));
            let y = t.matmul(m, id(w));
            t.add_row(y, id(b))
        };
        let er = embed(t, rtg_data, n_steps, 1, "embed.rtg.w", "embed.rtg.b");
        let es = embed(t, state_data, n_steps, c.obs_dim, "embed.state.w", "embed.state.b");
        let mut parts = vec![er, es];
        if n_actions > 0 {
            parts.push(embed(t, action_data, n_actions, c.action_dim, "embed.action.w", "embed.action.b"));
        }
        let cat = t.concat_rows(&parts);
        let mut x = t.gather_rows(cat, Arc::new(order));

        let n_tok = tok;
        let e = c.embed_dim;
        let rate = c.dropout;
        let mut apply_dropout = |t: &mut Tape, node: NodeId| -> NodeId {
            match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    use rand::Rng as _;
                    let keep = 1.0 / (1.0 - rate);
                    let mask = (0..n_tok * e).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect();
                    let m = t.constant(Mat::from_vec(n_tok, e, mask));
                    t.mul(node, m)
                }
                _ => node,
            }
        };
        x = apply_dropout(t, x);
        let segments = Arc::new(segments);
        for l in 0..c.n_layers {
            let lin = |t: &mut Tape, h: NodeId, name: &str| {
                let y = t.matmul(h, bid(l, &format!("{name}.w")));
                t.add_row(y, bid(l, &format!("{name}.b")))
            };
            let h = t.layer_norm(x, bid(l, "ln1.g"), bid(l, "ln1.b"));
            let q = lin(t, h, "attn.q");
            let k = lin(t, h, "attn.k");
            let v = lin(t, h, "attn.v");
            let a = t.attention(q, k, v, segments.clone(), c.n_heads);
            let o = lin(t, a, "attn.o");
            let o = apply_dropout(t, o);
            x = t.add(x, o);
            let h = t.layer_norm(x, bid(l, "ln2.g"), bid(l, "ln2.b"));
            let f = lin(t, h, "mlp.fc");
            let f = t.silu(f);
            let f = lin(t, f, "mlp.proj");
            let f = apply_dropout(t, f);
            x = t.add(x, f);
        }
        let x = t.layer_norm(x, id("ln_f.g"), id("ln_f.b"));
        let hsel = t.gather_rows(x, Arc::new(predict_rows));
        let mean = t.matmul(hsel, id("head.mean.w"));
        let mean = t.add_row(mean, id("head.mean.b"));
        let ls = t.matmul(hsel, id("head.log_std.w"));
        let ls = t.add_row(ls, id("head.log_std.b"));
        let ls = t.clamp(ls, c.log_std_min, c.log_std_max);
        Ok((mean, ls))
    }

    /// Action distributions for a batch of sequences, computed on a constant tape.
    pub fn forward_batch(&self, seqs: &[Sequence]) -> Result<Vec<GaussianDist>> {
        let mut t = Tape::new();
        let bound = self.params.bind_const(&mut t);
        let (mean, ls) = self.forward_tape(&mut t, &bound, seqs, None)?;
        let (m, l) = (t.value(mean), t.value(ls));
        Ok((0..m.rows).map(|i| GaussianDist::from_log_std(m.row(i).to_vec(), l.row(i))).collect())
    }
}

/// Tape nodes for a batch of action predictions, one row each.
#[derive(Debug, Clone, Copy)]
pub struct ActionTerms {
    pub mean: NodeId,
    pub log_std: NodeId,
    /// Log-density of the supplied actions.
    pub log_prob: NodeId,
    pub entropy: NodeId,
}

impl DtPolicy {
    /// Forward `seqs` on the tape and score `actions` (one per prediction).
    pub fn action_terms(
        &self,
        t: &mut Tape,
        bound: &Bound,
        seqs: &[Sequence],
        actions: &[Vec<f64>],
        dropout_rng: Option<&mut Rng>,
    ) -> Result<ActionTerms> {
        let (mean, log_std) = self.forward_tape(t, bound, seqs, dropout_rng)?;
        if t.value(mean).rows != actions.len() {
            return Err(Error::Input(format!("{} predictions but {} actions", t.value(mean).rows, actions.len())));
        }
        if let Some(a) = actions.iter().find(|a| a.len() != self.config.action_dim) {
            return Err(Error::Input(format!("action has {} dims, model expects {}", a.len(), self.config.action_dim)));
        }
        let acts = Mat::from_rows(actions, self.config.action_dim);
        let log_prob = tape_log_prob(t, mean, log_std, acts);
        let entropy = tape_entropy(t, log_std);
        Ok(ActionTerms { mean, log_std, log_prob, entropy })
    }

    /// One single-prediction sequence per step of `rec`, teacher-forced from the record.
    pub fn record_sequences(&self, rec: &SubTrajRecord) -> Vec<Sequence> {
        (0..rec.len()).map(|j| Sequence::from_context(&rec.context(j, self.config.context_len))).collect()
    }

    /// Per-step log-probabilities of the record's actions.
    pub fn token_log_probs(&self, rec: &SubTrajRecord) -> Result<Vec<f64>> {
        if rec.is_empty() {
            return Err(Error::Input("record has no steps".into()));
        }
        let seqs = self.record_sequences(rec);
        let actions: Vec<Vec<f64>> = rec.steps.iter().map(|s| s.action.clone()).collect();
        let mut t = Tape::new();
        let bound = self.params.bind_const(&mut t);
        let terms = self.action_terms(&mut t, &bound, &seqs, &actions, None)?;
        Ok(t.value(terms.log_prob).data.clone())
    }

    /// Log-probability of the record's whole action sequence.
    pub fn seq_log_prob(&self, rec: &SubTrajRecord) -> Result<f64> {
        Ok(self.token_log_probs(rec)?.iter().sum())
    }
}

/// Tape-free kernels used by the inference path.
mod plain {
    use super::Mat;
    use crate::dtmodel::mat::dot;

    pub fn linear(x: &Mat, w: &Mat, b: &Mat) -> Mat {
        let mut y = x.matmul(w);
        for i in 0..y.rows {
            for (v, bb) in y.row_mut(i).iter_mut().zip(&b.data) {
                *v += bb;
            }
        }
        y
    }

    pub fn silu(x: f64) -> f64 {
        x / (1.0 + (-x).exp())
    }

    pub fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> Mat {
        let n = x.cols as f64;
        let mut out = Mat::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let r = x.row(i);
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let is = 1.0 / (var + 1e-5).sqrt();
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = (r[j] - mu) * is * g.data[j] + b.data[j];
            }
        }
        out
    }

    pub fn causal_attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
        let (n, e) = q.shape();
        let dh = e / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(n, e);
        let mut w = vec![0.0; n];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let qi = &q.row(i)[cols.clone()];
                let mut mx = f64::NEG_INFINITY;
                for (j, wj) in w.iter_mut().enumerate().take(i + 1) {
                    *wj = dot(qi, &k.row(j)[cols.clone()]) * scale;
                    mx = mx.max(*wj);
                }
                let mut z = 0.0;
                for wj in w.iter_mut().take(i + 1) {
                    *wj = (*wj - mx).exp();
                    z += *wj;
                }
                let o = &mut out.row_mut(i)[cols.clone()];
                for (j, wj) in w.iter().enumerate().take(i + 1) {
                    let a = wj / z;
                    for (oo, vv) in o.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *oo += a * vv;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use crate::traj::Token;
    use rand::Rng as _;

    fn small() -> DtConfig {
        DtConfig { n_layers: 1, n_heads: 2, embed_dim: 8, context_len: 4, action_dim: 2, obs_dim: 3, ..DtConfig::default() }
    }

    fn random_ctx(rng: &mut Rng, cfg: &DtConfig, hist: usize) -> Context {
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let history = (0..hist).map(|_| Token { rtg: v(1)[0] * 5.0, state: v(cfg.obs_dim), action: v(cfg.action_dim) }).collect();
        Context { history, rtg: v(1)[0] * 5.0, state: v(cfg.obs_dim) }
    }

    #[test]
    fn zero_heads_give_standard_normal() {
        let mut rng = rng_from(1);
        let mut pol = DtPolicy::new(small(), &mut rng).unwrap();
        pol.zero_heads();
        for h in 0..4 {
            let d = pol.forward(&random_ctx(&mut rng, &small(), h)).unwrap();
            assert_eq!(d.mean, vec![0.0; 2]);
            assert_eq!(d.var, vec![1.0; 2]);
        }
    }

    #[test]
    fn log_std_bias_shift_scales_variance() {
        let mut rng = rng_from(2);
        let mut pol = DtPolicy::new(small(), &mut rng).unwrap();
        let ctx = random_ctx(&mut rng, &small(), 2);
        let before = pol.forward(&ctx).unwrap();
        pol.params.get_mut("head.log_std.b").data.iter_mut().for_each(|b| *b += 0.1);
        let after = pol.forward(&ctx).unwrap();
        for (a, b) in after.var.iter().zip(&before.var) {
            assert!((a / b - 0.2f64.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn variance_stays_within_clamp() {
        let mut rng = rng_from(3);
        let mut pol = DtPolicy::new(small(), &mut rng).unwrap();
        pol.params.get_mut("head.log_std.w").data.iter_mut().for_each(|w| *w = rng.random_range(-50.0..50.0));
        for _ in 0..200 {
            let d = pol.forward(&random_ctx(&mut rng, &small(), 3)).unwrap();
            assert!(d.var.iter().all(|&v| v >= (-10f64).exp() && v <= 4f64.exp()));
        }
    }

    #[test]
    fn batch_matches_single_and_order_does_not_matter() {
        let mut rng = rng_from(4);
        let pol = DtPolicy::new(small(), &mut rng).unwrap();
        let ctxs: Vec<Context> = (0..4).map(|h| random_ctx(&mut rng, &small(), h)).collect();
        let seqs: Vec<Sequence> = ctxs.iter().map(Sequence::from_context).collect();
        let batch = pol.forward_batch(&seqs).unwrap();
        for (c, b) in ctxs.iter().zip(&batch) {
            let single = pol.forward(c).unwrap();
            for (x, y) in single.mean.iter().zip(&b.mean).chain(single.var.iter().zip(&b.var)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let mut rev = seqs.clone();
        rev.reverse();
        let rb = pol.forward_batch(&rev).unwrap();
        for (a, b) in batch.iter().zip(rb.iter().rev()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn identical_windows_at_different_positions_agree() {
        // The same tokens yield the same output wherever the window came from.
        let mut rng = rng_from(5);
        let pol = DtPolicy::new(small(), &mut rng).unwrap();
        let ctx = random_ctx(&mut rng, &small(), 2);
        let other = random_ctx(&mut rng, &small(), 1);
        let out = pol.forward_batch(&[Sequence::from_context(&other), Sequence::from_context(&ctx)]).unwrap();
        let out2 = pol.forward_batch(&[Sequence::from_context(&ctx), Sequence::from_context(&other)]).unwrap();
        assert_eq!(out[1], out2[0]);
    }

    #[test]
    fn segment_predictions_equal_prefix_contexts() {
        let mut rng = rng_from(6);
        let pol = DtPolicy::new(small(), &mut rng).unwrap();
        let ctx = random_ctx(&mut rng, &small(), 3);
        let full = Sequence::from_context(&ctx);
        let all = Sequence { predict: (0..4).collect(), ..full.clone() };
        let outs = pol.forward_seq(&all).unwrap();
        for (i, o) in outs.iter().enumerate() {
            let prefix = Context { history: ctx.history[..i].to_vec(), rtg: full.rtgs[i], state: full.states[i].clone() };
            let single = pol.forward(&prefix).unwrap();
            for (x, y) in single.mean.iter().zip(&o.mean) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_input_error() {
        let mut rng = rng_from(7);
        let pol = DtPolicy::new(small(), &mut rng).unwrap();
        let mut ctx = random_ctx(&mut rng, &small(), 1);
        ctx.state.push(0.0);
        assert!(matches!(pol.forward(&ctx), Err(Error::Input(_))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut rng = rng_from(8);
        assert!(DtPolicy::new(DtConfig { embed_dim: 9, ..small() }, &mut rng).is_err());
        assert!(DtPolicy::new(DtConfig { context_len: 0, ..small() }, &mut rng).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rng_from(9);
        let pol = DtPolicy::new(small(), &mut rng).unwrap();
        let back = DtPolicy::from_checkpoint(&pol.to_checkpoint()).unwrap();
        assert_eq!(back, pol);
    }
}
