//! Group relative policy optimization for Decision Transformers.
//!
//! Each iteration rolls full trajectories with the current policy, picks
//! reset points along sampled trajectories (preferring high action variance),
//! spawns a group of sub-trajectories from each reset point, and trains on
//! group-normalized rewards with a sequence-level clipped importance ratio.

use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dtmodel::gaussian::{log_prob, tape_kl};
use crate::dtmodel::{AdamW, DtPolicy, Mat, NodeId, Tape};
use crate::envsim::Env;
use crate::error::{Error, Result};
use crate::metrics::{mean_var, IterMetrics, UpdateStats};
use crate::pretrain::{evaluate, rollout_episode, ActionMode, EvalSettings};
use crate::seed::{self, rng_from, Rng};
use crate::traj::{
    relabel_hindsight, sample_length_weighted, sample_subtrajectories, Context, SubTrajBuffer, SubTrajRecord, Token,
    TrajBuffer, Trajectory,
};

/// Log-ratios are clamped to this magnitude before exponentiation.
const MAX_LOG_RATIO: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub resets_per_traj: usize,
    pub l_traj: usize,
    pub l_eval: usize,
    pub gamma: f64,
    pub clip_eps: f64,
    pub beta: f64,
    /// Defaults to `-action_dim` when unset.
    pub target_entropy: Option<f64>,
    pub kappa_init: f64,
    pub kappa_lr: f64,
    pub delta_r: f64,
    pub g_online: f64,
    pub n_batch: usize,
    pub rollouts_per_iter: usize,
    pub traj_buffer: usize,
    pub sub_buffer: usize,
    pub trajs_per_iter: usize,
    pub ref_update_period: u64,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub hindsight_relabel: bool,
    pub sequence_ratio: bool,
    pub geometric_mean: bool,
    pub active_sampling: bool,
    pub consistent_states: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            resets_per_traj: 4,
            l_traj: 10,
            l_eval: 40,
            gamma: 0.995,
            clip_eps: 0.2,
            beta: 1e-3,
            target_entropy: None,
            kappa_init: 0.2,
            kappa_lr: 3e-4,
            delta_r: 0.0,
            g_online: 10.0,
            n_batch: 256,
            rollouts_per_iter: 1,
            traj_buffer: 32,
            sub_buffer: 2048,
            trajs_per_iter: 16,
            ref_update_period: 4,
            epochs: 8,
            lr: 5e-5,
            weight_decay: 1e-4,
            grad_clip: 0.5,
            hindsight_relabel: false,
            sequence_ratio: true,
            geometric_mean: false,
            active_sampling: true,
            consistent_states: true,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("grpo: {m}")));
        if self.group_size < 2 {
            return bad("group_size must be >= 2");
        }
        if self.resets_per_traj == 0 || self.l_traj == 0 {
            return bad("resets_per_traj and l_traj must be >= 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.clip_eps > 0.0) || !(self.delta_r >= 0.0) || !(self.beta >= 0.0) {
            return bad("clip_eps must be positive; delta_r and beta non-negative");
        }
        if !(self.kappa_init > 0.0 && self.kappa_lr >= 0.0 && self.lr > 0.0) {
            return bad("kappa_init and lr must be positive, kappa_lr >= 0");
        }
        if self.n_batch == 0 || self.rollouts_per_iter == 0 || self.trajs_per_iter == 0 || self.epochs == 0 {
            return bad("n_batch, rollouts_per_iter, trajs_per_iter and epochs must be >= 1");
        }
        if self.traj_buffer == 0 || self.sub_buffer == 0 || self.ref_update_period == 0 {
            return bad("buffer capacities and ref_update_period must be >= 1");
        }
        if !self.g_online.is_finite() {
            return bad("g_online must be finite");
        }
        Ok(())
    }

    pub fn ratio_mode(&self) -> RatioMode {
        match (self.sequence_ratio, self.geometric_mean) {
            (false, _) => RatioMode::Token,
            (true, true) => RatioMode::GeometricMean,
            (true, false) => RatioMode::Sequence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioMode {
    Sequence,
    GeometricMean,
    Token,
}

/// Lagrange multiplier for the entropy lower bound, kept in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyDual {
    pub log_kappa: f64,
    pub rho: f64,
    pub lr: f64,
}

impl EntropyDual {
    pub fn new(kappa_init: f64, rho: f64, lr: f64) -> Self {
        Self { log_kappa: kappa_init.ln(), rho, lr }
    }

    pub fn kappa(&self) -> f64 {
        self.log_kappa.exp()
    }

    /// `log_kappa += lr * (rho - mean_entropy)`.
    pub fn update(&mut self, mean_entropy: f64) {
        self.log_kappa += self.lr * (self.rho - mean_entropy);
    }
}

/// Copy `policy` into `reference` when `update_counter` is a multiple of `period`.
pub fn maybe_update_reference(reference: &mut DtPolicy, policy: &DtPolicy, update_counter: u64, period: u64) -> bool {
    if update_counter > 0 && update_counter % period == 0 {
        reference.clone_from(policy);
        true
    } else {
        false
    }
}

/// One stochastic episode with rollout-form RTG conditioning.
pub fn rollout_full(env: &mut Env, policy: &DtPolicy, g_online: f64, reset_seed: u64, rng: &mut Rng) -> Result<Trajectory> {
    rollout_episode(env, policy, g_online, reset_seed, ActionMode::Stochastic, rng)
}

/// Softmax over `vars` with max subtraction.
pub fn reset_distribution(vars: &[f64]) -> Vec<f64> {
    let mx = vars.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = vars.iter().map(|v| (v - mx).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Up to `k` distinct reset indices of `tr`, drawn without replacement.
/// Active sampling weights step `h` by the softmax of its recorded mean action variance.
pub fn sample_reset_points(tr: &Trajectory, k: usize, active: bool, rng: &mut Rng) -> Result<Vec<usize>> {
    if tr.is_empty() {
        return Err(Error::Input("cannot pick reset points on an empty trajectory".into()));
    }
    if active && tr.action_vars.len() != tr.len() {
        return Err(Error::Input("trajectory has no recorded action variances".into()));
    }
    let n = tr.len();
    if n <= k {
        return Ok((0..n).collect());
    }
    let mut weights = if active { reset_distribution(&tr.action_vars) } else { vec![1.0; n] };
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = weights.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = n - 1;
        for (i, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc && *w > 0.0 {
                pick = i;
                break;
            }
        }
        while weights[pick] == 0.0 {
            pick -= 1;
        }
        out.push(pick);
        weights[pick] = 0.0;
    }
    Ok(out)
}

/// Group-normalized advantages with the near-mean filter.
///
/// Members within `delta_r` of the full-group mean are dropped; if fewer
/// than two remain the whole group is dropped. Survivors are standardized by
/// their own mean and population standard deviation (plus `1e-8`).
pub fn group_advantages(rewards: &[f64], delta_r: f64) -> (Vec<f64>, Vec<bool>) {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let mut keep: Vec<bool> = rewards.iter().map(|r| (r - mean).abs() >= delta_r).collect();
    let survivors: Vec<f64> = rewards.iter().zip(&keep).filter(|(_, k)| **k).map(|(r, _)| *r).collect();
    if survivors.len() < 2 {
        keep.iter_mut().for_each(|k| *k = false);
        return (vec![0.0; rewards.len()], keep);
    }
    let (m, var) = mean_var(&survivors);
    let sd = var.sqrt();
    let adv = rewards.iter().zip(&keep).map(|(r, k)| if *k { (r - m) / (sd + 1e-8) } else { 0.0 }).collect();
    (adv, keep)
}

/// `sum_t gamma^t r_t`.
pub fn discounted_sum(rewards: &[f64], gamma: f64) -> f64 {
    let mut total = 0.0;
    let mut disc = 1.0;
    for r in rewards {
        total += disc * r;
        disc *= gamma;
    }
    total
}

/// The last `m - 1` steps of `tr` before `k`.
pub fn parent_context(tr: &Trajectory, k: usize, m: usize) -> Vec<Token> {
    let start = k.saturating_sub(m.saturating_sub(1));
    (start..k).map(|i| tr.token(i)).collect()
}

/// A generated member plus the environment steps it consumed.
pub struct Member {
    pub record: SubTrajRecord,
    pub env_steps: u64,
}

/// Roll one group member from reset point `k` of `tr`.
///
/// `relabeled` is the hindsight form of `tr`, required when relabeling is on.
pub fn generate_member(
    env: &mut Env,
    policy: &DtPolicy,
    tr: &Trajectory,
    relabeled: Option<&Trajectory>,
    k: usize,
    cfg: &GrpoConfig,
    rng: &mut Rng,
) -> Result<Member> {
    let m = policy.config.context_len;
    let reset_state = tr.env_state(k);
    let state = env.reset_to(&reset_state)?;
    let parent = parent_context(relabeled.unwrap_or(tr), k, m);
    let mut ctx = Context { history: parent.clone(), rtg: tr.rtgs[k], state: state.obs() };
    let mut steps = Vec::with_capacity(cfg.l_traj);
    let mut logps = Vec::with_capacity(cfg.l_traj);
    let mut rewards = Vec::new();
    let mut done = false;
    let mut env_steps = 0u64;
    for _ in 0..cfg.l_traj {
        let dist = policy.forward(&ctx)?;
        let a = dist.sample(rng);
        logps.push(log_prob(&dist, &a));
        let res = env.step(&a)?;
        env_steps += 1;
        steps.push(Token { rtg: ctx.rtg, state: ctx.state.clone(), action: a.clone() });
        rewards.push(res.reward);
        if res.done {
            done = true;
            break;
        }
        let g = ctx.rtg - res.reward;
        ctx.advance(a, g, res.next_state.obs(), m);
    }
    let tail = if cfg.hindsight_relabel { usize::MAX } else { cfg.l_eval };
    let mut t = 0;
    while !done && t < tail {
        let a = policy.forward(&ctx)?.mean;
        let res = env.step(&a)?;
        env_steps += 1;
        rewards.push(res.reward);
        done = res.done;
        let g = ctx.rtg - res.reward;
        ctx.advance(a, g, res.next_state.obs(), m);
        t += 1;
    }
    let horizon = (steps.len() + cfg.l_eval).min(rewards.len());
    let eval_return = discounted_sum(&rewards[..horizon], cfg.gamma);
    if cfg.hindsight_relabel {
        let mut suffix: f64 = rewards.iter().sum();
        for (j, s) in steps.iter_mut().enumerate() {
            s.rtg = suffix;
            suffix -= rewards[j];
        }
    }
    let record = SubTrajRecord {
        parent_context: parent,
        reset_state,
        reset_rtg: tr.rtgs[k],
        behavior_seq_logprob: logps.iter().sum(),
        behavior_token_logprobs: logps,
        steps,
        advantage: 0.0,
        eval_return,
    };
    Ok(Member { record, env_steps })
}

/// `G` members from the same reset point of `tr`, each with its own action
/// seed `derive_index(group_seed, member)`. `Ok(None)` when fewer than
/// `l_traj` environment steps remain after `k`.
pub fn generate_group(
    env: &mut Env,
    policy: &DtPolicy,
    tr: &Trajectory,
    k: usize,
    cfg: &GrpoConfig,
    group_seed: u64,
) -> Result<Option<(Vec<SubTrajRecord>, u64)>> {
    if !env.supports_teleport() {
        return Err(Error::Capability("environment does not support reset_to; use the Q-guided trainer".into()));
    }
    if env.spec().horizon.saturating_sub(k) < cfg.l_traj {
        return Ok(None);
    }
    let relabeled = cfg.hindsight_relabel.then(|| relabel_hindsight(tr));
    let mut records = Vec::with_capacity(cfg.group_size);
    let mut steps = 0;
    for i in 0..cfg.group_size {
        let mut rng = rng_from(seed::derive_index(group_seed, i as u64));
        let m = generate_member(env, policy, tr, relabeled.as_ref(), k, cfg, &mut rng)?;
        steps += m.env_steps;
        records.push(m.record);
    }
    Ok(Some((records, steps)))
}

/// Importance ratios of `rec` under `policy`: one value in the sequence
/// modes, one per token in token mode.
pub fn record_ratios(policy: &DtPolicy, rec: &SubTrajRecord, mode: RatioMode) -> Result<Vec<f64>> {
    let lps = policy.token_log_probs(rec)?;
    Ok(match mode {
        RatioMode::Sequence => vec![(lps.iter().sum::<f64>() - rec.behavior_seq_logprob).exp()],
        RatioMode::GeometricMean => {
            vec![((lps.iter().sum::<f64>() - rec.behavior_seq_logprob) / rec.len() as f64).exp()]
        }
        RatioMode::Token => lps.iter().zip(&rec.behavior_token_logprobs).map(|(a, b)| (a - b).exp()).collect(),
    })
}

/// Diagnostics gathered while building the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub mean_entropy: f64,
    pub mean_ratio: f64,
    pub ratio_log_variance: f64,
    pub kl_to_ref: f64,
}

/// Tape construction of the clipped objective with KL and entropy terms.
/// Returns the loss node, the weighted mean entropy node and diagnostics.
pub fn grpo_loss(
    t: &mut Tape,
    policy: &DtPolicy,
    bound: &crate::dtmodel::Bound,
    reference: &DtPolicy,
    batch: &[&SubTrajRecord],
    cfg: &GrpoConfig,
    kappa: f64,
) -> Result<(NodeId, LossStats)> {
    if batch.is_empty() {
        return Err(Error::Input("empty minibatch".into()));
    }
    let mode = cfg.ratio_mode();
    let b = batch.len();
    let mut seqs = Vec::new();
    let mut actions = Vec::new();
    let mut owner = Vec::new();
    let mut weights = Vec::new();
    let mut behavior_tok = Vec::new();
    for (i, rec) in batch.iter().enumerate() {
        if rec.is_empty() {
            return Err(Error::Input("record has no steps".into()));
        }
        seqs.extend(policy.record_sequences(rec));
        for (s, lp) in rec.steps.iter().zip(&rec.behavior_token_logprobs) {
            actions.push(s.action.clone());
            owner.push(i);
            weights.push(1.0 / (b * rec.len()) as f64);
            behavior_tok.push(*lp);
        }
    }
    let n_tok = actions.len();
    let terms = policy.action_terms(t, bound, &seqs, &actions, None)?;
    let ref_dists = reference.forward_batch(&seqs)?;
    let d = policy.config.action_dim;
    let ref_mean = Mat::from_vec(n_tok, d, ref_dists.iter().flat_map(|g| g.mean.clone()).collect());
    let ref_ls = Mat::from_vec(n_tok, d, ref_dists.iter().flat_map(|g| g.log_std()).collect());
    let kl = tape_kl(t, terms.mean, terms.log_std, ref_mean, ref_ls);

    let w = t.constant(Mat::column(&weights));
    let weighted_sum = |t: &mut Tape, x: NodeId| {
        let y = t.mul(x, w);
        let m = t.mean_all(y);
        t.scale(m, n_tok as f64)
    };
    let kl_term = weighted_sum(t, kl);
    let ent_term = weighted_sum(t, terms.entropy);

    let eps = cfg.clip_eps;
    let (log_ratio, adv, per_token) = match mode {
        RatioMode::Sequence | RatioMode::GeometricMean => {
            let s = t.segment_sum(terms.log_prob, Arc::new(owner), b);
            let beh = t.constant(Mat::column(&batch.iter().map(|r| r.behavior_seq_logprob).collect::<Vec<_>>()));
            let mut lr = t.sub(s, beh);
            if mode == RatioMode::GeometricMean {
                let inv = t.constant(Mat::column(&batch.iter().map(|r| 1.0 / r.len() as f64).collect::<Vec<_>>()));
                lr = t.mul(lr, inv);
            }
            (lr, batch.iter().map(|r| r.advantage).collect::<Vec<_>>(), false)
        }
        RatioMode::Token => {
            let beh = t.constant(Mat::column(&behavior_tok));
            let lr = t.sub(terms.log_prob, beh);
            let adv = owner.iter().map(|&i| batch[i].advantage).collect();
            (lr, adv, true)
        }
    };
    let raw_log_ratio = t.value(log_ratio).data.clone();
    let clamped = t.clamp(log_ratio, -MAX_LOG_RATIO, MAX_LOG_RATIO);
    let ratio = t.exp(clamped);
    let a = t.constant(Mat::column(&adv));
    let s1 = t.mul(ratio, a);
    let rc = t.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let s2 = t.mul(rc, a);
    let obj = t.minimum(s1, s2);
    let surrogate = if per_token {
        weighted_sum(t, obj)
    } else {
        t.mean_all(obj)
    };
    let pol = t.scale(surrogate, -1.0);
    let klb = t.scale(kl_term, cfg.beta);
    let entk = t.scale(ent_term, -kappa);
    let loss = t.add(pol, klb);
    let loss = t.add(loss, entk);

    let ratios: Vec<f64> = t.value(ratio).data.clone();
    let (_, lv) = mean_var(&raw_log_ratio);
    let stats = LossStats {
        loss: t.scalar(loss),
        mean_entropy: t.scalar(ent_term),
        mean_ratio: ratios.iter().sum::<f64>() / ratios.len() as f64,
        ratio_log_variance: lv,
        kl_to_ref: t.scalar(kl_term),
    };
    Ok((loss, stats))
}

/// Optimizer, entropy dual and slow-moving reference policy.
pub struct GrpoLearner {
    pub opt: AdamW,
    pub dual: EntropyDual,
    pub reference: DtPolicy,
    pub updates: u64,
    pub ref_update_period: u64,
}

impl GrpoLearner {
    pub fn new(policy: &DtPolicy, cfg: &GrpoConfig) -> Self {
        let rho = cfg.target_entropy.unwrap_or(-(policy.config.action_dim as f64));
        Self {
            opt: AdamW::new(cfg.lr, cfg.weight_decay, Some(cfg.grad_clip)),
            dual: EntropyDual::new(cfg.kappa_init, rho, cfg.kappa_lr),
            reference: policy.clone(),
            updates: 0,
            ref_update_period: cfg.ref_update_period,
        }
    }

    /// One gradient step on `batch`, followed by the dual and reference updates.
    pub fn step(&mut self, policy: &mut DtPolicy, batch: &[&SubTrajRecord], cfg: &GrpoConfig) -> Result<LossStats> {
        let mut t = Tape::new();
        let bound = policy.params.bind(&mut t);
        let (loss, stats) = grpo_loss(&mut t, policy, &bound, &self.reference, batch, cfg, self.dual.kappa())?;
        let mut grads = t.backward(loss);
        let g = policy.params.collect_grads(&bound, &mut grads);
        self.opt.step(&mut policy.params, &g);
        self.dual.update(stats.mean_entropy);
        self.updates += 1;
        maybe_update_reference(&mut self.reference, policy, self.updates, self.ref_update_period);
        Ok(stats)
    }
}

/// Called after every iteration; returning `false` stops training early.
pub type IterCallback<'a> = dyn FnMut(&IterMetrics) -> bool + 'a;

pub(crate) fn eval_row(
    policy: &DtPolicy,
    env: &mut Env,
    settings: &EvalSettings,
    g_default: f64,
    seed: u64,
) -> Result<crate::pretrain::EvalResult> {
    let g = settings.g_eval.unwrap_or(g_default);
    evaluate(policy, env, g, settings.episodes, settings.mode, seed::derive(seed, "eval"))
}

/// Finetune `policy` in place for up to `iterations` iterations.
pub fn grpo_dt_train(
    env: &mut Env,
    policy: &mut DtPolicy,
    cfg: &GrpoConfig,
    eval: &EvalSettings,
    iterations: usize,
    seed: u64,
    on_iter: &mut IterCallback<'_>,
) -> Result<Vec<IterMetrics>> {
    cfg.validate()?;
    eval.validate()?;
    let mut learner = GrpoLearner::new(policy, cfg);
    let mut trajs = TrajBuffer::new(cfg.traj_buffer);
    let mut subs = SubTrajBuffer::new(cfg.sub_buffer);
    let mut out = Vec::with_capacity(iterations);
    let (mut env_steps, mut kept_total, mut dropped_total) = (0u64, 0u64, 0u64);
    for it in 0..iterations {
        let it_seed = seed::derive_index(seed::derive(seed, "grpo-iter"), it as u64);
        let mut rng = seed::rng_for(it_seed, "sampling");
        for r in 0..cfg.rollouts_per_iter {
            let mut act_rng = rng_from(seed::derive_index(seed::derive(it_seed, "rollout-actions"), r as u64));
            let tr = rollout_full(env, policy, cfg.g_online, seed::derive_index(seed::derive(it_seed, "rollout-reset"), r as u64), &mut act_rng)?;
            env_steps += tr.len() as u64;
            trajs.push(tr);
        }
        let picks = sample_length_weighted(&trajs, cfg.trajs_per_iter, &mut rng)?;
        let mut group_idx = 0u64;
        for ti in picks {
            let tr = trajs.get(ti).expect("sampled index in range");
            // Full-length members only fit from the start state.
            let ks = if cfg.l_traj >= env.spec().horizon {
                vec![0]
            } else {
                sample_reset_points(tr, cfg.resets_per_traj, cfg.active_sampling, &mut rng)?
            };
            for k in ks {
                let group_seed = seed::derive_index(seed::derive(it_seed, "group"), group_idx);
                group_idx += 1;
                let generated = if cfg.consistent_states {
                    generate_group(env, policy, tr, k, cfg, group_seed)?
                } else {
                    inconsistent_group(env, policy, tr, cfg, group_seed, &mut rng)?
                };
                let Some((mut records, steps)) = generated else {
                    dropped_total += 1;
                    continue;
                };
                env_steps += steps;
                let rewards: Vec<f64> = records.iter().map(|r| r.eval_return).collect();
                let (adv, keep) = group_advantages(&rewards, cfg.delta_r);
                if !keep.iter().any(|k| *k) {
                    dropped_total += 1;
                    continue;
                }
                kept_total += 1;
                for ((mut rec, a), k) in records.drain(..).zip(adv).zip(keep) {
                    if k {
                        rec.advantage = a;
                        subs.push(rec);
                    }
                }
            }
        }
        let mut stats = UpdateStats::default();
        if !subs.is_empty() {
            for _ in 0..cfg.epochs {
                let batch = sample_subtrajectories(&subs, cfg.n_batch, &mut rng)?;
                let s = learner.step(policy, &batch, cfg)?;
                stats.push(s.mean_entropy, s.mean_ratio, s.ratio_log_variance, s.kl_to_ref);
            }
        }
        let ev = eval_row(policy, env, eval, cfg.g_online, seed)?;
        let (h, ratio, lv, kl) = stats.means();
        let row = IterMetrics {
            iteration: it + 1,
            env_steps_cumulative: env_steps,
            grad_updates_cumulative: learner.updates,
            eval_score_mean: ev.mean_score,
            eval_score_std: ev.std_score,
            mean_entropy: h,
            kappa: learner.dual.kappa(),
            mean_ratio: ratio,
            ratio_log_variance: lv,
            kl_to_ref: kl,
            groups_kept: kept_total,
            groups_dropped: dropped_total,
            eval_success_rate: ev.success_rate,
            extras: Vec::new(),
        };
        let go_on = on_iter(&row);
        out.push(row);
        if !go_on {
            break;
        }
    }
    Ok(out)
}

/// Ablation: every member resets to its own reset point of `tr`.
fn inconsistent_group(
    env: &mut Env,
    policy: &DtPolicy,
    tr: &Trajectory,
    cfg: &GrpoConfig,
    group_seed: u64,
    rng: &mut Rng,
) -> Result<Option<(Vec<SubTrajRecord>, u64)>> {
    if !env.supports_teleport() {
        return Err(Error::Capability("environment does not support reset_to; use the Q-guided trainer".into()));
    }
    let horizon = env.spec().horizon;
    let feasible: Vec<usize> = (0..tr.len()).filter(|&k| horizon - k >= cfg.l_traj).collect();
    if feasible.is_empty() {
        return Ok(None);
    }
    let weights: Vec<f64> = if cfg.active_sampling {
        reset_distribution(&feasible.iter().map(|&k| tr.action_vars[k]).collect::<Vec<_>>())
    } else {
        vec![1.0 / feasible.len() as f64; feasible.len()]
    };
    let relabeled = cfg.hindsight_relabel.then(|| relabel_hindsight(tr));
    let mut records = Vec::with_capacity(cfg.group_size);
    let mut steps = 0;
    for i in 0..cfg.group_size {
        let u = rng.random::<f64>();
        let mut acc = 0.0;
        let mut k = *feasible.last().expect("nonempty");
        for (j, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = feasible[j];
                break;
            }
        }
        let mut mrng = rng_from(seed::derive_index(group_seed, i as u64));
        let m = generate_member(env, policy, tr, relabeled.as_ref(), k, cfg, &mut mrng)?;
        steps += m.env_steps;
        records.push(m.record);
    }
    Ok(Some((records, steps)))
}
