//! PPO finetuning for Decision Transformers.
//!
//! Full rollouts go into a small trajectory replay. Each iteration draws
//! length-weighted trajectories, cuts one training window from each, scores
//! the window's tokens with GAE from a state-value network, and takes
//! token-level clipped policy steps alongside value regression steps.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dtmodel::gaussian::tape_kl;
use crate::dtmodel::mlp::rows_to_mat;
use crate::dtmodel::{AdamW, Bound, DtPolicy, Mat, Mlp, NodeId, Tape};
use crate::envsim::Env;
use crate::error::{Error, Result};
use crate::grpodt::{eval_row, maybe_update_reference, rollout_full, EntropyDual, IterCallback, LossStats};
use crate::metrics::{mean_var, IterMetrics, UpdateStats};
use crate::pretrain::EvalSettings;
use crate::seed::{self, rng_from};
use crate::traj::{sample_length_weighted, SubTrajRecord, Token, TrajBuffer, Trajectory};

const MAX_LOG_RATIO: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    /// Trajectories rolled per iteration; the replay holds four times this many.
    pub k_ppo: usize,
    pub clip_eps: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub beta: f64,
    pub target_entropy: Option<f64>,
    pub kappa_init: f64,
    pub kappa_lr: f64,
    /// Length of each training window.
    pub c_train: usize,
    pub n_batch: usize,
    pub g_online: f64,
    pub lr: f64,
    pub value_lr: f64,
    pub value_hidden: usize,
    pub value_layer_norm: bool,
    /// Policy and value gradient steps per iteration.
    pub ppo_epochs: usize,
    pub ref_update_period: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            k_ppo: 4,
            clip_eps: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            beta: 1e-3,
            target_entropy: None,
            kappa_init: 0.2,
            kappa_lr: 3e-4,
            c_train: 10,
            n_batch: 16,
            g_online: 10.0,
            lr: 5e-5,
            value_lr: 1e-3,
            value_hidden: 64,
            value_layer_norm: true,
            ppo_epochs: 8,
            ref_update_period: 4,
            weight_decay: 1e-4,
            grad_clip: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.k_ppo == 0 || self.c_train == 0 || self.n_batch == 0 || self.ppo_epochs == 0 || self.value_hidden == 0 {
            return bad("k_ppo, c_train, n_batch, ppo_epochs and value_hidden must be >= 1");
        }
        if !(self.clip_eps > 0.0 && self.beta >= 0.0 && self.kappa_init > 0.0 && self.kappa_lr >= 0.0) {
            return bad("clip_eps and kappa_init must be positive; beta and kappa_lr non-negative");
        }
        if !(self.lr > 0.0 && self.value_lr > 0.0) || self.ref_update_period == 0 {
            return bad("learning rates and ref_update_period must be positive");
        }
        if !self.g_online.is_finite() {
            return bad("g_online must be finite");
        }
        Ok(())
    }

    pub fn replay_capacity(&self) -> usize {
        4 * self.k_ppo
    }
}

/// Generalized advantage estimates by backward recursion. `values` carries
/// one extra trailing entry, the bootstrap value of the state after the last step.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if values.len() != rewards.len() + 1 {
        return Err(Error::Input(format!(
            "gae needs {} values for {} rewards, got {}",
            rewards.len() + 1,
            rewards.len(),
            values.len()
        )));
    }
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for h in (0..rewards.len()).rev() {
        let delta = rewards[h] + gamma * values[h + 1] - values[h];
        acc = delta + gamma * lambda * acc;
        adv[h] = acc;
    }
    Ok(adv)
}

/// Standardize by the batch mean and population standard deviation (plus `1e-8`).
pub fn normalize_batch_advantages(adv: &[f64]) -> Vec<f64> {
    let (m, var) = mean_var(adv);
    let sd = var.sqrt();
    adv.iter().map(|a| (a - m) / (sd + 1e-8)).collect()
}

/// Values of every state of `tr` plus its bootstrap: zero after a terminal
/// step, the value of the final observation after a horizon cut.
pub fn trajectory_values(value: &Mlp, tr: &Trajectory) -> Result<Vec<f64>> {
    let mut v = tr.states.iter().map(|s| value.forward(s)).collect::<Result<Vec<_>>>()?;
    v.push(if tr.terminated { 0.0 } else { value.forward(&tr.final_obs)? });
    Ok(v)
}

/// Steps `start..start + len` of `tr` as a record whose parent context and
/// behavior log-probs reproduce the rollout-time conditioning.
pub fn window_record(tr: &Trajectory, start: usize, len: usize, m: usize) -> SubTrajRecord {
    let end = (start + len).min(tr.len());
    let ctx_start = start.saturating_sub(m.saturating_sub(1));
    let logps = tr.behavior_logprobs[start..end].to_vec();
    SubTrajRecord {
        parent_context: (ctx_start..start).map(|i| tr.token(i)).collect(),
        reset_state: tr.env_state(start),
        reset_rtg: tr.rtgs[start],
        steps: (start..end).map(|i| tr.token(i)).collect::<Vec<Token>>(),
        behavior_seq_logprob: logps.iter().sum(),
        behavior_token_logprobs: logps,
        advantage: 0.0,
        eval_return: 0.0,
    }
}

/// A training window with per-token advantages and frozen value targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub record: SubTrajRecord,
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

/// Token-averaged clipped surrogate plus the KL and entropy terms.
pub fn ppo_loss(
    t: &mut Tape,
    policy: &DtPolicy,
    bound: &Bound,
    reference: &DtPolicy,
    batch: &[&PpoSample],
    cfg: &PpoConfig,
    kappa: f64,
) -> Result<(NodeId, LossStats)> {
    if batch.is_empty() {
        return Err(Error::Input("empty minibatch".into()));
    }
    let mut seqs = Vec::new();
    let mut actions = Vec::new();
    let mut behavior = Vec::new();
    let mut adv = Vec::new();
    for s in batch {
        if s.record.is_empty() || s.advantages.len() != s.record.len() {
            return Err(Error::Input("sample advantages do not match its steps".into()));
        }
        seqs.extend(policy.record_sequences(&s.record));
        actions.extend(s.record.steps.iter().map(|x| x.action.clone()));
        behavior.extend_from_slice(&s.record.behavior_token_logprobs);
        adv.extend_from_slice(&s.advantages);
    }
    let terms = policy.action_terms(t, bound, &seqs, &actions, None)?;
    let d = policy.config.action_dim;
    let ref_dists = reference.forward_batch(&seqs)?;
    let ref_mean = Mat::from_vec(seqs.len(), d, ref_dists.iter().flat_map(|g| g.mean.clone()).collect());
    let ref_ls = Mat::from_vec(seqs.len(), d, ref_dists.iter().flat_map(|g| g.log_std()).collect());
    let kl = tape_kl(t, terms.mean, terms.log_std, ref_mean, ref_ls);
    let kl_term = t.mean_all(kl);
    let ent_term = t.mean_all(terms.entropy);

    let beh = t.constant(Mat::column(&behavior));
    let log_ratio = t.sub(terms.log_prob, beh);
    let raw = t.value(log_ratio).data.clone();
    let clamped = t.clamp(log_ratio, -MAX_LOG_RATIO, MAX_LOG_RATIO);
    let ratio = t.exp(clamped);
    let a = t.constant(Mat::column(&adv));
    let s1 = t.mul(ratio, a);
    let rc = t.clamp(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    let s2 = t.mul(rc, a);
    let obj = t.minimum(s1, s2);
    let surrogate = t.mean_all(obj);
    let pol = t.scale(surrogate, -1.0);
    let klb = t.scale(kl_term, cfg.beta);
    let entk = t.scale(ent_term, -kappa);
    let loss = t.add(pol, klb);
    let loss = t.add(loss, entk);

    let ratios = &t.value(ratio).data;
    let stats = LossStats {
        loss: t.scalar(loss),
        mean_entropy: t.scalar(ent_term),
        mean_ratio: ratios.iter().sum::<f64>() / ratios.len() as f64,
        ratio_log_variance: mean_var(&raw).1,
        kl_to_ref: t.scalar(kl_term),
    };
    Ok((loss, stats))
}

/// Mean squared error of `value` on `states` against fixed `targets`.
pub fn value_loss(t: &mut Tape, value: &Mlp, bound: &Bound, states: &[Vec<f64>], targets: &[f64]) -> Result<NodeId> {
    if states.len() != targets.len() || states.is_empty() {
        return Err(Error::Input(format!("{} states but {} value targets", states.len(), targets.len())));
    }
    let x = t.constant(rows_to_mat(states));
    let pred = value.forward_tape(t, bound, x);
    let y = t.constant(Mat::column(targets));
    let diff = t.sub(pred, y);
    let sq = t.mul(diff, diff);
    Ok(t.mean_all(sq))
}

/// Draw `n_batch` windows from `replay` and attach normalized advantages
/// and value targets computed with the current value network.
pub fn build_batch(
    replay: &TrajBuffer,
    policy: &DtPolicy,
    value: &Mlp,
    cfg: &PpoConfig,
    rng: &mut seed::Rng,
) -> Result<Vec<PpoSample>> {
    let picks = sample_length_weighted(replay, cfg.n_batch, rng)?;
    let mut samples = Vec::with_capacity(picks.len());
    for ti in picks {
        let tr = replay.get(ti).expect("sampled index in range");
        let values = trajectory_values(value, tr)?;
        let adv = gae(&tr.rewards, &values, cfg.gamma, cfg.lambda)?;
        // Short trajectories yield one shorter window.
        let start = if tr.len() > cfg.c_train { rng.random_range(0..=tr.len() - cfg.c_train) } else { 0 };
        let record = window_record(tr, start, cfg.c_train, policy.config.context_len);
        let end = start + record.len();
        let value_targets = (start..end).map(|h| adv[h] + values[h]).collect();
        samples.push(PpoSample { record, advantages: adv[start..end].to_vec(), value_targets });
    }
    let flat: Vec<f64> = samples.iter().flat_map(|s| s.advantages.iter().copied()).collect();
    let mut normed = normalize_batch_advantages(&flat).into_iter();
    for s in &mut samples {
        s.advantages.iter_mut().for_each(|a| *a = normed.next().expect("same length"));
    }
    Ok(samples)
}

pub fn new_value_net(policy: &DtPolicy, cfg: &PpoConfig, seed: u64) -> Result<Mlp> {
    Mlp::new(
        crate::dtmodel::MlpConfig {
            input_dim: policy.config.obs_dim,
            hidden: cfg.value_hidden,
            layer_norm: cfg.value_layer_norm,
            output_init: crate::dtmodel::OutputInit::Small,
        },
        &mut seed::rng_for(seed, "value-init"),
    )
}

/// Finetune `policy` and `value` in place for up to `iterations` iterations.
/// Rows carry an extra `value_loss` column.
#[allow(clippy::too_many_arguments)]
pub fn ppo_dt_train(
    env: &mut Env,
    policy: &mut DtPolicy,
    value: &mut Mlp,
    cfg: &PpoConfig,
    eval: &EvalSettings,
    iterations: usize,
    seed: u64,
    on_iter: &mut IterCallback<'_>,
) -> Result<Vec<IterMetrics>> {
    cfg.validate()?;
    eval.validate()?;
    let rho = cfg.target_entropy.unwrap_or(-(policy.config.action_dim as f64));
    let mut dual = EntropyDual::new(cfg.kappa_init, rho, cfg.kappa_lr);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, Some(cfg.grad_clip));
    let mut vopt = AdamW::new(cfg.value_lr, 0.0, Some(cfg.grad_clip));
    let mut reference = policy.clone();
    let mut replay = TrajBuffer::new(cfg.replay_capacity());
    let mut updates = 0u64;
    let mut env_steps = 0u64;
    let mut out = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let it_seed = seed::derive_index(seed::derive(seed, "ppo-iter"), it as u64);
        let mut rng = seed::rng_for(it_seed, "sampling");
        for r in 0..cfg.k_ppo {
            let mut act_rng = rng_from(seed::derive_index(seed::derive(it_seed, "rollout-actions"), r as u64));
            let reset = seed::derive_index(seed::derive(it_seed, "rollout-reset"), r as u64);
            let tr = rollout_full(env, policy, cfg.g_online, reset, &mut act_rng)?;
            env_steps += tr.len() as u64;
            replay.push(tr);
        }
        let samples = build_batch(&replay, policy, value, cfg, &mut rng)?;
        let batch: Vec<&PpoSample> = samples.iter().collect();
        let states: Vec<Vec<f64>> = samples.iter().flat_map(|s| s.record.steps.iter().map(|x| x.state.clone())).collect();
        let targets: Vec<f64> = samples.iter().flat_map(|s| s.value_targets.iter().copied()).collect();
        let mut stats = UpdateStats::default();
        let mut vloss = 0.0;
        for _ in 0..cfg.ppo_epochs {
            let mut t = Tape::new();
            let bound = policy.params.bind(&mut t);
            let (loss, s) = ppo_loss(&mut t, policy, &bound, &reference, &batch, cfg, dual.kappa())?;
            let mut grads = t.backward(loss);
            let g = policy.params.collect_grads(&bound, &mut grads);
            opt.step(&mut policy.params, &g);
            dual.update(s.mean_entropy);
            updates += 1;
            maybe_update_reference(&mut reference, policy, updates, cfg.ref_update_period);
            stats.push(s.mean_entropy, s.mean_ratio, s.ratio_log_variance, s.kl_to_ref);

            let mut vt = Tape::new();
            let vb = value.params.bind(&mut vt);
            let vl = value_loss(&mut vt, value, &vb, &states, &targets)?;
            vloss = vt.scalar(vl);
            let mut vg = vt.backward(vl);
            let g = value.params.collect_grads(&vb, &mut vg);
            vopt.step(&mut value.params, &g);
        }
        let ev = eval_row(policy, env, eval, cfg.g_online, seed)?;
        let (h, ratio, lv, kl) = stats.means();
        let row = IterMetrics {
            iteration: it + 1,
            env_steps_cumulative: env_steps,
            grad_updates_cumulative: updates,
            eval_score_mean: ev.mean_score,
            eval_score_std: ev.std_score,
            mean_entropy: h,
            kappa: dual.kappa(),
            mean_ratio: ratio,
            ratio_log_variance: lv,
            kl_to_ref: kl,
            groups_kept: 0,
            groups_dropped: 0,
            eval_success_rate: ev.success_rate,
            extras: vec![("value_loss", vloss)],
        };
        let go_on = on_iter(&row);
        out.push(row);
        if !go_on {
            break;
        }
    }
    Ok(out)
}
