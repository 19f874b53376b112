//! Q-guided GRPO for environments without teleport resets.
//!
//! Twin critics are trained TD3-style on replayed transitions. Instead of
//! rolling a group of sub-trajectories from a reset point, the policy samples
//! `G` candidate actions at a visited state and the first critic scores them.
//! The scores go through the same group normalization as the reset-based
//! trainer and produce single-step records.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dtmodel::gaussian::log_prob;
use crate::dtmodel::mlp::rows_to_mat;
use crate::dtmodel::{AdamW, Bound, DtPolicy, Mat, Mlp, MlpConfig, NodeId, OutputInit, Sequence, Tape};
use crate::envsim::{Env, EnvState};
use crate::error::{Error, Result};
use crate::grpodt::{
    eval_row, group_advantages, rollout_full, sample_reset_points, GrpoConfig, GrpoLearner, IterCallback,
};
use crate::metrics::{IterMetrics, UpdateStats};
use crate::pretrain::EvalSettings;
use crate::seed::{self, rng_from, Rng};
use crate::traj::{
    sample_length_weighted, sample_subtrajectories, window, Context, Fifo, SubTrajBuffer, SubTrajRecord, Token,
    TrajBuffer, Trajectory,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Td3Config {
    pub gamma: f64,
    pub tau: f64,
    pub noise_std: f64,
    pub noise_clip: f64,
    pub critic_lr: f64,
    pub hidden: usize,
    pub layer_norm: bool,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Critic gradient steps per iteration.
    pub updates_per_iter: usize,
}

impl Default for Td3Config {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            noise_std: 0.2,
            noise_clip: 0.5,
            critic_lr: 3e-4,
            hidden: 64,
            layer_norm: true,
            batch_size: 256,
            buffer_capacity: 100_000,
            updates_per_iter: 50,
        }
    }
}

impl Td3Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("td3: {m}")));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if !(self.noise_std >= 0.0 && self.noise_clip >= 0.0 && self.critic_lr > 0.0) {
            return bad("noise parameters must be non-negative and critic_lr positive");
        }
        if self.hidden == 0 || self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("hidden, batch_size and buffer_capacity must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QGuidedConfig {
    /// Group, buffer and optimizer settings. `l_traj` is ignored: records are single steps.
    pub grpo: GrpoConfig,
    pub td3: Td3Config,
}

impl Default for QGuidedConfig {
    fn default() -> Self {
        Self { grpo: GrpoConfig { lr: 1e-5, kappa_init: 1e-2, l_traj: 1, ..GrpoConfig::default() }, td3: Td3Config::default() }
    }
}

impl QGuidedConfig {
    pub fn validate(&self) -> Result<()> {
        self.grpo.validate()?;
        self.td3.validate()
    }
}

/// One environment step. `next_rtg` is the conditioning return the policy saw at `next_state`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub next_rtg: f64,
    /// True only for terminal steps; horizon cuts still bootstrap.
    pub done: bool,
}

/// All transitions of a rollout-form trajectory.
pub fn trajectory_transitions(tr: &Trajectory) -> Vec<Transition> {
    (0..tr.len())
        .map(|h| {
            let last = h + 1 == tr.len();
            Transition {
                state: tr.states[h].clone(),
                action: tr.actions[h].clone(),
                reward: tr.rewards[h],
                next_state: if last { tr.final_obs.clone() } else { tr.states[h + 1].clone() },
                next_rtg: tr.rtgs[h] - tr.rewards[h],
                done: last && tr.terminated,
            }
        })
        .collect()
}

/// Critic input row: the state followed by the action clamped to the env's bounds.
pub fn critic_input(state: &[f64], action: &[f64]) -> Vec<f64> {
    state.iter().copied().chain(action.iter().map(|a| a.clamp(-1.0, 1.0))).collect()
}

/// Twin critics with Polyak-averaged targets.
#[derive(Debug, Clone)]
pub struct Td3Critics {
    pub q1: Mlp,
    pub q2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    opt1: AdamW,
    opt2: AdamW,
}

impl Td3Critics {
    pub fn new(obs_dim: usize, action_dim: usize, cfg: &Td3Config, seed: u64) -> Result<Self> {
        let mc = MlpConfig {
            input_dim: obs_dim + action_dim,
            hidden: cfg.hidden,
            layer_norm: cfg.layer_norm,
            output_init: OutputInit::Small,
        };
        let q1 = Mlp::new(mc.clone(), &mut seed::rng_for(seed, "q1-init"))?;
        let q2 = Mlp::new(mc, &mut seed::rng_for(seed, "q2-init"))?;
        Ok(Self {
            target1: q1.clone(),
            target2: q2.clone(),
            q1,
            q2,
            opt1: AdamW::new(cfg.critic_lr, 0.0, None),
            opt2: AdamW::new(cfg.critic_lr, 0.0, None),
        })
    }
}

/// Bootstrap targets `r + gamma (1 - done) min(Q1', Q2')(s', a~)`, where
/// `a~` is the policy's mean action at `(next_rtg, s')` plus clipped noise.
pub fn td3_targets(critics: &Td3Critics, policy: &DtPolicy, batch: &[&Transition], cfg: &Td3Config, rng: &mut Rng) -> Result<Vec<f64>> {
    let seqs: Vec<Sequence> =
        batch.iter().map(|tr| Sequence::from_context(&Context::start(tr.next_rtg, tr.next_state.clone()))).collect();
    let dists = policy.forward_batch(&seqs)?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(batch.len());
    for (tr, d) in batch.iter().zip(dists) {
        if tr.done {
            out.push(tr.reward);
            continue;
        }
        let a: Vec<f64> = d
            .mean
            .iter()
            .map(|m| (m + noise.sample(rng).clamp(-cfg.noise_clip, cfg.noise_clip)).clamp(-1.0, 1.0))
            .collect();
        let x = critic_input(&tr.next_state, &a);
        let q = critics.target1.forward(&x)?.min(critics.target2.forward(&x)?);
        out.push(tr.reward + cfg.gamma * q);
    }
    Ok(out)
}

/// Mean squared error of `q` on `(s, a)` rows against fixed targets.
pub fn critic_loss(t: &mut Tape, q: &Mlp, bound: &Bound, inputs: &Mat, targets: &[f64]) -> NodeId {
    let x = t.constant(inputs.clone());
    let pred = q.forward_tape(t, bound, x);
    let y = t.constant(Mat::column(targets));
    let diff = t.sub(pred, y);
    let sq = t.mul(diff, diff);
    t.mean_all(sq)
}

/// One regression step for both critics followed by the target updates.
/// Returns the mean of the two critic losses.
pub fn td3_update(
    critics: &mut Td3Critics,
    policy: &DtPolicy,
    batch: &[&Transition],
    cfg: &Td3Config,
    rng: &mut Rng,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty transition batch".into()));
    }
    let y = td3_targets(critics, policy, batch, cfg, rng)?;
    let inputs = rows_to_mat(&batch.iter().map(|tr| critic_input(&tr.state, &tr.action)).collect::<Vec<_>>());
    let mut total = 0.0;
    for (q, opt) in [(&mut critics.q1, &mut critics.opt1), (&mut critics.q2, &mut critics.opt2)] {
        let mut t = Tape::new();
        let b = q.params.bind(&mut t);
        let loss = critic_loss(&mut t, q, &b, &inputs, &y);
        total += t.scalar(loss);
        let mut g = t.backward(loss);
        let grads = q.params.collect_grads(&b, &mut g);
        opt.step(&mut q.params, &grads);
    }
    critics.target1.params.polyak_from(&critics.q1.params, cfg.tau);
    critics.target2.params.polyak_from(&critics.q2.params, cfg.tau);
    Ok(total / 2.0)
}

/// A scored group of candidate actions at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct QGroup {
    /// Single-step records carrying their advantages.
    pub records: Vec<SubTrajRecord>,
    pub q_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub keep: Vec<bool>,
}

/// Sample `g` actions from the policy at `ctx`, score them with `q1`, and
/// normalize the scores with [`group_advantages`].
pub fn q_group_advantages(
    policy: &DtPolicy,
    q1: &Mlp,
    ctx: &Context,
    step_index: usize,
    g: usize,
    delta_r: f64,
    rng: &mut Rng,
) -> Result<QGroup> {
    if g < 2 {
        return Err(Error::Config("group size must be >= 2".into()));
    }
    let dist = policy.forward(ctx)?;
    let mut records = Vec::with_capacity(g);
    let mut q_values = Vec::with_capacity(g);
    for _ in 0..g {
        let a = dist.sample(rng);
        let lp = log_prob(&dist, &a);
        q_values.push(q1.forward(&critic_input(&ctx.state, &a))?);
        records.push(SubTrajRecord {
            parent_context: ctx.history.clone(),
            reset_state: EnvState::from_obs(&ctx.state, step_index),
            reset_rtg: ctx.rtg,
            steps: vec![Token { rtg: ctx.rtg, state: ctx.state.clone(), action: a }],
            behavior_seq_logprob: lp,
            behavior_token_logprobs: vec![lp],
            advantage: 0.0,
            eval_return: 0.0,
        });
    }
    let (advantages, keep) = group_advantages(&q_values, delta_r);
    for ((r, a), q) in records.iter_mut().zip(&advantages).zip(&q_values) {
        r.advantage = *a;
        r.eval_return = *q;
    }
    Ok(QGroup { records, q_values, advantages, keep })
}

/// Finetune `policy` without touching `reset_to`. Rows carry extra
/// `q_loss` and `mean_q` columns.
#[allow(clippy::too_many_arguments)]
pub fn qguided_train(
    env: &mut Env,
    policy: &mut DtPolicy,
    critics: &mut Td3Critics,
    cfg: &QGuidedConfig,
    eval: &EvalSettings,
    iterations: usize,
    seed: u64,
    on_iter: &mut IterCallback<'_>,
) -> Result<Vec<IterMetrics>> {
    cfg.validate()?;
    eval.validate()?;
    let g = &cfg.grpo;
    let g1 = GrpoConfig { l_traj: 1, ..g.clone() };
    let mut learner = GrpoLearner::new(policy, &g1);
    let mut trajs = TrajBuffer::new(g.traj_buffer);
    let mut subs = SubTrajBuffer::new(g.sub_buffer);
    let mut replay: Fifo<Transition> = Fifo::new(cfg.td3.buffer_capacity);
    let m = policy.config.context_len;
    let mut out = Vec::with_capacity(iterations);
    let (mut env_steps, mut kept_total, mut dropped_total) = (0u64, 0u64, 0u64);
    for it in 0..iterations {
        let it_seed = seed::derive_index(seed::derive(seed, "qguided-iter"), it as u64);
        let mut rng = seed::rng_for(it_seed, "sampling");
        for r in 0..g.rollouts_per_iter {
            let mut act_rng = rng_from(seed::derive_index(seed::derive(it_seed, "rollout-actions"), r as u64));
            let reset = seed::derive_index(seed::derive(it_seed, "rollout-reset"), r as u64);
            let tr = rollout_full(env, policy, g.g_online, reset, &mut act_rng)?;
            env_steps += tr.len() as u64;
            trajectory_transitions(&tr).into_iter().for_each(|x| replay.push(x));
            trajs.push(tr);
        }

        let mut critic_rng = seed::rng_for(it_seed, "critic");
        let mut q_loss = 0.0;
        for _ in 0..cfg.td3.updates_per_iter {
            let batch: Vec<&Transition> = (0..cfg.td3.batch_size)
                .map(|_| replay.get(rand::Rng::random_range(&mut critic_rng, 0..replay.len())).expect("in range"))
                .collect();
            q_loss = td3_update(critics, policy, &batch, &cfg.td3, &mut critic_rng)?;
        }

        let picks = sample_length_weighted(&trajs, g.trajs_per_iter, &mut rng)?;
        let (mut q_sum, mut q_n) = (0.0, 0usize);
        let mut group_idx = 0u64;
        for ti in picks {
            let tr = trajs.get(ti).expect("sampled index in range");
            for k in sample_reset_points(tr, g.resets_per_traj, g.active_sampling, &mut rng)? {
                let ctx = window(tr, k, m)?;
                let mut grng = rng_from(seed::derive_index(seed::derive(it_seed, "group"), group_idx));
                group_idx += 1;
                let group = q_group_advantages(policy, &critics.q1, &ctx, k, g.group_size, g.delta_r, &mut grng)?;
                q_sum += group.q_values.iter().sum::<f64>();
                q_n += group.q_values.len();
                if !group.keep.iter().any(|x| *x) {
                    dropped_total += 1;
                    continue;
                }
                kept_total += 1;
                for (rec, keep) in group.records.into_iter().zip(group.keep) {
                    if keep {
                        subs.push(rec);
                    }
                }
            }
        }

        let mut stats = UpdateStats::default();
        if !subs.is_empty() {
            for _ in 0..g.epochs {
                let batch = sample_subtrajectories(&subs, g.n_batch, &mut rng)?;
                let s = learner.step(policy, &batch, &g1)?;
                stats.push(s.mean_entropy, s.mean_ratio, s.ratio_log_variance, s.kl_to_ref);
            }
        }
        let ev = eval_row(policy, env, eval, g.g_online, seed)?;
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
            extras: vec![("q_loss", q_loss), ("mean_q", if q_n > 0 { q_sum / q_n as f64 } else { f64::NAN })],
        };
        let go_on = on_iter(&row);
        out.push(row);
        if !go_on {
            break;
        }
    }
    Ok(out)
}
