//! Offline supervised pretraining, episode rollouts and policy evaluation.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dtmodel::gaussian::{entropy, log_prob, GaussianDist};
use crate::dtmodel::{AdamW, DtPolicy, Mat, NodeId, Sequence, Tape};
use crate::envsim::{Env, EnvState, ScriptedPolicy};
use crate::error::{Error, Result};
use crate::grpodt::EntropyDual;
use crate::seed::{self, Rng};
use crate::traj::{length_weighted_indices, rollout_rtg_update, Context, RtgForm, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionMode {
    Stochastic,
    #[default]
    Mean,
}

impl std::str::FromStr for ActionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(Self::Stochastic),
            "mean" | "mean-action" => Ok(Self::Mean),
            other => Err(Error::Input(format!("unknown action mode {other:?}"))),
        }
    }
}

/// One chosen action with the statistics rollouts record.
#[derive(Debug, Clone, PartialEq)]
pub struct ActStep {
    pub action: Vec<f64>,
    /// Log-density of `action` under the policy (0 for policies without one).
    pub log_prob: f64,
    /// Mean per-dimension action variance.
    pub mean_var: f64,
}

/// Anything that maps a context to an action.
pub trait Policy {
    fn context_len(&self) -> usize;
    fn act(&self, ctx: &Context, mode: ActionMode, rng: &mut Rng) -> Result<ActStep>;
}

pub(crate) fn act_from_dist(dist: &GaussianDist, mode: ActionMode, rng: &mut Rng) -> ActStep {
    let action = match mode {
        ActionMode::Stochastic => dist.sample(rng),
        ActionMode::Mean => dist.mean.clone(),
    };
    ActStep { log_prob: log_prob(dist, &action), mean_var: dist.mean_var(), action }
}

impl Policy for DtPolicy {
    fn context_len(&self) -> usize {
        self.config.context_len
    }

    fn act(&self, ctx: &Context, mode: ActionMode, rng: &mut Rng) -> Result<ActStep> {
        Ok(act_from_dist(&self.forward(ctx)?, mode, rng))
    }
}

/// Scripted controllers see only the current observation.
impl Policy for ScriptedPolicy {
    fn context_len(&self) -> usize {
        1
    }

    fn act(&self, ctx: &Context, _mode: ActionMode, rng: &mut Rng) -> Result<ActStep> {
        let action = ScriptedPolicy::act(self, &EnvState::from_obs(&ctx.state, 0), rng);
        Ok(ActStep { action, log_prob: 0.0, mean_var: 0.0 })
    }
}

/// Roll one episode from `reset(reset_seed)` with rollout-form RTG
/// conditioning starting at `g_init`. Behavior log-probs and mean action
/// variances are recorded per step.
pub fn rollout_episode(
    env: &mut Env,
    policy: &dyn Policy,
    g_init: f64,
    reset_seed: u64,
    mode: ActionMode,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let m = policy.context_len();
    let state = env.reset(reset_seed);
    let mut tr = Trajectory::empty(RtgForm::Rollout, g_init, reset_seed);
    let mut ctx = Context::start(g_init, state.obs());
    loop {
        let step = policy.act(&ctx, mode, rng)?;
        let res = env.step(&step.action)?;
        tr.states.push(ctx.state.clone());
        tr.actions.push(step.action.clone());
        tr.rewards.push(res.reward);
        tr.rtgs.push(ctx.rtg);
        tr.behavior_logprobs.push(step.log_prob);
        tr.action_vars.push(step.mean_var);
        let next_obs = res.next_state.obs();
        if res.done {
            tr.terminated = res.terminal;
            tr.final_obs = next_obs;
            break;
        }
        let g = rollout_rtg_update(ctx.rtg, res.reward);
        ctx.advance(step.action, g, next_obs, m);
    }
    Ok(tr)
}

/// How trainers evaluate after each iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub episodes: usize,
    pub mode: ActionMode,
    /// Conditioning return; trainers fall back to their `g_online`.
    pub g_eval: Option<f64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { episodes: 10, mode: ActionMode::Mean, g_eval: None }
    }
}

impl EvalSettings {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("eval: episodes must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub mean_score: f64,
    pub std_score: f64,
    pub mean_return: f64,
    /// Fraction of episodes that ended by reaching a terminal goal.
    pub success_rate: f64,
}

/// Normalized score over `n_episodes` episodes whose reset seeds derive from `seed`.
pub fn evaluate(
    policy: &dyn Policy,
    env: &mut Env,
    g_eval: f64,
    n_episodes: usize,
    mode: ActionMode,
    seed: u64,
) -> Result<EvalResult> {
    if n_episodes == 0 {
        return Err(Error::Input("evaluation needs at least one episode".into()));
    }
    let resets = seed::derive(seed, "eval-reset");
    let mut rng = seed::rng_for(seed, "eval-actions");
    let mut scores = Vec::with_capacity(n_episodes);
    let mut returns = 0.0;
    let mut successes = 0usize;
    for e in 0..n_episodes {
        let tr = rollout_episode(env, policy, g_eval, seed::derive_index(resets, e as u64), mode, &mut rng)?;
        let ret = tr.total_return();
        returns += ret;
        successes += usize::from(tr.terminated);
        scores.push(env.spec().normalized_score(ret));
    }
    let n = n_episodes as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    Ok(EvalResult { mean_score: mean, std_score: var.sqrt(), mean_return: returns / n, success_rate: successes as f64 / n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PretrainLoss {
    #[default]
    Nll,
    /// Squared error on the mean; the deterministic-DT baseline.
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub n_batch: usize,
    /// Segment length `c_offline`.
    pub context: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Defaults to `-action_dim` when unset.
    pub target_entropy: Option<f64>,
    pub kappa_init: f64,
    pub kappa_lr: f64,
    pub loss: PretrainLoss,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            n_batch: 64,
            context: 20,
            steps: 5000,
            lr: 1e-4,
            weight_decay: 1e-4,
            grad_clip: 0.5,
            target_entropy: None,
            kappa_init: 0.1,
            kappa_lr: 3e-4,
            loss: PretrainLoss::Nll,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_batch == 0 || self.context == 0 {
            return Err(Error::Config("pretrain: n_batch and context must be positive".into()));
        }
        if !(self.lr > 0.0 && self.kappa_init > 0.0 && self.kappa_lr >= 0.0) {
            return Err(Error::Config("pretrain: lr and kappa_init must be positive, kappa_lr >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PretrainStep {
    pub step: usize,
    pub loss: f64,
    pub nll: f64,
    pub entropy: f64,
    pub kappa: f64,
}

/// A sampled pretraining batch: segments plus the action targets of every prediction.
pub struct PretrainBatch {
    pub seqs: Vec<Sequence>,
    pub targets: Vec<Vec<f64>>,
}

/// `n_batch` segments: trajectories length-weighted, start uniform.
pub fn sample_pretrain_batch(dataset: &[Trajectory], n_batch: usize, context: usize, rng: &mut Rng) -> Result<PretrainBatch> {
    let lengths: Vec<usize> = dataset.iter().map(Trajectory::len).collect();
    let idx = length_weighted_indices(&lengths, n_batch, rng)?;
    let mut seqs = Vec::with_capacity(n_batch);
    let mut targets = Vec::new();
    for i in idx {
        let tr = &dataset[i];
        let len = context.min(tr.len());
        let start = rng.random_range(0..=tr.len() - len);
        targets.extend_from_slice(&tr.actions[start..start + len]);
        seqs.push(Sequence::segment(tr, start, len));
    }
    Ok(PretrainBatch { seqs, targets })
}

/// Loss node and `(nll, entropy)` node pair for a batch.
pub fn pretrain_loss(
    t: &mut Tape,
    policy: &DtPolicy,
    bound: &crate::dtmodel::Bound,
    batch: &PretrainBatch,
    kappa: f64,
    loss: PretrainLoss,
    dropout_rng: Option<&mut Rng>,
) -> Result<(NodeId, NodeId, NodeId)> {
    let terms = policy.action_terms(t, bound, &batch.seqs, &batch.targets, dropout_rng)?;
    let lp = t.mean_all(terms.log_prob);
    let nll = t.scale(lp, -1.0);
    let ent = t.mean_all(terms.entropy);
    let total = match loss {
        PretrainLoss::Nll => {
            let bonus = t.scale(ent, -kappa);
            t.add(nll, bonus)
        }
        PretrainLoss::Mse => {
            let a = t.constant(Mat::from_rows(&batch.targets, policy.config.action_dim));
            let d = t.sub(terms.mean, a);
            let sq = t.mul(d, d);
            t.mean_all(sq)
        }
    };
    Ok((total, nll, ent))
}

/// Mean NLL over a fixed batch, without dropout.
pub fn batch_nll(policy: &DtPolicy, batch: &PretrainBatch) -> Result<f64> {
    let mut t = Tape::new();
    let bound = policy.params.bind_const(&mut t);
    let (_, nll, _) = pretrain_loss(&mut t, policy, &bound, batch, 0.0, PretrainLoss::Nll, None)?;
    Ok(t.scalar(nll))
}

/// Train `policy` in place for `cfg.steps` steps.
pub fn pretrain_dt(policy: &mut DtPolicy, dataset: &[Trajectory], cfg: &PretrainConfig, seed: u64) -> Result<Vec<PretrainStep>> {
    cfg.validate()?;
    if dataset.iter().all(Trajectory::is_empty) {
        return Err(Error::Input("pretraining dataset is empty".into()));
    }
    let rho = cfg.target_entropy.unwrap_or(-(policy.config.action_dim as f64));
    let mut dual = EntropyDual::new(cfg.kappa_init, rho, cfg.kappa_lr);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, Some(cfg.grad_clip));
    let mut batch_rng = seed::rng_for(seed, "pretrain-batch");
    let mut drop_rng = seed::rng_for(seed, "pretrain-dropout");
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_pretrain_batch(dataset, cfg.n_batch, cfg.context, &mut batch_rng)?;
        let mut t = Tape::new();
        let bound = policy.params.bind(&mut t);
        let kappa = dual.kappa();
        let (loss, nll, ent) = pretrain_loss(&mut t, policy, &bound, &batch, kappa, cfg.loss, Some(&mut drop_rng))?;
        let mut grads = t.backward(loss);
        let g = policy.params.collect_grads(&bound, &mut grads);
        opt.step(&mut policy.params, &g);
        let h = t.scalar(ent);
        if cfg.loss == PretrainLoss::Nll {
            dual.update(h);
        }
        log.push(PretrainStep { step, loss: t.scalar(loss), nll: t.scalar(nll), entropy: h, kappa });
    }
    Ok(log)
}

/// Plain per-prediction entropies, used by diagnostics.
pub fn mean_entropy(dists: &[GaussianDist]) -> f64 {
    dists.iter().map(entropy).sum::<f64>() / dists.len().max(1) as f64
}
