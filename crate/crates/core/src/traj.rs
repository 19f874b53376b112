//! Trajectories, return-to-go bookkeeping, context windows and FIFO buffers.

use std::collections::VecDeque;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envsim::EnvState;
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Which recursion a trajectory's RTG column satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RtgForm {
    /// `rtgs[0] = g_init`, `rtgs[h] = rtgs[h-1] - rewards[h-1]`: the values the
    /// policy was actually conditioned on while acting.
    Rollout,
    /// `rtgs[h] = rewards[h] + rtgs[h+1]`: realized suffix sums.
    Hindsight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub rtgs: Vec<f64>,
    pub rtg_form: RtgForm,
    pub g_init: f64,
    pub seed: u64,
    /// Observation after the last action.
    pub final_obs: Vec<f64>,
    /// Ended by a terminal condition (goal reached) rather than the horizon.
    pub terminated: bool,
    /// Per-step log-probabilities of the behavior policy (online rollouts only).
    pub behavior_logprobs: Vec<f64>,
    /// Per-step action variance averaged over action dims (online rollouts only).
    pub action_vars: Vec<f64>,
}

impl Trajectory {
    pub fn empty(rtg_form: RtgForm, g_init: f64, seed: u64) -> Self {
        Self {
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            rtgs: Vec::new(),
            rtg_form,
            g_init,
            seed,
            final_obs: Vec::new(),
            terminated: false,
            behavior_logprobs: Vec::new(),
            action_vars: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Environment state at step `h` (trajectories always start at step 0).
    pub fn env_state(&self, h: usize) -> EnvState {
        EnvState::from_obs(&self.states[h], h)
    }

    pub fn token(&self, h: usize) -> Token {
        Token { rtg: self.rtgs[h], state: self.states[h].clone(), action: self.actions[h].clone() }
    }
}

/// Suffix sums of `rewards`, accumulated from the tail: `out[n-1] = r[n-1]`,
/// `out[h] = r[h] + out[h+1]`.
pub fn compute_rtg(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::Input("compute_rtg needs at least one reward".into()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Input("rewards must be finite".into()));
    }
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (h, r) in rewards.iter().enumerate().rev() {
        acc += r;
        out[h] = acc;
    }
    Ok(out)
}

/// Conditioning RTG for the next step during a rollout.
pub fn rollout_rtg_update(g_prev: f64, r_prev: f64) -> f64 {
    g_prev - r_prev
}

/// Replace rollout-time RTG tokens with realized returns.
pub fn relabel_hindsight(tr: &Trajectory) -> Trajectory {
    let mut out = tr.clone();
    if tr.is_empty() {
        out.rtg_form = RtgForm::Hindsight;
        return out;
    }
    out.rtgs = compute_rtg(&tr.rewards).expect("trajectory rewards are finite");
    out.g_init = out.rtgs[0];
    out.rtg_form = RtgForm::Hindsight;
    out
}

/// One (rtg, state, action) step as seen by the sequence model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub rtg: f64,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
}

/// Model input for one action prediction: up to `m - 1` complete steps followed
/// by the current `(rtg, state)` pair. No padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub history: Vec<Token>,
    pub rtg: f64,
    pub state: Vec<f64>,
}

impl Context {
    pub fn start(rtg: f64, state: Vec<f64>) -> Self {
        Self { history: Vec::new(), rtg, state }
    }

    /// Append the action just taken and move to the next `(rtg, state)`,
    /// keeping at most `m - 1` history steps.
    pub fn advance(&mut self, action: Vec<f64>, next_rtg: f64, next_state: Vec<f64>, m: usize) {
        let prev_state = std::mem::replace(&mut self.state, next_state);
        self.history.push(Token { rtg: self.rtg, state: prev_state, action });
        self.rtg = next_rtg;
        let keep = m.saturating_sub(1);
        if self.history.len() > keep {
            self.history.drain(..self.history.len() - keep);
        }
    }
}

/// Context for predicting the action at step `h` of `tr` with context length `m`.
pub fn window(tr: &Trajectory, h: usize, m: usize) -> Result<Context> {
    if h >= tr.len() {
        return Err(Error::Input(format!("step {h} out of range for trajectory of length {}", tr.len())));
    }
    if m == 0 {
        return Err(Error::Input("context length must be >= 1".into()));
    }
    let start = (h + 1).saturating_sub(m);
    Ok(Context {
        history: (start..h).map(|i| tr.token(i)).collect(),
        rtg: tr.rtgs[h],
        state: tr.states[h].clone(),
    })
}

/// A sub-trajectory generated from a reset point, with frozen behavior log-probs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTrajRecord {
    /// Steps of the parent trajectory preceding the reset point (at most `m - 1`).
    pub parent_context: Vec<Token>,
    pub reset_state: EnvState,
    pub reset_rtg: f64,
    pub steps: Vec<Token>,
    pub behavior_seq_logprob: f64,
    pub behavior_token_logprobs: Vec<f64>,
    pub advantage: f64,
    /// Raw (discounted) reward of the sub-trajectory plus its evaluation tail.
    pub eval_return: f64,
}

impl SubTrajRecord {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Teacher-forced context for step `j` of this record.
    pub fn context(&self, j: usize, m: usize) -> Context {
        let keep = m.saturating_sub(1);
        let own = &self.steps[..j];
        let from_own = own.len().min(keep);
        let from_parent = (keep - from_own).min(self.parent_context.len());
        let mut history = Vec::with_capacity(from_parent + from_own);
        history.extend_from_slice(&self.parent_context[self.parent_context.len() - from_parent..]);
        history.extend_from_slice(&own[own.len() - from_own..]);
        Context { history, rtg: self.steps[j].rtg, state: self.steps[j].state.clone() }
    }
}

/// Bounded FIFO buffer; the oldest item is evicted first.
#[derive(Debug, Clone)]
pub struct Fifo<T> {
    capacity: usize,
    items: VecDeque<T>,
}

pub type TrajBuffer = Fifo<Trajectory>;
pub type SubTrajBuffer = Fifo<SubTrajRecord>;

impl<T> Fifo<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self { capacity, items: VecDeque::with_capacity(capacity.min(4096)) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&T> {
        self.items.get(i)
    }
}

/// `n` draws with replacement, `p(tau) = |tau| / sum |tau'|`.
pub fn sample_trajectories<'a>(buffer: &'a TrajBuffer, n: usize, rng: &mut Rng) -> Result<Vec<&'a Trajectory>> {
    sample_length_weighted(buffer, n, rng).map(|idx| idx.into_iter().map(|i| &buffer.items[i]).collect())
}

/// Indices for [`sample_trajectories`].
pub fn sample_length_weighted(buffer: &TrajBuffer, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let lengths: Vec<usize> = buffer.iter().map(Trajectory::len).collect();
    length_weighted_indices(&lengths, n, rng)
}

/// `n` indices drawn with replacement, `p(i) = lengths[i] / sum(lengths)`.
pub fn length_weighted_indices(lengths: &[usize], n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let mut cumulative = Vec::with_capacity(lengths.len());
    let mut total = 0usize;
    for &l in lengths {
        total += l;
        cumulative.push(total);
    }
    if total == 0 {
        return Err(Error::State("cannot sample from an empty trajectory buffer".into()));
    }
    Ok((0..n)
        .map(|_| {
            let u = rng.random_range(0..total);
            cumulative.partition_point(|&c| c <= u)
        })
        .collect())
}

/// `batch_size` uniform draws with replacement.
pub fn sample_subtrajectories<'a>(
    buffer: &'a SubTrajBuffer,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<&'a SubTrajRecord>> {
    if buffer.is_empty() {
        return Err(Error::State("cannot sample from an empty sub-trajectory buffer".into()));
    }
    Ok((0..batch_size).map(|_| &buffer.items[rng.random_range(0..buffer.len())]).collect())
}
