//! Deterministic point-mass control tasks.
//!
//! The state is a double integrator in `[-1, 1]^d`: position and velocity,
//! both clamped after every step, with actions clipped to `[-1, 1]^d`.
//! Two reward families share the dynamics:
//!
//! * dense: forward progress along axis 0, `(x'_0 - x_0) / dt - 0.001 |a|^2`;
//! * sparse: `1` on entering the goal ball (which also ends the episode).
//!
//! Transitions are noise-free, so `reset_to(s)` followed by `step(a)` is a
//! pure function of `(s, a)`.

mod dataset;

pub use dataset::{dataset_digest, load_dataset, save_dataset, DatasetFormat, DatasetHeader};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed::{self, Rng};
use crate::traj::{compute_rtg, RtgForm, Trajectory};

/// Half-width of the start region around the origin.
pub const START_HALF_WIDTH: f64 = 0.1;
/// Seed used when the harness calibrates reference returns.
pub const CALIBRATION_SEED: u64 = 0x5EED;

const EXPERT_KP: f64 = 1.0;
const EXPERT_KD: f64 = 0.5;
const MEDIUM_NOISE: f64 = 0.5;
const ACTION_COST: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    DenseLocomotion,
    SparseGoal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub action_dim: usize,
    pub obs_dim: usize,
    pub horizon: usize,
    pub dt: f64,
    pub reward_kind: RewardKind,
    /// Goal position (sparse only; empty for dense).
    pub goal: Vec<f64>,
    /// Success radius (sparse only).
    pub goal_radius: f64,
    pub ref_random_return: f64,
    pub ref_expert_return: f64,
}

impl EnvSpec {
    /// Dense locomotion analogue with horizon 100. Reference returns are
    /// placeholders until [`calibrate_refs`] is run.
    pub fn dense(action_dim: usize) -> Self {
        Self {
            name: format!("dense-{action_dim}d"),
            action_dim,
            obs_dim: 2 * action_dim,
            horizon: 100,
            dt: 0.1,
            reward_kind: RewardKind::DenseLocomotion,
            goal: Vec::new(),
            goal_radius: 0.0,
            ref_random_return: 0.0,
            ref_expert_return: 1.0,
        }
    }

    /// Sparse goal-reaching analogue: 2-d, goal (0.5, 0.5), radius 0.1, horizon 60.
    pub fn sparse() -> Self {
        Self {
            name: "sparse-2d".to_string(),
            action_dim: 2,
            obs_dim: 4,
            horizon: 60,
            dt: 0.1,
            reward_kind: RewardKind::SparseGoal,
            goal: vec![0.5, 0.5],
            goal_radius: 0.1,
            ref_random_return: 0.0,
            ref_expert_return: 1.0,
        }
    }

    pub fn is_sparse(&self) -> bool {
        self.reward_kind == RewardKind::SparseGoal
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("env spec `{}`: {m}", self.name)));
        if self.horizon < 1 {
            return bad("horizon must be >= 1");
        }
        if self.action_dim < 1 {
            return bad("action_dim must be >= 1");
        }
        if self.obs_dim != 2 * self.action_dim {
            return bad("obs_dim must equal 2 * action_dim");
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if self.is_sparse() {
            if self.goal.len() != self.action_dim {
                return bad("goal dimension must equal action_dim");
            }
            if !(self.goal_radius > 0.0) {
                return bad("goal_radius must be > 0");
            }
        }
        if !(self.ref_expert_return > self.ref_random_return) {
            return bad("ref_expert_return must exceed ref_random_return");
        }
        Ok(())
    }

    /// 100 * (ret - random) / (expert - random).
    pub fn normalized_score(&self, ret: f64) -> f64 {
        100.0 * (ret - self.ref_random_return) / (self.ref_expert_return - self.ref_random_return)
    }

    /// Short content hash of the spec (first 8 bytes of SHA-256 over its JSON).
    pub fn spec_hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("EnvSpec serializes");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub position: Vec<f64>,
    pub velocity: Vec<f64>,
    pub step_index: usize,
}

impl EnvState {
    /// Flattened observation `[position, velocity]`.
    pub fn obs(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 * self.position.len());
        v.extend_from_slice(&self.position);
        v.extend_from_slice(&self.velocity);
        v
    }

    pub fn from_obs(obs: &[f64], step_index: usize) -> Self {
        let d = obs.len() / 2;
        Self { position: obs[..d].to_vec(), velocity: obs[d..].to_vec(), step_index }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub done: bool,
    /// True when the episode ended by reaching a terminal condition rather than the horizon.
    pub terminal: bool,
}

/// One environment instance. Not `Sync`-shared: each thread owns its own.
#[derive(Debug, Clone)]
pub struct Env {
    spec: EnvSpec,
    state: EnvState,
    teleport: bool,
    reset_to_calls: usize,
}

pub fn make_env(spec: EnvSpec) -> Result<Env> {
    spec.validate()?;
    let d = spec.action_dim;
    Ok(Env {
        state: EnvState { position: vec![0.0; d], velocity: vec![0.0; d], step_index: 0 },
        spec,
        teleport: true,
        reset_to_calls: 0,
    })
}

fn clamp_unit(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Pure transition function shared by all instances.
pub fn transition(spec: &EnvSpec, state: &EnvState, action: &[f64]) -> Result<StepResult> {
    if action.len() != spec.action_dim {
        return Err(Error::Input(format!(
            "action has dimension {}, env expects {}",
            action.len(),
            spec.action_dim
        )));
    }
    if state.step_index >= spec.horizon {
        return Err(Error::State("episode already finished".into()));
    }
    let a: Vec<f64> = action.iter().map(|&x| if x.is_nan() { 0.0 } else { clamp_unit(x) }).collect();
    let position: Vec<f64> = state
        .position
        .iter()
        .zip(&state.velocity)
        .map(|(p, v)| clamp_unit(p + v * spec.dt))
        .collect();
    let velocity: Vec<f64> =
        state.velocity.iter().zip(&a).map(|(v, u)| clamp_unit(v + u * spec.dt)).collect();
    let step_index = state.step_index + 1;

    let (reward, terminal) = match spec.reward_kind {
        RewardKind::DenseLocomotion => {
            let cost: f64 = a.iter().map(|u| u * u).sum::<f64>() * ACTION_COST;
            ((position[0] - state.position[0]) / spec.dt - cost, false)
        }
        RewardKind::SparseGoal => {
            let dist2: f64 = position.iter().zip(&spec.goal).map(|(p, g)| (p - g) * (p - g)).sum();
            if dist2.sqrt() <= spec.goal_radius {
                (1.0, true)
            } else {
                (0.0, false)
            }
        }
    };
    Ok(StepResult {
        next_state: EnvState { position, velocity, step_index },
        reward,
        done: terminal || step_index >= spec.horizon,
        terminal,
    })
}

impl Env {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    /// Disable or enable teleport resets (for variants that must not rely on them).
    pub fn set_teleport(&mut self, enabled: bool) {
        self.teleport = enabled;
    }

    pub fn supports_teleport(&self) -> bool {
        self.teleport
    }

    /// Number of `reset_to` calls made on this instance.
    pub fn reset_to_calls(&self) -> usize {
        self.reset_to_calls
    }

    /// Start state drawn from the seeded start distribution: position uniform in
    /// `[-0.1, 0.1]^d`, zero velocity.
    pub fn reset(&mut self, seed: u64) -> EnvState {
        let mut rng = seed::rng_for(seed, "env-reset");
        let d = self.spec.action_dim;
        let position = (0..d).map(|_| rng.random_range(-START_HALF_WIDTH..START_HALF_WIDTH)).collect();
        self.state = EnvState { position, velocity: vec![0.0; d], step_index: 0 };
        self.state.clone()
    }

    pub fn reset_to(&mut self, state: &EnvState) -> Result<EnvState> {
        self.reset_to_calls += 1;
        if !self.teleport {
            return Err(Error::Capability(format!("env `{}` has teleport resets disabled", self.spec.name)));
        }
        let d = self.spec.action_dim;
        if state.position.len() != d || state.velocity.len() != d {
            return Err(Error::Input("state dimension mismatch".into()));
        }
        let in_bounds = state.position.iter().chain(&state.velocity).all(|x| x.is_finite() && x.abs() <= 1.0);
        if !in_bounds {
            return Err(Error::Input("state component outside [-1, 1]".into()));
        }
        if state.step_index >= self.spec.horizon {
            return Err(Error::Input(format!(
                "step_index {} leaves no steps before horizon {}",
                state.step_index, self.spec.horizon
            )));
        }
        self.state = state.clone();
        Ok(self.state.clone())
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let res = transition(&self.spec, &self.state, action)?;
        self.state = res.next_state.clone();
        Ok(res)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Random,
    Medium,
    Expert,
}

impl std::str::FromStr for Quality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "medium" => Ok(Self::Medium),
            "expert" => Ok(Self::Expert),
            _ => Err(Error::Input(format!("unknown dataset quality `{s}`"))),
        }
    }
}

/// Hand-written behavior policies used to build offline datasets.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    quality: Quality,
    target: Vec<f64>,
}

pub fn scripted_policy(quality: Quality, spec: &EnvSpec) -> ScriptedPolicy {
    let target = match spec.reward_kind {
        RewardKind::SparseGoal => spec.goal.clone(),
        RewardKind::DenseLocomotion => {
            let mut t = vec![0.0; spec.action_dim];
            t[0] = 1.0;
            t
        }
    };
    ScriptedPolicy { quality, target }
}

impl ScriptedPolicy {
    pub fn quality(&self) -> Quality {
        self.quality
    }

    /// PD controller toward the target, clamped to the action box.
    pub fn expert_action(&self, state: &EnvState) -> Vec<f64> {
        self.target
            .iter()
            .zip(state.position.iter().zip(&state.velocity))
            .map(|(g, (p, v))| clamp_unit(EXPERT_KP * (g - p) - EXPERT_KD * v))
            .collect()
    }

    pub fn act(&self, state: &EnvState, rng: &mut Rng) -> Vec<f64> {
        match self.quality {
            Quality::Random => (0..self.target.len()).map(|_| rng.random_range(-1.0..=1.0)).collect(),
            Quality::Expert => self.expert_action(state),
            Quality::Medium => {
                let noise = Normal::new(0.0, MEDIUM_NOISE).unwrap();
                self.expert_action(state).into_iter().map(|a| clamp_unit(a + noise.sample(rng))).collect()
            }
        }
    }
}

/// Roll one episode of a scripted policy from `reset(reset_seed)`.
pub fn scripted_episode(env: &mut Env, policy: &ScriptedPolicy, reset_seed: u64, rng: &mut Rng) -> Trajectory {
    let mut state = env.reset(reset_seed);
    let mut tr = Trajectory::empty(RtgForm::Hindsight, 0.0, reset_seed);
    loop {
        let action = policy.act(&state, rng);
        let res = env.step(&action).expect("scripted actions have the env's dimension");
        tr.states.push(state.obs());
        tr.actions.push(action);
        tr.rewards.push(res.reward);
        state = res.next_state;
        if res.done {
            tr.terminated = res.terminal;
            break;
        }
    }
    tr.final_obs = state.obs();
    tr.rtgs = compute_rtg(&tr.rewards).expect("episodes have at least one step");
    tr.g_init = tr.rtgs[0];
    tr
}

/// Full scripted episodes until at least `n_transitions` steps are collected.
/// RTGs are hindsight suffix sums of the recorded rewards.
pub fn generate_offline_dataset(env: &mut Env, quality: Quality, n_transitions: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if n_transitions < env.spec().horizon {
        return Err(Error::Input(format!(
            "n_transitions {} is below the horizon {}",
            n_transitions,
            env.spec().horizon
        )));
    }
    let policy = scripted_policy(quality, env.spec());
    let reset_root = seed::derive(seed, "dataset-reset");
    let mut act_rng = seed::rng_for(seed, "dataset-actions");
    let mut out = Vec::new();
    let mut total = 0;
    while total < n_transitions {
        let tr = scripted_episode(env, &policy, seed::derive_index(reset_root, out.len() as u64), &mut act_rng);
        total += tr.len();
        out.push(tr);
    }
    Ok(out)
}

fn mean_scripted_return(env: &mut Env, quality: Quality, n_episodes: usize, seed: u64) -> f64 {
    let policy = scripted_policy(quality, env.spec());
    let reset_root = seed::derive(seed, "calibrate-reset");
    let mut rng = seed::rng_for(seed, match quality {
        Quality::Random => "calibrate-random",
        Quality::Medium => "calibrate-medium",
        Quality::Expert => "calibrate-expert",
    });
    let total: f64 = (0..n_episodes)
        .map(|e| scripted_episode(env, &policy, seed::derive_index(reset_root, e as u64), &mut rng).total_return())
        .sum();
    total / n_episodes as f64
}

/// Mean returns of the random and expert scripted policies.
pub fn calibrate_refs(env: &mut Env, n_episodes: usize, seed: u64) -> Result<(f64, f64)> {
    if n_episodes == 0 {
        return Err(Error::Input("n_episodes must be >= 1".into()));
    }
    Ok((
        mean_scripted_return(env, Quality::Random, n_episodes, seed),
        mean_scripted_return(env, Quality::Expert, n_episodes, seed),
    ))
}

/// Episodes per policy used by [`calibrated_env`]. Random-policy returns on
/// the dense task have a standard deviation near 7, so 200 episodes would
/// leave several points of noise in every normalized score.
pub const CALIBRATION_EPISODES: usize = 2000;

/// Calibrate `spec` in place and build the env.
pub fn calibrated_env(mut spec: EnvSpec) -> Result<Env> {
    let mut env = make_env(spec.clone())?;
    let (random, expert) = calibrate_refs(&mut env, CALIBRATION_EPISODES, CALIBRATION_SEED)?;
    spec.ref_random_return = random;
    spec.ref_expert_return = expert;
    make_env(spec)
}

/// Mean return of a scripted policy; used by tests and the `calibrate` CLI.
pub fn scripted_mean_return(env: &mut Env, quality: Quality, n_episodes: usize, seed: u64) -> f64 {
    mean_scripted_return(env, quality, n_episodes, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense1() -> Env {
        make_env(EnvSpec::dense(1)).unwrap()
    }

    fn at(pos: &[f64], vel: &[f64], step: usize) -> EnvState {
        EnvState { position: pos.to_vec(), velocity: vel.to_vec(), step_index: step }
    }

    #[test]
    fn zero_action_is_a_fixed_point() {
        let mut env = make_env(EnvSpec::dense(2)).unwrap();
        env.reset_to(&at(&[0.0, 0.0], &[0.0, 0.0], 0)).unwrap();
        let r = env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(r.reward, 0.0);
        assert_eq!(r.next_state.position, vec![0.0, 0.0]);
    }

    #[test]
    fn dense_dynamics_by_hand() {
        let mut env = dense1();
        env.reset_to(&at(&[0.0], &[0.5], 0)).unwrap();
        let r = env.step(&[0.0]).unwrap();
        assert!((r.next_state.position[0] - 0.05).abs() < 1e-15);
        assert!((r.reward - 0.5).abs() < 1e-12);

        env.reset_to(&at(&[0.0], &[0.0], 0)).unwrap();
        let r = env.step(&[1.0]).unwrap();
        assert!((r.next_state.velocity[0] - 0.1).abs() < 1e-15);
        assert_eq!(r.next_state.position[0], 0.0);
        assert!((r.reward + 0.001).abs() < 1e-15);
    }

    #[test]
    fn actions_are_clipped() {
        let mut a = dense1();
        let mut b = dense1();
        let s = at(&[0.2], &[0.1], 3);
        a.reset_to(&s).unwrap();
        b.reset_to(&s).unwrap();
        assert_eq!(a.step(&[5.0]).unwrap(), b.step(&[1.0]).unwrap());
    }

    #[test]
    fn sparse_goal_is_rewarded_and_terminal() {
        let mut env = make_env(EnvSpec::sparse()).unwrap();
        env.reset_to(&at(&[0.5, 0.5], &[0.0, 0.0], 0)).unwrap();
        let r = env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(r.reward, 1.0);
        assert!(r.done && r.terminal);
    }

    #[test]
    fn horizon_ends_the_episode() {
        let mut env = dense1();
        env.reset(1);
        for h in 0..100 {
            let r = env.step(&[0.3]).unwrap();
            assert_eq!(r.done, h == 99);
        }
        assert!(matches!(env.step(&[0.0]), Err(Error::State(_))));

        env.reset_to(&at(&[0.0], &[0.0], 99)).unwrap();
        assert!(env.step(&[-0.4]).unwrap().done);
    }

    #[test]
    fn dimension_mismatch_is_an_input_error() {
        let mut env = dense1();
        env.reset(0);
        assert!(matches!(env.step(&[0.0, 1.0]), Err(Error::Input(_))));
    }

    #[test]
    fn reset_is_deterministic_and_at_rest() {
        let mut env = make_env(EnvSpec::dense(2)).unwrap();
        let a = env.reset(7);
        let b = env.reset(7);
        assert_eq!(a, b);
        assert_eq!(a.velocity, vec![0.0, 0.0]);
        assert!(a.position.iter().all(|p| p.abs() <= START_HALF_WIDTH));
    }

    #[test]
    fn reset_distribution_is_centered() {
        // Uniform on [-0.1, 0.1]: sigma = 0.2 / sqrt(12); 3-sigma bound on the mean of n draws.
        let mut env = make_env(EnvSpec::dense(2)).unwrap();
        let n = 10_000;
        let mut sum = [0.0; 2];
        for s in 0..n {
            let st = env.reset(s);
            sum[0] += st.position[0];
            sum[1] += st.position[1];
        }
        let bound = 3.0 * (0.2 / 12f64.sqrt()) / (n as f64).sqrt();
        for s in sum {
            assert!((s / n as f64).abs() < bound);
        }
    }

    #[test]
    fn reset_to_is_identity_and_consistent() {
        let mut a = make_env(EnvSpec::dense(2)).unwrap();
        let mut b = make_env(EnvSpec::dense(2)).unwrap();
        let s = at(&[0.3, -0.2], &[0.7, -1.0], 17);
        assert_eq!(a.reset_to(&s).unwrap(), s);
        assert_eq!(a.state(), &s);
        b.reset_to(&s).unwrap();
        assert_eq!(a.step(&[0.1, 0.9]).unwrap(), b.step(&[0.1, 0.9]).unwrap());
    }

    #[test]
    fn reset_to_rejects_bad_states() {
        let mut env = dense1();
        assert!(matches!(env.reset_to(&at(&[1.5], &[0.0], 0)), Err(Error::Input(_))));
        assert!(matches!(env.reset_to(&at(&[0.0], &[f64::NAN], 0)), Err(Error::Input(_))));
        assert!(matches!(env.reset_to(&at(&[0.0], &[0.0], 100)), Err(Error::Input(_))));
        env.set_teleport(false);
        assert!(matches!(env.reset_to(&at(&[0.0], &[0.0], 0)), Err(Error::Capability(_))));
        assert_eq!(env.reset_to_calls(), 4);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = EnvSpec::dense(1);
        s.horizon = 0;
        assert!(matches!(make_env(s), Err(Error::Config(_))));
        let mut s = EnvSpec::sparse();
        s.goal_radius = 0.0;
        assert!(make_env(s).is_err());
        let mut s = EnvSpec::dense(1);
        s.ref_expert_return = s.ref_random_return;
        assert!(make_env(s).is_err());
    }

    #[test]
    fn random_policy_is_centered() {
        let spec = EnvSpec::dense(2);
        let pol = scripted_policy(Quality::Random, &spec);
        let mut rng = seed::rng_from(3);
        let st = at(&[0.0, 0.0], &[0.0, 0.0], 0);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let a = pol.act(&st, &mut rng);
            sum[0] += a[0];
            sum[1] += a[1];
        }
        for s in sum {
            assert!((s / n as f64).abs() < 0.01);
        }
    }

    #[test]
    fn quality_tiers_are_ordered() {
        for spec in [EnvSpec::dense(2), EnvSpec::sparse()] {
            let mut env = make_env(spec).unwrap();
            let r = scripted_mean_return(&mut env, Quality::Random, 100, 11);
            let m = scripted_mean_return(&mut env, Quality::Medium, 100, 12);
            let e = scripted_mean_return(&mut env, Quality::Expert, 100, 13);
            assert!(r < m && m < e, "{}: {r} {m} {e}", env.spec().name);
        }
    }

    #[test]
    fn dataset_rtgs_and_determinism() {
        let mut env = make_env(EnvSpec::dense(2)).unwrap();
        let a = generate_offline_dataset(&mut env, Quality::Medium, 1000, 5).unwrap();
        let b = generate_offline_dataset(&mut env, Quality::Medium, 1000, 5).unwrap();
        assert!(a.iter().map(Trajectory::len).sum::<usize>() >= 1000);
        for tr in &a {
            assert!((tr.rtgs[0] - tr.total_return()).abs() < 1e-9);
        }
        assert_eq!(dataset_digest(&env, &a), dataset_digest(&env, &b));
        assert!(generate_offline_dataset(&mut env, Quality::Medium, 99, 5).is_err());
    }

    #[test]
    fn calibration_properties() {
        let mut env = make_env(EnvSpec::dense(2)).unwrap();
        let (r, e) = calibrate_refs(&mut env, 200, 1).unwrap();
        assert!(e > r);
        assert_eq!(calibrate_refs(&mut env, 200, 1).unwrap(), (r, e));

        let mut sparse = make_env(EnvSpec::sparse()).unwrap();
        let (r, e) = calibrate_refs(&mut sparse, 200, 1).unwrap();
        assert!((0.0..=1.0).contains(&r));
        assert!(e > r);
    }

    #[test]
    fn random_dataset_scores_near_zero() {
        let env = calibrated_env(EnvSpec::dense(2)).unwrap();
        let mut e2 = env.clone();
        let data = generate_offline_dataset(&mut e2, Quality::Random, 200_000, 99).unwrap();
        let mean = data.iter().map(Trajectory::total_return).sum::<f64>() / data.len() as f64;
        let score = env.spec().normalized_score(mean);
        assert!(score.abs() < 5.0, "score {score} mean {mean} refs {} {}", env.spec().ref_random_return, env.spec().ref_expert_return);
    }

    #[test]
    fn sparse_returns_are_binary() {
        let mut env = make_env(EnvSpec::sparse()).unwrap();
        let data = generate_offline_dataset(&mut env, Quality::Medium, 3000, 2).unwrap();
        for tr in data {
            let r = tr.total_return();
            assert!(r == 0.0 || r == 1.0);
        }
    }
}
