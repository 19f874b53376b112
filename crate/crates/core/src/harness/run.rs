//! Seeded training pipelines and run directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::dtmodel::DtPolicy;
use crate::envsim::{calibrated_env, generate_offline_dataset, Env};
use crate::error::{Error, Result};
use crate::grpodt::{grpo_dt_train, IterCallback};
use crate::metrics::{csv_digest, to_csv, IterMetrics};
use crate::ppodt::{new_value_net, ppo_dt_train};
use crate::pretrain::{pretrain_dt, PretrainStep};
use crate::qguided::{qguided_train, Td3Critics};
use crate::seed;
use crate::traj::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Grpo,
    Ppo,
    Qguided,
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(Self::Grpo),
            "ppo" => Ok(Self::Ppo),
            "qguided" => Ok(Self::Qguided),
            other => Err(Error::Input(format!("unknown algorithm {other:?} (expected grpo, ppo or qguided)"))),
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Grpo => "grpo",
            Self::Ppo => "ppo",
            Self::Qguided => "qguided",
        })
    }
}

/// Calibrated environment for `cfg`.
pub fn build_env(cfg: &TrainConfig) -> Result<Env> {
    calibrated_env(cfg.env.spec())
}

/// The offline dataset `cfg` describes, generated from `cfg.seed`.
pub fn build_dataset(env: &mut Env, cfg: &TrainConfig) -> Result<Vec<Trajectory>> {
    generate_offline_dataset(env, cfg.data.quality, cfg.data.transitions, seed::derive(cfg.seed, "dataset"))
}

/// Fresh policy pretrained on `dataset`.
pub fn pretrain_policy(cfg: &TrainConfig, dataset: &[Trajectory]) -> Result<(DtPolicy, Vec<PretrainStep>)> {
    let mut policy = DtPolicy::new(cfg.model.clone(), &mut seed::rng_for(cfg.seed, "model-init"))?;
    let steps = pretrain_dt(&mut policy, dataset, &cfg.pretrain, seed::derive(cfg.seed, "pretrain"))?;
    Ok((policy, steps))
}

/// Dataset generation plus pretraining in one call.
pub fn prepare_policy(cfg: &TrainConfig) -> Result<DtPolicy> {
    let mut env = build_env(cfg)?;
    let data = build_dataset(&mut env, cfg)?;
    Ok(pretrain_policy(cfg, &data)?.0)
}

pub fn pretrain_csv(steps: &[PretrainStep], header_note: &str) -> String {
    let mut out = String::new();
    if !header_note.is_empty() {
        let _ = writeln!(out, "# {header_note}");
    }
    out.push_str("step,loss,nll,entropy,kappa\n");
    for s in steps {
        let _ = writeln!(out, "{},{},{},{},{}", s.step, s.loss, s.nll, s.entropy, s.kappa);
    }
    out
}

/// Finetune `policy` with `algo`. The Q-guided trainer runs with teleport
/// resets disabled on `env`.
pub fn finetune(
    algo: Algo,
    cfg: &TrainConfig,
    env: &mut Env,
    policy: &mut DtPolicy,
    on_iter: &mut IterCallback<'_>,
) -> Result<Vec<IterMetrics>> {
    let run_seed = seed::derive(cfg.seed, "finetune");
    match algo {
        Algo::Grpo => grpo_dt_train(env, policy, &cfg.grpo, &cfg.eval, cfg.iterations, run_seed, on_iter),
        Algo::Ppo => {
            let mut value = new_value_net(policy, &cfg.ppo, run_seed)?;
            ppo_dt_train(env, policy, &mut value, &cfg.ppo, &cfg.eval, cfg.iterations, run_seed, on_iter)
        }
        Algo::Qguided => {
            env.set_teleport(false);
            let mut critics =
                Td3Critics::new(policy.config.obs_dim, policy.config.action_dim, &cfg.qguided.td3, run_seed)?;
            qguided_train(env, policy, &mut critics, &cfg.qguided, &cfg.eval, cfg.iterations, run_seed, on_iter)
        }
    }
}

/// `# ...` line written above every metrics CSV.
pub fn header_note(cfg: &TrainConfig, algo: &str) -> String {
    format!("algo={algo} seed={} config_hash={}", cfg.seed, cfg.hash())
}

/// Hash of named inputs in the style of a git tree: each input is hashed
/// as `blob <len>\0<bytes>`, then the sorted `name hash` lines are hashed.
pub fn content_hash(inputs: &[(&str, &[u8])]) -> String {
    let mut entries: Vec<(String, String)> = inputs
        .iter()
        .map(|(name, bytes)| {
            let mut h = Sha256::new();
            h.update(format!("blob {}\0", bytes.len()).as_bytes());
            h.update(bytes);
            (name.to_string(), hex::encode(h.finalize()))
        })
        .collect();
    entries.sort();
    let mut tree = String::new();
    for (name, h) in &entries {
        let _ = writeln!(tree, "{h} {name}");
    }
    hex::encode(Sha256::digest(tree.as_bytes()))
}

/// A directory holding one run's resolved config, seed, input hash and metrics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub const CONFIG: &'static str = "config.toml";
    pub const SEED: &'static str = "seed";
    pub const INPUTS: &'static str = "inputs.sha256";
    pub const METRICS: &'static str = "metrics.csv";

    pub fn create(path: &Path) -> Result<Self> {
        fs::create_dir_all(path)?;
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Write everything except the metrics.
    pub fn write_inputs(&self, cfg: &TrainConfig, inputs_hash: &str) -> Result<()> {
        cfg.save(&self.file(Self::CONFIG))?;
        fs::write(self.file(Self::SEED), format!("{}\n", cfg.seed))?;
        fs::write(self.file(Self::INPUTS), format!("{inputs_hash}\n"))?;
        Ok(())
    }

    /// Write the CSV and return its digest.
    pub fn write_metrics(&self, csv: &str) -> Result<String> {
        fs::write(self.file(Self::METRICS), csv)?;
        Ok(csv_digest(csv))
    }
}

/// Outcome of a completed finetuning run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: RunDir,
    pub rows: Vec<IterMetrics>,
    pub digest: String,
    pub policy: DtPolicy,
}

/// Finetune a copy of `policy` and record the run in `out`.
pub fn run_finetune(algo: Algo, cfg: &TrainConfig, policy: &DtPolicy, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let dir = RunDir::create(out)?;
    let config_text = cfg.to_toml();
    let ck = policy.to_checkpoint().to_bytes();
    let algo_name = algo.to_string();
    let inputs = content_hash(&[("algo", algo_name.as_bytes()), ("config", config_text.as_bytes()), ("checkpoint", &ck)]);
    dir.write_inputs(cfg, &inputs)?;
    let mut env = build_env(cfg)?;
    let mut policy = policy.clone();
    let rows = finetune(algo, cfg, &mut env, &mut policy, &mut |_| true)?;
    let digest = dir.write_metrics(&to_csv(&rows, &header_note(cfg, &algo_name)))?;
    Ok(RunOutcome { dir, rows, digest, policy })
}
