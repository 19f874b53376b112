//! Experiment configuration files.
//!
//! Configs are TOML documents: a few top-level keys plus one table per
//! component. Every key is optional and unknown keys are rejected. An empty
//! file resolves to [`TrainConfig::default`].
//!
//! ```toml
//! seed = 0
//! iterations = 200
//!
//! [env]
//! kind = "dense"      # or "sparse"
//! action_dim = 2
//!
//! [data]
//! quality = "random"  # random | medium | expert
//! transitions = 20000
//!
//! [model]             # DtConfig
//! [pretrain]          # PretrainConfig
//! [grpo]              # GrpoConfig
//! [ppo]               # PpoConfig
//! [qguided.grpo]      # GrpoConfig used by the Q-guided trainer
//! [qguided.td3]       # Td3Config
//! [eval]              # EvalSettings
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dtmodel::DtConfig;
use crate::envsim::{EnvSpec, Quality};
use crate::error::{Error, Result};
use crate::grpodt::GrpoConfig;
use crate::ppodt::PpoConfig;
use crate::pretrain::{EvalSettings, PretrainConfig};
use crate::qguided::QGuidedConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Ignored for the sparse task, which is always 2-d.
    pub action_dim: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { kind: EnvKind::Dense, action_dim: 2 }
    }
}

impl EnvConfig {
    pub fn spec(&self) -> EnvSpec {
        match self.kind {
            EnvKind::Dense => EnvSpec::dense(self.action_dim),
            EnvKind::Sparse => EnvSpec::sparse(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub quality: Quality,
    pub transitions: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { quality: Quality::Random, transitions: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub env: EnvConfig,
    pub data: DataConfig,
    pub model: DtConfig,
    pub pretrain: PretrainConfig,
    pub grpo: GrpoConfig,
    pub ppo: PpoConfig,
    pub qguided: QGuidedConfig,
    pub eval: EvalSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 200,
            env: EnvConfig::default(),
            data: DataConfig::default(),
            model: DtConfig::default(),
            pretrain: PretrainConfig::default(),
            grpo: GrpoConfig::default(),
            ppo: PpoConfig::default(),
            qguided: QGuidedConfig::default(),
            eval: EvalSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let spec = self.env.spec();
        spec.validate()?;
        self.model.validate()?;
        if self.model.action_dim != spec.action_dim || self.model.obs_dim != spec.obs_dim {
            return Err(Error::Config(format!(
                "model: action_dim/obs_dim are {}/{} but env `{}` needs {}/{}",
                self.model.action_dim, self.model.obs_dim, spec.name, spec.action_dim, spec.obs_dim
            )));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config("seed must fit in a signed 64-bit integer".into()));
        }
        if self.data.transitions < spec.horizon {
            return Err(Error::Config(format!("data: transitions must be >= the horizon {}", spec.horizon)));
        }
        self.pretrain.validate()?;
        self.grpo.validate()?;
        self.ppo.validate()?;
        self.qguided.validate()?;
        self.eval.validate()
    }

    /// Resolved TOML form; floats use shortest round-trip formatting.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml())?;
        Ok(())
    }
}

/// Parse and validate a config document.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig = toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(1, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
        Error::Parse { line, msg: e.message().to_string() }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    parse_config(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let a = parse_config("").unwrap();
        assert_eq!(a, TrainConfig::default());
        assert_eq!(a.hash(), parse_config("\n\n").unwrap().hash());
    }

    #[test]
    fn group_size_one_rejected() {
        let err = parse_config("[grpo]\ngroup_size = 1\n").unwrap_err();
        assert!(err.to_string().contains("group_size"), "{err}");
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse_config("seed = 1\n\n[grpo]\nclip = 0.1\n").unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 4);
                assert!(msg.contains("clip"), "{msg}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn floats_round_trip_exactly() {
        let mut cfg = TrainConfig::default();
        cfg.grpo.clip_eps = 0.2;
        cfg.grpo.gamma = 0.995;
        cfg.ppo.lambda = 0.1 + 0.2;
        let back = parse_config(&cfg.to_toml()).unwrap();
        assert_eq!(back.grpo.clip_eps.to_bits(), 0.2f64.to_bits());
        assert_eq!(back.grpo.gamma.to_bits(), 0.995f64.to_bits());
        assert_eq!(back.ppo.lambda.to_bits(), (0.1f64 + 0.2).to_bits());
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn model_must_match_env() {
        let err = parse_config("[env]\naction_dim = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        parse_config("[env]\naction_dim = 3\n[model]\naction_dim = 3\nobs_dim = 6\n").unwrap();
    }
}
