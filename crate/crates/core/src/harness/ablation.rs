//! Named GRPO ablations run over several seeds.

use std::path::{Path, PathBuf};
use std::thread;

use super::config::TrainConfig;
use super::run::{prepare_policy, run_finetune, Algo};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Relabel,
    FullTraj,
    Inconsistent,
    TokenRatio,
    RandomSample,
    GmRatio,
    LtrajSweep,
    LevalSweep,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Self::Relabel,
        Self::FullTraj,
        Self::Inconsistent,
        Self::TokenRatio,
        Self::RandomSample,
        Self::GmRatio,
        Self::LtrajSweep,
        Self::LevalSweep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Relabel => "relabel",
            Self::FullTraj => "fulltraj",
            Self::Inconsistent => "inconsistent",
            Self::TokenRatio => "tokenratio",
            Self::RandomSample => "randomsample",
            Self::GmRatio => "gmratio",
            Self::LtrajSweep => "ltraj-sweep",
            Self::LevalSweep => "leval-sweep",
        }
    }

    /// Labelled config variants; the base config's GRPO settings are the reference arm.
    pub fn variants(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let with = |label: &str, f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            (label.to_string(), c)
        };
        match self {
            Self::Relabel => vec![
                with("relabel-on", &|c| c.grpo.hindsight_relabel = true),
                with("relabel-off", &|c| c.grpo.hindsight_relabel = false),
            ],
            Self::FullTraj => {
                let h = base.env.spec().horizon;
                vec![with("subtraj", &|_| {}), with("fulltraj", &|c| c.grpo.l_traj = h)]
            }
            Self::Inconsistent => vec![
                with("consistent", &|c| c.grpo.consistent_states = true),
                with("inconsistent", &|c| c.grpo.consistent_states = false),
            ],
            Self::TokenRatio => vec![
                with("sequence", &|c| c.grpo.sequence_ratio = true),
                with("token", &|c| c.grpo.sequence_ratio = false),
            ],
            Self::RandomSample => vec![
                with("active", &|c| c.grpo.active_sampling = true),
                with("random", &|c| c.grpo.active_sampling = false),
            ],
            Self::GmRatio => vec![
                with("sequence", &|c| c.grpo.geometric_mean = false),
                with("geometric-mean", &|c| {
                    c.grpo.sequence_ratio = true;
                    c.grpo.geometric_mean = true;
                }),
            ],
            Self::LtrajSweep => [1usize, 2, 5, 10, 20]
                .iter()
                .map(|&l| with(&format!("ltraj-{l}"), &|c| c.grpo.l_traj = l))
                .collect(),
            Self::LevalSweep => [0usize, 10, 20, 40]
                .iter()
                .map(|&l| with(&format!("leval-{l}"), &|c| c.grpo.l_eval = l))
                .collect(),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
            Error::Input(format!("unknown preset {s:?} (expected one of {})", names.join(", ")))
        })
    }
}

/// One finished variant/seed pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRun {
    pub label: String,
    pub seed: u64,
    pub metrics: PathBuf,
    pub digest: String,
}

/// Run every variant of `preset` for each seed under `out/<label>/seed-<s>`.
///
/// Each seed pretrains its own policy once, shared by all variants. Seeds
/// run on separate threads; every run writes only its own directory.
pub fn run_ablation(preset: Preset, base: &TrainConfig, seeds: &[u64], out: &Path) -> Result<Vec<AblationRun>> {
    base.validate()?;
    let per_seed: Vec<Result<Vec<AblationRun>>> = thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                s.spawn(move || -> Result<Vec<AblationRun>> {
                    let seeded = TrainConfig { seed, ..base.clone() };
                    let policy = prepare_policy(&seeded)?;
                    let mut runs = Vec::new();
                    for (label, cfg) in preset.variants(&seeded) {
                        let dir = out.join(&label).join(format!("seed-{seed}"));
                        let outcome = run_finetune(Algo::Grpo, &cfg, &policy, &dir)?;
                        runs.push(AblationRun {
                            label,
                            seed,
                            metrics: outcome.dir.file(super::run::RunDir::METRICS),
                            digest: outcome.digest,
                        });
                    }
                    Ok(runs)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("ablation worker panicked")).collect()
    });
    let mut all = Vec::new();
    for r in per_seed {
        all.extend(r?);
    }
    all.sort_by(|a, b| (&a.label, a.seed).cmp(&(&b.label, b.seed)));
    Ok(all)
}
