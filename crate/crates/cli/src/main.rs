use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dtrl_core::dtmodel::{Checkpoint, DtPolicy};
use dtrl_core::envsim::{
    calibrate_refs, calibrated_env, generate_offline_dataset, load_dataset, save_dataset, scripted_mean_return,
    DatasetFormat, Quality, CALIBRATION_EPISODES, CALIBRATION_SEED,
};
use dtrl_core::harness::{
    header_note, line_chart_svg, load_config, pretrain_csv, pretrain_policy, relabel_instability_report, run_ablation,
    run_finetune, Algo, EnvConfig, EnvKind, Preset, Series, TrainConfig,
};
use dtrl_core::metrics::read_csv;
use dtrl_core::pretrain::{evaluate, ActionMode};

/// Decision Transformer pretraining and online RL finetuning on toy tasks.
#[derive(Parser)]
#[command(name = "dtrl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvArg {
    Dense,
    Sparse,
}

impl EnvArg {
    fn config(self, action_dim: usize) -> EnvConfig {
        let kind = match self {
            Self::Dense => EnvKind::Dense,
            Self::Sparse => EnvKind::Sparse,
        };
        EnvConfig { kind, action_dim }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate an offline dataset with a scripted behavior policy.
    GenData {
        #[arg(long, value_enum, default_value = "dense")]
        env: EnvArg,
        #[arg(long, default_value_t = 2)]
        action_dim: usize,
        /// random, medium or expert.
        #[arg(long, default_value = "random")]
        quality: Quality,
        /// Number of transitions.
        #[arg(long, default_value_t = 20_000)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Write JSON instead of the binary format.
        #[arg(long)]
        json: bool,
    },
    /// Print the reference returns used for score normalization.
    Calibrate {
        #[arg(long, value_enum, default_value = "dense")]
        env: EnvArg,
        #[arg(long, default_value_t = 2)]
        action_dim: usize,
        #[arg(long, default_value_t = CALIBRATION_EPISODES)]
        episodes: usize,
    },
    /// Pretrain a policy offline and save its checkpoint.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output checkpoint path. The per-step loss CSV goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finetune a pretrained checkpoint online.
    Finetune {
        #[arg(long)]
        algo: Algo,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "dense")]
        env: EnvArg,
        /// Conditioning return-to-go.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        g: f64,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// mean or stochastic.
        #[arg(long, default_value = "mean")]
        mode: ActionMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a named GRPO ablation over several seeds.
    Ablate {
        /// relabel, fulltraj, inconsistent, tokenratio, randomsample, gmratio, ltraj-sweep or leval-sweep.
        preset: Preset,
        /// Number of seeds, starting at the config seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Plot a metrics column as an SVG line chart with mean and std bands.
    Plot {
        /// Metrics CSVs as `label=path`. Repeating a label averages its runs.
        /// A bare path under `<label>/seed-<n>/` takes `<label>`.
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long, default_value = "eval_score_mean")]
        column: String,
        #[arg(long)]
        title: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config_or_default(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => load_config(p).with_context(|| format!("loading config {}", p.display())),
        None => Ok(TrainConfig::default()),
    }
}

fn load_policy(path: &Path) -> Result<DtPolicy> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(DtPolicy::from_checkpoint(&ck)?)
}

fn series_label(input: &str) -> (String, PathBuf) {
    if let Some((label, path)) = input.split_once('=') {
        return (label.to_string(), PathBuf::from(path));
    }
    let path = PathBuf::from(input);
    let seed_dir = path.parent().filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("seed-")));
    let label = seed_dir
        .and_then(|p| p.parent())
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map_or_else(|| input.to_string(), |n| n.to_string_lossy().into_owned());
    (label, path)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { env, action_dim, quality, size, seed, out, json } => {
            let mut env = calibrated_env(env.config(action_dim).spec())?;
            let data = generate_offline_dataset(&mut env, quality, size, seed)?;
            let format = if json { DatasetFormat::Json } else { DatasetFormat::Binary };
            let path = save_dataset(&out, &env, &data, format)?;
            let steps: usize = data.iter().map(|t| t.len()).sum();
            println!("wrote {} trajectories ({steps} transitions) to {}", data.len(), path.display());
        }
        Command::Calibrate { env, action_dim, episodes } => {
            let spec = env.config(action_dim).spec();
            let mut env = dtrl_core::envsim::make_env(spec.clone())?;
            let (random, expert) = calibrate_refs(&mut env, episodes, CALIBRATION_SEED)?;
            let medium = scripted_mean_return(&mut env, Quality::Medium, episodes, CALIBRATION_SEED);
            println!("env {} ({episodes} episodes per policy)", spec.name);
            println!("random return {random:.4}");
            println!("medium return {medium:.4}");
            println!("expert return {expert:.4}");
        }
        Command::Pretrain { config, data, out } => {
            let cfg = config_or_default(config.as_deref())?;
            cfg.validate()?;
            let mut env = calibrated_env(cfg.env.spec())?;
            let dataset = match &data {
                Some(dir) => {
                    let (header, trajs) =
                        load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
                    if header.spec_hash != env.spec().spec_hash() {
                        bail!("dataset was generated for env {}, config describes {}", header.env_name, env.spec().name);
                    }
                    trajs
                }
                None => dtrl_core::harness::build_dataset(&mut env, &cfg)?,
            };
            let (policy, steps) = pretrain_policy(&cfg, &dataset)?;
            policy.to_checkpoint().save(&out)?;
            let csv = out.with_extension("csv");
            fs::write(&csv, pretrain_csv(&steps, &header_note(&cfg, "pretrain")))?;
            let last = steps.last().map_or(f64::NAN, |s| s.nll);
            println!("saved {} after {} steps (final nll {last:.4}); losses in {}", out.display(), steps.len(), csv.display());
        }
        Command::Finetune { algo, config, checkpoint, out } => {
            let cfg = config_or_default(config.as_deref())?;
            let policy = load_policy(&checkpoint)?;
            let outcome = run_finetune(algo, &cfg, &policy, &out)?;
            outcome.policy.to_checkpoint().save(&out.join("policy.ckpt"))?;
            if let Some(last) = outcome.rows.last() {
                println!("iteration {}: eval score {:.2}", last.iteration, last.eval_score_mean);
            }
            println!("metrics digest {} in {}", outcome.digest, out.display());
        }
        Command::Evaluate { checkpoint, env, g, episodes, mode, seed } => {
            let policy = load_policy(&checkpoint)?;
            let mut env = calibrated_env(env.config(policy.config.action_dim).spec())?;
            if env.spec().obs_dim != policy.config.obs_dim {
                bail!("checkpoint expects obs_dim {}, env {} has {}", policy.config.obs_dim, env.spec().name, env.spec().obs_dim);
            }
            let r = evaluate(&policy, &mut env, g, episodes, mode, seed)?;
            println!("score {:.3} +- {:.3}", r.mean_score, r.std_score);
            println!("return {:.4}", r.mean_return);
            println!("success rate {:.3}", r.success_rate);
        }
        Command::Ablate { preset, seeds, config, out } => {
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let base = config_or_default(config.as_deref())?;
            let seed_list: Vec<u64> = (0..seeds).map(|i| base.seed + i).collect();
            let out = out.join(preset.name());
            let runs = run_ablation(preset, &base, &seed_list, &out)?;
            for r in &runs {
                println!("{} seed {}: {}", r.label, r.seed, r.metrics.display());
            }
            if preset == Preset::Relabel {
                let arm = |label: &str| -> Result<Vec<_>> {
                    runs.iter().filter(|r| r.label == label).map(|r| Ok(read_csv(&r.metrics)?)).collect()
                };
                let report = relabel_instability_report(&arm("relabel-on")?, &arm("relabel-off")?, None)?;
                fs::write(out.join("report.txt"), format!("{report}\n"))?;
                println!("{report}");
            }
        }
        Command::Plot { inputs, column, title, out } => {
            let mut grouped: BTreeMap<String, Vec<_>> = BTreeMap::new();
            let mut order = Vec::new();
            for input in &inputs {
                let (label, path) = series_label(input);
                let table = read_csv(&path).with_context(|| format!("reading {}", path.display()))?;
                if !grouped.contains_key(&label) {
                    order.push(label.clone());
                }
                grouped.entry(label).or_default().push(table);
            }
            let series: Vec<Series> =
                order.into_iter().map(|label| Series { runs: grouped.remove(&label).unwrap(), label }).collect();
            let svg = line_chart_svg(&series, &column, title.as_deref().unwrap_or(&column))?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, svg)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
