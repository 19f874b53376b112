//! Configuration, seeded run orchestration, ablations, reports and plots.

pub mod ablation;
pub mod config;
pub mod plot;
pub mod report;
pub mod run;

pub use ablation::{run_ablation, AblationRun, Preset};
pub use config::{load_config, parse_config, DataConfig, EnvConfig, EnvKind, TrainConfig};
pub use plot::{line_chart_svg, Series};
pub use report::{relabel_instability_report, InstabilityReport};
pub use run::{
    build_dataset, build_env, content_hash, finetune, header_note, prepare_policy, pretrain_csv, pretrain_policy,
    run_finetune, Algo, RunDir, RunOutcome,
};
