//! Decision Transformer pretraining and online finetuning with pure policy
//! gradient methods on small point-mass control tasks.
//!
//! The crate is organized bottom-up:
//!
//! * [`envsim`]: environments, scripted policies, offline datasets;
//! * [`traj`]: trajectories, return-to-go bookkeeping, replay buffers;
//! * [`dtmodel`]: the transformer policy, value and Q networks, autodiff;
//! * [`pretrain`]: supervised pretraining and evaluation;
//! * [`grpodt`], [`ppodt`], [`qguided`]: the online finetuning algorithms;
//! * [`harness`]: configuration, run directories, ablations, plots.

pub mod dtmodel;
pub mod envsim;
pub mod error;
pub mod grpodt;
pub mod harness;
pub mod metrics;
pub mod ppodt;
pub mod pretrain;
pub mod qguided;
pub mod seed;
pub mod traj;

pub use error::{Error, Result};

pub use dtmodel::{DtConfig, DtPolicy, GaussianDist};
pub use envsim::{Env, EnvSpec, EnvState, Quality};
pub use harness::{Algo, TrainConfig};
pub use metrics::IterMetrics;
pub use traj::{Context, SubTrajRecord, Token, Trajectory};
