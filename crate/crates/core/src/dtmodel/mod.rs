//! Differentiable models and distribution math.

pub mod gaussian;
pub mod gradcheck;
pub mod mat;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod tape;
pub mod transformer;

pub use gaussian::{entropy, gaussian_kl, log_prob, GaussianDist};
pub use gradcheck::{flatten_grads, grad_check};
pub use mat::Mat;
pub use mlp::{Mlp, MlpConfig, OutputInit};
pub use optim::AdamW;
pub use params::{Bound, Checkpoint, ModelParams};
pub use tape::{NodeId, Tape};
pub use transformer::{DtConfig, DtPolicy, Sequence};
