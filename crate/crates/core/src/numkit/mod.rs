//! Numeric substrate: matrices, parameter vectors, feed-forward nets,
//! finite-difference oracles, power iteration, randomness and correlation.

pub mod fd;
pub mod matrix;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod power;
pub mod rng;
pub mod stats;

pub use fd::{default_hvp_step, finite_diff_grad, hvp, hvp_slice, max_relative_error};
pub use matrix::Matrix;
pub use mlp::{mlp_backward, mlp_forward, Activation, MlpArch, MlpCache, MlpGrads};
pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamVector, Segment};
pub use power::{power_iteration, PowerEstimate, DEFAULT_POWER_ITERS, DEFAULT_POWER_TOL};
pub use rng::{gaussian_sample, Rng};
pub use stats::{pearson, CorrelationResult};
