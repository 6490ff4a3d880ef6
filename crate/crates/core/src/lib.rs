//! Desk-scale laboratory for membership-privacy-preserving low-rank
//! adaptation of diffusion models.
//!
//! The crate is split along the experiment pipeline:
//!
//! - [`numkit`]: dense matrices, feed-forward nets with exact backward passes,
//!   finite-difference oracles, Hessian-vector products, power iteration,
//!   seeded randomness and Pearson correlation.
//! - [`diffmodel`]: noise schedule, forward noising, the LoRA-augmented toy
//!   denoiser, adaptation losses and ancestral sampling.
//! - [`privacy`]: the membership classifier, MI gain, proxy ascent and the
//!   post-hoc / gradient-feature attackers.
//! - [`trainers`]: dataset splits, balanced batches, composite objectives and
//!   the LoRA / MP-LoRA / SMP-LoRA training loop.
//! - [`diagnostics`]: gradient norms and scales, rescaling factors, Hessian
//!   norm estimates and the correlation verdict.
//! - [`evalcli`]: attack metrics, the kernel quality statistic, config files
//!   and experiment orchestration.

mod error;

pub mod checkpoint;
pub mod diagnostics;
pub mod diffmodel;
pub mod evalcli;
pub mod numkit;
pub mod privacy;
pub mod trainers;

pub use error::{Error, Result};
pub(crate) use error::ensure;
