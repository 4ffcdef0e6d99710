//! Desk-scale laboratory for one-step restoration by score distillation
//! with dynamic noise control.
//!
//! The crate is organised bottom-up:
//!
//! - [`rng`]: named, non-overlapping random streams — the reproducibility
//!   contract every other module builds on.
//! - [`util`]: small numeric helpers (norms, Γ, hashing).
//! - [`schedule`]: variance-preserving noise schedules and their inverse.
//! - [`nets`]: flat-parameter MLPs with exact reverse-mode gradients and a
//!   binary checkpoint format.
//! - [`oracle`]: Gaussian mixtures with exact densities, scores, and
//!   diffused marginals — ground truth the learned parts are tested against.
//! - [`patch`]: tiny grayscale images and a strict PGM codec.
//! - [`degrade`]: the blur → downsample → noise → compression corruption
//!   chain.
//! - [`metrics`]: PSNR, SSIM, kernel two-sample distance, Gaussian fits.
//! - [`opt`]: AdamW.
//! - [`distill`]: the two-stage distillation step and its gradient
//!   verification harnesses.
//!
//! Every run is a pure function of its configuration and master seed:
//! randomness flows through named [`rng::Stream`]s, and parallel reductions
//! are ordered, so repeated runs produce byte-identical logs, checkpoints,
//! and metrics.

pub mod cli;
pub mod config;
pub mod degrade;
pub mod distill;
pub mod metrics;
pub mod nets;
pub mod opt;
pub mod oracle;
pub mod patch;
pub mod rng;
pub mod schedule;
pub mod trainer;
pub mod util;
