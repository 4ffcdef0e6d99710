//! Discrete variance-preserving noise schedules.
//!
//! A schedule is a table of coefficient pairs (α_t, σ_t) for t = 0..=T with
//! α_t² + σ_t² = 1: the forward process is x_t = α_t·x₀ + σ_t·ε. t = 0 is
//! the clean point (α₀ = 1, σ₀ = 0); α is strictly decreasing and σ strictly
//! increasing in t.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// How squared (α²+σ²−1) deviations can stray from zero before the table is
/// rejected as non-variance-preserving.
const VP_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("schedule needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("betas must satisfy 0 < beta_min <= beta_max < 1, got [{0}, {1}]")]
    InvalidBetaRange(f64, f64),
    #[error("coefficient tables must have equal length >= 2, got {alphas} and {sigmas}")]
    TableLengthMismatch { alphas: usize, sigmas: usize },
    #[error("table violates alpha_0 = 1, sigma_0 = 0")]
    BadOrigin,
    #[error("alpha must be strictly decreasing and sigma strictly increasing (index {0})")]
    NotMonotonic(usize),
    #[error("alpha_t^2 + sigma_t^2 deviates from 1 by {dev:e} at t = {t}")]
    NotVariancePreserving { t: usize, dev: f64 },
    #[error("weight kind Snr is undefined at t = 0 (sigma_0 = 0)")]
    SnrAtZero,
}

/// Per-timestep weighting ω(t) applied to the distillation gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// ω(t) = 1. The default: every timestep contributes equally.
    #[default]
    Constant,
    /// ω(t) = σ_t², down-weighting the barely-noised steps.
    SigmaSq,
    /// ω(t) = α_t / σ_t (signal-to-noise flavoured; undefined at t = 0).
    Snr,
}

/// A validated discrete noise schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
    weight_kind: WeightKind,
}

impl NoiseSchedule {
    /// Builds the linear-β variance-preserving schedule: β_t ranges linearly
    /// over [beta_min, beta_max] (inclusive at both ends) for t = 1..=T, and
    /// α_t = sqrt(∏_{s<=t} (1−β_s)), σ_t = sqrt(1−α_t²).
    pub fn build_vp(
        num_steps: usize,
        beta_min: f64,
        beta_max: f64,
        weight_kind: WeightKind,
    ) -> Result<Self, ScheduleError> {
        if num_steps < 2 {
            return Err(ScheduleError::TooFewSteps(num_steps));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(ScheduleError::InvalidBetaRange(beta_min, beta_max));
        }
        let mut alphas = Vec::with_capacity(num_steps + 1);
        let mut sigmas = Vec::with_capacity(num_steps + 1);
        alphas.push(1.0);
        sigmas.push(0.0);
        let mut alpha_sq = 1.0;
        for t in 1..=num_steps {
            let beta =
                beta_min + (beta_max - beta_min) * (t - 1) as f64 / (num_steps - 1) as f64;
            alpha_sq *= 1.0 - beta;
            alphas.push(alpha_sq.sqrt());
            sigmas.push((1.0 - alpha_sq).sqrt());
        }
        Self::from_tables(alphas, sigmas, weight_kind)
    }

    /// Builds a schedule from explicit coefficient tables (index 0 is the
    /// clean point), validating every invariant the rest of the crate relies
    /// on: origin, strict monotonicity, and α² + σ² = 1 within 1e-12.
    pub fn from_tables(
        alphas: Vec<f64>,
        sigmas: Vec<f64>,
        weight_kind: WeightKind,
    ) -> Result<Self, ScheduleError> {
        if alphas.len() != sigmas.len() || alphas.len() < 2 {
            return Err(ScheduleError::TableLengthMismatch {
                alphas: alphas.len(),
                sigmas: sigmas.len(),
            });
        }
        if alphas[0] != 1.0 || sigmas[0] != 0.0 {
            return Err(ScheduleError::BadOrigin);
        }
        for t in 1..alphas.len() {
            if !(alphas[t] < alphas[t - 1]) || !(sigmas[t] > sigmas[t - 1]) {
                return Err(ScheduleError::NotMonotonic(t));
            }
        }
        for (t, (a, s)) in alphas.iter().zip(&sigmas).enumerate() {
            let dev = (a * a + s * s - 1.0).abs();
            if dev > VP_TOL {
                return Err(ScheduleError::NotVariancePreserving { t, dev });
            }
        }
        Ok(Self { alphas, sigmas, weight_kind })
    }

    /// Number of diffusion steps T (valid timesteps are 0..=T).
    pub fn num_steps(&self) -> usize {
        self.alphas.len() - 1
    }

    /// Signal coefficient α_t. Panics if `t > T`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    /// Noise coefficient σ_t. Panics if `t > T`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn weight_kind(&self) -> WeightKind {
        self.weight_kind
    }

    /// Smallest t with σ_t >= min(target, σ_T); 0 when `target <= 0`.
    ///
    /// The clamp to σ_T means unreachable targets saturate at T instead of
    /// failing, which is exactly the behaviour the dynamic noise controller
    /// wants when a batch is still far from the data manifold.
    pub fn inverse_sigma(&self, target: f64) -> usize {
        if target <= 0.0 {
            return 0;
        }
        let cap = target.min(*self.sigmas.last().expect("non-empty table"));
        // sigmas is strictly increasing, so partition_point gives the first
        // index where σ_t >= cap.
        self.sigmas.partition_point(|&s| s < cap)
    }

    /// Timestep weight ω(t) under this schedule's [`WeightKind`].
    pub fn weight(&self, t: usize) -> Result<f64, ScheduleError> {
        Ok(match self.weight_kind {
            WeightKind::Constant => 1.0,
            WeightKind::SigmaSq => self.sigmas[t] * self.sigmas[t],
            WeightKind::Snr => {
                if t == 0 {
                    return Err(ScheduleError::SnrAtZero);
                }
                self.alphas[t] / self.sigmas[t]
            }
        })
    }
}
