//! Evaluation metrics: PSNR and SSIM on patches, unbiased MMD² and a
//! moment-fit KL on vector samples.

use crate::oracle::{gaussian_kl, CovSpec, GaussianMixture, OracleError};
use crate::patch::Patch;
use crate::util::dist_sq;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// PSNR is capped here: identical inputs report 99 dB instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("patches have different shapes: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("patch side smaller than the {0}-pixel SSIM window")]
    WindowTooLarge(usize),
    #[error("sample sets must be non-empty and of equal dimension")]
    BadSamples,
    #[error("MMD bandwidth must be finite and > 0, got {0}")]
    BadBandwidth(f64),
    #[error("moment fit needs more than dim+1 samples, got {got} in dimension {dim}")]
    TooFewSamples { got: usize, dim: usize },
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Peak signal-to-noise ratio in dB for signals on [0, 1], capped at
/// [`PSNR_CAP_DB`] when the mean squared error underflows to zero.
pub fn psnr(a: &Patch, b: &Patch) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let n = a.pixels().len() as f64;
    let mse = dist_sq(a.pixels(), b.pixels()) / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP_DB))
}

/// Mean structural similarity over all 8×8 uniform sliding windows
/// (stride 1), with the usual constants K1 = 0.01, K2 = 0.03 on unit range.
pub fn ssim(a: &Patch, b: &Patch) -> Result<f64, MetricsError> {
    const WIN: usize = 8;
    const C1: f64 = 1.0e-4; // (0.01)²
    const C2: f64 = 9.0e-4; // (0.03)²
    check_shapes(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < WIN || w < WIN {
        return Err(MetricsError::WindowTooLarge(WIN));
    }
    let inv_n = 1.0 / (WIN * WIN) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for r0 in 0..=(h - WIN) {
        for c0 in 0..=(w - WIN) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + WIN {
                for c in c0..c0 + WIN {
                    let (x, y) = (a.get(r, c), b.get(r, c));
                    sa += x;
                    sb += y;
                    saa += x * x;
                    sbb += y * y;
                    sab += x * y;
                }
            }
            let (ma, mb) = (sa * inv_n, sb * inv_n);
            let va = saa * inv_n - ma * ma;
            let vb = sbb * inv_n - mb * mb;
            let cov = sab * inv_n - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

fn check_shapes(a: &Patch, b: &Patch) -> Result<(), MetricsError> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(MetricsError::ShapeMismatch(a.height(), a.width(), b.height(), b.width()));
    }
    Ok(())
}

/// Unbiased squared maximum mean discrepancy between sample sets `x` and
/// `y` under the RBF kernel k(a, b) = exp(−‖a−b‖² / (2·bandwidth²)).
///
/// The two self-terms exclude the diagonal (U-statistic), so the estimate
/// is unbiased and can be slightly negative for matching distributions.
/// Arguments are ordered canonically first, which makes the value exactly
/// symmetric in (x, y).
pub fn mmd2(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64) -> Result<f64, MetricsError> {
    if !(bandwidth.is_finite() && bandwidth > 0.0) {
        return Err(MetricsError::BadBandwidth(bandwidth));
    }
    if x.len() < 2 || y.len() < 2 {
        return Err(MetricsError::BadSamples);
    }
    let dim = x[0].len();
    if dim == 0
        || x.iter().any(|v| v.len() != dim)
        || y.iter().any(|v| v.len() != dim)
    {
        return Err(MetricsError::BadSamples);
    }
    // Canonical order: swapping the arguments swaps back here, so both call
    // orders execute the identical float program.
    let (x, y) = if lex_le(x, y) { (x, y) } else { (y, x) };

    let gamma = 1.0 / (2.0 * bandwidth * bandwidth);
    let self_term = |s: &[Vec<f64>]| -> f64 {
        let m = s.len();
        // Parallel over rows, then a sequential sum in row order so the
        // result does not depend on the number of worker threads.
        let rows: Vec<f64> = s
            .par_iter()
            .enumerate()
            .map(|(i, si)| {
                let mut acc = 0.0;
                for (j, sj) in s.iter().enumerate() {
                    if i != j {
                        acc += (-gamma * dist_sq(si, sj)).exp();
                    }
                }
                acc
            })
            .collect();
        rows.iter().sum::<f64>() / (m * (m - 1)) as f64
    };
    let cross: f64 = {
        let rows: Vec<f64> = x
            .par_iter()
            .map(|xi| y.iter().map(|yj| (-gamma * dist_sq(xi, yj)).exp()).sum::<f64>())
            .collect();
        rows.iter().sum::<f64>() / (x.len() * y.len()) as f64
    };
    Ok(self_term(x) + self_term(y) - 2.0 * cross)
}

/// Lexicographic comparison of flattened sample sets (true if x <= y).
fn lex_le(x: &[Vec<f64>], y: &[Vec<f64>]) -> bool {
    let xs = x.iter().flatten();
    let ys = y.iter().flatten();
    for (a, b) in xs.zip(ys) {
        if a < b {
            return true;
        }
        if a > b {
            return false;
        }
    }
    x.len() <= y.len()
}

/// Fits a single Gaussian to `samples` by moments (mean and covariance with
/// 1/n normalisation, plus 1e-6 jitter on the diagonal for stability) and
/// returns KL(fit ‖ target). `target` must be a single Gaussian.
pub fn fit_gaussian_kl(
    samples: &[Vec<f64>],
    target: &GaussianMixture,
) -> Result<f64, MetricsError> {
    let dim = target.dim();
    if samples.len() <= dim + 1 {
        return Err(MetricsError::TooFewSamples { got: samples.len(), dim });
    }
    if samples.iter().any(|s| s.len() != dim) {
        return Err(MetricsError::BadSamples);
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut cov = vec![vec![0.0; dim]; dim];
    for s in samples {
        for i in 0..dim {
            for j in 0..dim {
                cov[i][j] += (s[i] - mean[i]) * (s[j] - mean[j]);
            }
        }
    }
    for (i, row) in cov.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v /= n;
            if i == j {
                *v += 1e-6;
            }
        }
    }
    let fit = GaussianMixture::single(mean, CovSpec::Full(cov))?;
    Ok(gaussian_kl(&fit, target)?)
}

/// One evaluation record; which metrics are present depends on the task.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct EvalReport {
    /// Training step the evaluation belongs to.
    pub step: u64,
    /// How many held-out items were evaluated.
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    /// PSNR of the do-nothing baseline (the degraded input itself).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmd2: Option<f64>,
    /// Moment-fit KL to each mixture mode, conditioned on the mode label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_kl_per_mode: Option<Vec<f64>>,
    /// Largest per-mode fit KL (the number the convergence gate watches).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_kl: Option<f64>,
}
