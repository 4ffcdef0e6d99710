//! Synthetic degradation: Gaussian blur → block-mean downsampling → additive
//! Gaussian noise → 8×8 block-transform compression, in that fixed order.
//!
//! Every stage clamps its output back to [0, 1], and the full chain is a
//! pure function of `(input, config)` — the only randomness (the noise
//! stage) is seeded from the config. An optional second round repeats
//! blur → noise → compression on the already-degraded patch to mimic the
//! compounding seen in real capture pipelines; it is off by default.

use crate::patch::Patch;
use crate::rng::{indexed_rng, Stream};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DegradeError {
    #[error("blur sigma must be finite and >= 0, got {0}")]
    BadSigma(f64),
    #[error("kernel radius {radius} too small for sigma {sigma} (need >= ceil(3*sigma))")]
    RadiusTooSmall { radius: usize, sigma: f64 },
    #[error("downsample factor must be >= 1, got {0}")]
    BadFactor(usize),
    #[error("patch {h}x{w} not divisible by factor {factor}")]
    NotDivisible { h: usize, w: usize, factor: usize },
    #[error("noise sigma must be finite and >= 0, got {0}")]
    BadNoiseSigma(f64),
    #[error("quality must be in 1..=100, got {0}")]
    BadQuality(u8),
    #[error("patch {h}x{w} sides must be divisible by 8 for block compression")]
    NotBlockAligned { h: usize, w: usize },
}

/// Parameters of the degradation chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationConfig {
    /// Standard deviation of the Gaussian blur, in pixels. 0 disables blur.
    pub blur_sigma: f64,
    /// Half-width of the blur kernel; must be >= ceil(3·blur_sigma).
    pub kernel_radius: usize,
    /// Integer downsampling factor (block mean). 1 disables.
    pub downsample_factor: usize,
    /// Standard deviation of the additive Gaussian noise. 0 disables.
    pub noise_sigma: f64,
    /// Block-transform compression quality, 1 (worst) ..= 100 (near-lossless).
    pub jpeg_quality: u8,
    /// Seed for the noise stage; the chain is deterministic given this.
    pub rng_seed: u64,
    /// Repeat blur → noise → compression a second time.
    #[serde(default)]
    pub second_round: bool,
}

impl DegradationConfig {
    /// A chain that changes nothing except 8-bit-scale rounding in the
    /// final near-lossless compression stage.
    pub fn identity(rng_seed: u64) -> Self {
        Self {
            blur_sigma: 0.0,
            kernel_radius: 1,
            downsample_factor: 1,
            noise_sigma: 0.0,
            jpeg_quality: 100,
            rng_seed,
            second_round: false,
        }
    }

    pub fn validate(&self) -> Result<(), DegradeError> {
        if !self.blur_sigma.is_finite() || self.blur_sigma < 0.0 {
            return Err(DegradeError::BadSigma(self.blur_sigma));
        }
        if self.blur_sigma > 0.0 && (self.kernel_radius as f64) < (3.0 * self.blur_sigma).ceil() {
            return Err(DegradeError::RadiusTooSmall {
                radius: self.kernel_radius,
                sigma: self.blur_sigma,
            });
        }
        if self.downsample_factor == 0 {
            return Err(DegradeError::BadFactor(0));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(DegradeError::BadNoiseSigma(self.noise_sigma));
        }
        if self.jpeg_quality == 0 || self.jpeg_quality > 100 {
            return Err(DegradeError::BadQuality(self.jpeg_quality));
        }
        Ok(())
    }
}

/// Separable Gaussian blur with symmetric-reflect boundary handling.
/// `sigma == 0` returns the input unchanged (bit-identical).
pub fn gaussian_blur(p: &Patch, sigma: f64, radius: usize) -> Result<Patch, DegradeError> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(DegradeError::BadSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(p.clone());
    }
    if (radius as f64) < (3.0 * sigma).ceil() {
        return Err(DegradeError::RadiusTooSmall { radius, sigma });
    }
    let kernel = normalized_gaussian_kernel(sigma, radius);
    let (h, w) = (p.height(), p.width());

    // Horizontal pass on raw (unclamped) intermediates, then vertical.
    let mut tmp = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let offset = k as isize - radius as isize;
                let cc = reflect_index(c as isize + offset, w);
                acc += kv * p.get(r, cc);
            }
            tmp[r * w + c] = acc;
        }
    }
    let out = Patch::from_fn(h, w, |r, c| {
        let mut acc = 0.0;
        for (k, &kv) in kernel.iter().enumerate() {
            let offset = k as isize - radius as isize;
            let rr = reflect_index(r as isize + offset, h);
            acc += kv * tmp[rr * w + c];
        }
        acc
    });
    Ok(out)
}

/// Discrete Gaussian taps exp(−i²/2σ²) for i in [−radius, radius],
/// normalized to sum exactly to 1.
fn normalized_gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (-(radius as isize)..=radius as isize)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Symmetric reflection of an out-of-range index into [0, len): the border
/// pixel is repeated (…, p1, p0 | p0, p1, …).
fn reflect_index(i: isize, len: usize) -> usize {
    let len = len as isize;
    let mut i = i;
    // Each pass fixes one side; at most a few iterations for radius < len.
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= len {
            i = 2 * len - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Block-mean downsampling by an integer factor. Factor 1 is the identity.
pub fn downsample(p: &Patch, factor: usize) -> Result<Patch, DegradeError> {
    if factor == 0 {
        return Err(DegradeError::BadFactor(0));
    }
    if factor == 1 {
        return Ok(p.clone());
    }
    let (h, w) = (p.height(), p.width());
    if h % factor != 0 || w % factor != 0 {
        return Err(DegradeError::NotDivisible { h, w, factor });
    }
    let norm = 1.0 / (factor * factor) as f64;
    Ok(Patch::from_fn(h / factor, w / factor, |r, c| {
        let mut acc = 0.0;
        for dr in 0..factor {
            for dc in 0..factor {
                acc += p.get(r * factor + dr, c * factor + dc);
            }
        }
        acc * norm
    }))
}

/// Adds iid Gaussian noise of standard deviation `sigma`, clamping back to
/// [0, 1]. `sigma == 0` returns the input unchanged. Deterministic in `seed`.
pub fn add_noise(p: &Patch, sigma: f64, seed: u64) -> Result<Patch, DegradeError> {
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(DegradeError::BadNoiseSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(p.clone());
    }
    let mut rng = indexed_rng(seed, Stream::Degrade, 0);
    let pix = p.pixels();
    let mut i = 0;
    Ok(Patch::from_fn(p.height(), p.width(), |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        let v = pix[i] + sigma * z;
        i += 1;
        v
    }))
}

/// Standard luminance quantisation table (8×8, row-major).
const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quality-scaled quantisation table: scale = 5000/q below 50, 200 − 2q at
/// or above, each entry max(1, floor((base·scale + 50)/100)), clamped to 255.
fn scaled_quant_table(quality: u8) -> [f64; 64] {
    let q = quality as i64;
    let scale: i64 = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0f64; 64];
    for (o, &base) in out.iter_mut().zip(&LUMA_QUANT) {
        let v = (base as i64 * scale + 50) / 100;
        *o = v.clamp(1, 255) as f64;
    }
    out
}

/// cos((2x+1)·u·π/16) lookup, indexed [u][x].
fn dct_cos_table() -> [[f64; 8]; 8] {
    let mut t = [[0.0f64; 8]; 8];
    for (u, row) in t.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            *v = ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    t
}

/// Block-transform compression: per 8×8 block, forward orthonormal DCT-II
/// on pixels shifted to [−128, 127], quantisation by the quality-scaled
/// table (round half away from zero), dequantisation, inverse transform.
/// Both patch sides must be divisible by 8.
pub fn jpeg_like(p: &Patch, quality: u8) -> Result<Patch, DegradeError> {
    if quality == 0 || quality > 100 {
        return Err(DegradeError::BadQuality(quality));
    }
    let (h, w) = (p.height(), p.width());
    if h % 8 != 0 || w % 8 != 0 {
        return Err(DegradeError::NotBlockAligned { h, w });
    }
    let quant = scaled_quant_table(quality);
    let cos = dct_cos_table();
    let norm = |k: usize| if k == 0 { (0.125f64).sqrt() } else { 0.5 };

    let mut out = vec![0.0f64; h * w];
    for br in (0..h).step_by(8) {
        for bc in (0..w).step_by(8) {
            // Shifted block in [−128, 127].
            let mut f = [[0.0f64; 8]; 8];
            for (x, row) in f.iter_mut().enumerate() {
                for (y, v) in row.iter_mut().enumerate() {
                    *v = p.get(br + x, bc + y) * 255.0 - 128.0;
                }
            }
            // Forward transform + quantise + dequantise.
            let mut coef = [[0.0f64; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    let mut acc = 0.0;
                    for x in 0..8 {
                        for y in 0..8 {
                            acc += f[x][y] * cos[u][x] * cos[v][y];
                        }
                    }
                    let c = norm(u) * norm(v) * acc;
                    let q = quant[u * 8 + v];
                    coef[u][v] = (c / q).round() * q;
                }
            }
            // Inverse transform, unshift, clamp.
            for x in 0..8 {
                for y in 0..8 {
                    let mut acc = 0.0;
                    for (u, crow) in coef.iter().enumerate() {
                        for (v, &cv) in crow.iter().enumerate() {
                            acc += norm(u) * norm(v) * cv * cos[u][x] * cos[v][y];
                        }
                    }
                    out[(br + x) * w + bc + y] = ((acc + 128.0) / 255.0).clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(Patch::from_fn(h, w, |r, c| out[r * w + c]))
}

/// The full degradation chain: blur → downsample → noise → compression,
/// then optionally blur → noise → compression once more.
pub fn degrade(p: &Patch, cfg: &DegradationConfig) -> Result<Patch, DegradeError> {
    cfg.validate()?;
    let blurred = gaussian_blur(p, cfg.blur_sigma, cfg.kernel_radius)?;
    let small = downsample(&blurred, cfg.downsample_factor)?;
    let noisy = add_noise(&small, cfg.noise_sigma, cfg.rng_seed)?;
    let mut out = jpeg_like(&noisy, cfg.jpeg_quality)?;
    if cfg.second_round {
        let blurred = gaussian_blur(&out, cfg.blur_sigma, cfg.kernel_radius)?;
        // Distinct noise stream for the second round.
        let noisy = add_noise(&blurred, cfg.noise_sigma, cfg.rng_seed ^ 0x9e37_79b9_7f4a_7c15)?;
        out = jpeg_like(&noisy, cfg.jpeg_quality)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;

    fn gradient_patch(n: usize) -> Patch {
        Patch::from_fn(n, n, |r, c| (r as f64 + c as f64) / (2.0 * (n - 1) as f64))
    }

    fn busy_patch(n: usize) -> Patch {
        Patch::from_fn(n, n, |r, c| {
            0.5 + 0.3 * ((r as f64) * 0.7).sin() + 0.2 * ((c as f64) * 1.3).cos()
        })
    }

    #[test]
    fn blur_zero_sigma_is_bit_identity() {
        let p = busy_patch(8);
        let q = gaussian_blur(&p, 0.0, 0).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn blur_preserves_constant_patches() {
        let p = Patch::constant(16, 16, 0.42);
        let q = gaussian_blur(&p, 2.0, 6).unwrap();
        for &v in q.pixels() {
            assert!((v - 0.42).abs() < 1e-12, "kernel must be normalized");
        }
    }

    #[test]
    fn blur_matches_direct_2d_convolution() {
        // Independent oracle: dense 2-D convolution with the outer-product
        // kernel and the same reflect rule, no separability shortcut.
        let p = busy_patch(9);
        let (sigma, radius) = (1.0, 3);
        let got = gaussian_blur(&p, sigma, radius).unwrap();

        let k1 = normalized_gaussian_kernel(sigma, radius);
        let n = p.height();
        for r in 0..n {
            for c in 0..n {
                let mut acc = 0.0;
                for (i, &kr) in k1.iter().enumerate() {
                    for (j, &kc) in k1.iter().enumerate() {
                        let rr = reflect_index(r as isize + i as isize - radius as isize, n);
                        let cc = reflect_index(c as isize + j as isize - radius as isize, n);
                        acc += kr * kc * p.get(rr, cc);
                    }
                }
                assert!(
                    (got.get(r, c) - acc.clamp(0.0, 1.0)).abs() < 1e-12,
                    "mismatch at ({r},{c})"
                );
            }
        }
    }

    #[test]
    fn blur_rejects_undersized_kernel() {
        let p = busy_patch(8);
        assert_eq!(
            gaussian_blur(&p, 2.0, 5).unwrap_err(),
            DegradeError::RadiusTooSmall { radius: 5, sigma: 2.0 }
        );
    }

    #[test]
    fn downsample_block_means() {
        let p = Patch::new(2, 4, vec![0.0, 1.0, 0.5, 0.5, 1.0, 0.0, 0.25, 0.75]).unwrap();
        let q = downsample(&p, 2).unwrap();
        assert_eq!(q.height(), 1);
        assert_eq!(q.width(), 2);
        assert!((q.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((q.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn downsample_factor_one_is_identity_and_divisibility_enforced() {
        let p = busy_patch(6);
        assert_eq!(downsample(&p, 1).unwrap(), p);
        assert_eq!(
            downsample(&p, 4).unwrap_err(),
            DegradeError::NotDivisible { h: 6, w: 6, factor: 4 }
        );
    }

    #[test]
    fn noise_zero_sigma_is_bit_identity_and_seeded_noise_reproduces() {
        let p = busy_patch(8);
        assert_eq!(add_noise(&p, 0.0, 1).unwrap(), p);
        let a = add_noise(&p, 0.1, 7).unwrap();
        let b = add_noise(&p, 0.1, 7).unwrap();
        assert_eq!(a, b);
        let c = add_noise(&p, 0.1, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noise_empirical_std_matches_sigma() {
        let p = Patch::constant(32, 32, 0.5);
        let sigma = 0.1;
        let q = add_noise(&p, sigma, 3).unwrap();
        let n = 32 * 32;
        let mean: f64 = q.pixels().iter().sum::<f64>() / n as f64;
        let var: f64 =
            q.pixels().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let got = var.sqrt();
        assert!(
            (got - sigma).abs() / sigma < 0.15,
            "empirical std {got} too far from {sigma}"
        );
    }

    #[test]
    fn compression_quality_100_on_smooth_patch_is_near_lossless() {
        let p = gradient_patch(16);
        let q = jpeg_like(&p, 100).unwrap();
        let db = psnr(&p, &q).unwrap();
        assert!(db > 50.0, "quality 100 PSNR = {db}");
    }

    #[test]
    fn compression_keeps_constant_patches_constant() {
        // A constant block has all its energy in the DC coefficient, so the
        // output stays exactly constant at any quality. The constant itself
        // may shift by up to half the DC quantisation step (80/16 gray
        // levels at quality 10); at quality 100 it stays within one level.
        let p = Patch::constant(8, 8, 0.3);
        let q10 = jpeg_like(&p, 10).unwrap();
        let (lo, hi) = q10
            .pixels()
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        assert!(hi - lo < 1e-12, "output must stay constant");
        assert!((q10.get(0, 0) - 0.3).abs() <= 80.0 / 16.0 / 255.0 + 1e-12);
        let q100 = jpeg_like(&p, 100).unwrap();
        for &v in q100.pixels() {
            assert!((v - 0.3).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn compression_matches_straight_line_oracle_bitwise() {
        // Re-derivation with no lookup tables and fully inlined arithmetic:
        // must agree bit-for-bit with the production path at low quality.
        let p = busy_patch(8);
        let got = jpeg_like(&p, 10).unwrap();

        let quality = 10i64;
        let scale = 5000 / quality;
        let pi = std::f64::consts::PI;
        let norm = |k: usize| if k == 0 { (0.125f64).sqrt() } else { 0.5 };
        let mut f = [[0.0f64; 8]; 8];
        for (x, row) in f.iter_mut().enumerate() {
            for (y, v) in row.iter_mut().enumerate() {
                *v = p.get(x, y) * 255.0 - 128.0;
            }
        }
        let mut coef = [[0.0f64; 8]; 8];
        for u in 0..8 {
            for v in 0..8 {
                let mut acc = 0.0;
                for x in 0..8 {
                    for y in 0..8 {
                        acc += f[x][y]
                            * ((2.0 * x as f64 + 1.0) * u as f64 * pi / 16.0).cos()
                            * ((2.0 * y as f64 + 1.0) * v as f64 * pi / 16.0).cos();
                    }
                }
                let c = norm(u) * norm(v) * acc;
                let q = ((LUMA_QUANT[u * 8 + v] as i64 * scale + 50) / 100).clamp(1, 255) as f64;
                coef[u][v] = (c / q).round() * q;
            }
        }
        for x in 0..8 {
            for y in 0..8 {
                let mut acc = 0.0;
                for u in 0..8 {
                    for v in 0..8 {
                        acc += norm(u) * norm(v) * coef[u][v]
                            * ((2.0 * x as f64 + 1.0) * u as f64 * pi / 16.0).cos()
                            * ((2.0 * y as f64 + 1.0) * v as f64 * pi / 16.0).cos();
                    }
                }
                let expect = ((acc + 128.0) / 255.0).clamp(0.0, 1.0);
                assert_eq!(
                    got.get(x, y).to_bits(),
                    expect.to_bits(),
                    "bit mismatch at ({x},{y})"
                );
            }
        }
    }

    #[test]
    fn compression_validates_arguments() {
        let p = busy_patch(8);
        assert_eq!(jpeg_like(&p, 0).unwrap_err(), DegradeError::BadQuality(0));
        assert_eq!(jpeg_like(&p, 101).unwrap_err(), DegradeError::BadQuality(101));
        let odd = busy_patch(12);
        assert_eq!(
            jpeg_like(&odd, 50).unwrap_err(),
            DegradeError::NotBlockAligned { h: 12, w: 12 }
        );
    }

    #[test]
    fn quant_table_endpoints() {
        let q100 = scaled_quant_table(100);
        assert!(q100.iter().all(|&v| v == 1.0), "quality 100 must round only");
        let q50 = scaled_quant_table(50);
        assert_eq!(q50[0], 16.0, "quality 50 reproduces the base table");
        let q1 = scaled_quant_table(1);
        assert!(q1.iter().all(|&v| v == 255.0), "quality 1 saturates");
    }

    #[test]
    fn identity_chain_is_within_one_gray_level() {
        let p = gradient_patch(16);
        let cfg = DegradationConfig::identity(5);
        let q = degrade(&p, &cfg).unwrap();
        for (a, b) in p.pixels().iter().zip(q.pixels()) {
            assert!((a - b).abs() <= 1.0 / 255.0, "{a} vs {b}");
        }
    }

    #[test]
    fn chain_equals_stage_by_stage_composition() {
        let p = busy_patch(32);
        let cfg = DegradationConfig {
            blur_sigma: 1.0,
            kernel_radius: 3,
            downsample_factor: 2,
            noise_sigma: 0.05,
            jpeg_quality: 30,
            rng_seed: 11,
            second_round: false,
        };
        let chained = degrade(&p, &cfg).unwrap();
        let manual = jpeg_like(
            &add_noise(&downsample(&gaussian_blur(&p, 1.0, 3).unwrap(), 2).unwrap(), 0.05, 11)
                .unwrap(),
            30,
        )
        .unwrap();
        assert_eq!(chained, manual, "chain must compose the stages exactly");
    }

    #[test]
    fn chain_is_deterministic_and_seed_sensitive() {
        let p = busy_patch(16);
        let cfg = DegradationConfig {
            blur_sigma: 0.8,
            kernel_radius: 3,
            downsample_factor: 1,
            noise_sigma: 0.1,
            jpeg_quality: 40,
            rng_seed: 21,
            second_round: false,
        };
        let a = degrade(&p, &cfg).unwrap();
        let b = degrade(&p, &cfg).unwrap();
        assert!(a.pixels().iter().zip(b.pixels()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let mut cfg2 = cfg.clone();
        cfg2.rng_seed = 22;
        assert_ne!(a, degrade(&p, &cfg2).unwrap());
    }

    #[test]
    fn second_round_compounds_damage() {
        let p = busy_patch(16);
        let mut cfg = DegradationConfig {
            blur_sigma: 1.0,
            kernel_radius: 3,
            downsample_factor: 1,
            noise_sigma: 0.05,
            jpeg_quality: 50,
            rng_seed: 31,
            second_round: false,
        };
        let once = degrade(&p, &cfg).unwrap();
        cfg.second_round = true;
        let twice = degrade(&p, &cfg).unwrap();
        let psnr_once = psnr(&p, &once).unwrap();
        let psnr_twice = psnr(&p, &twice).unwrap();
        assert!(
            psnr_twice < psnr_once,
            "second round should hurt: {psnr_twice} vs {psnr_once}"
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = DegradationConfig::identity(0);
        assert!(cfg.validate().is_ok());
        cfg.blur_sigma = 1.5;
        cfg.kernel_radius = 4;
        assert_eq!(
            cfg.validate().unwrap_err(),
            DegradeError::RadiusTooSmall { radius: 4, sigma: 1.5 }
        );
        cfg.kernel_radius = 5;
        assert!(cfg.validate().is_ok());
        cfg.jpeg_quality = 0;
        assert!(cfg.validate().is_err());
    }
}
