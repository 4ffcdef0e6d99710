//! Gaussian mixtures with closed-form diffusion, densities, scores, exact
//! sampling and single-Gaussian KL.
//!
//! These are the ground-truth distributions of the laboratory: under the
//! forward process x_t = α_t·x₀ + σ_t·ε a mixture stays a mixture, with each
//! component mapped to N(α_t·μ, α_t²·Σ + σ_t²·I). That closure is what makes
//! every score and KL value checkable against an analytic oracle.

use crate::schedule::NoiseSchedule;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Tolerance for the weights-sum-to-one invariant.
const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Tolerance for covariance symmetry, relative to the largest entry.
const SYMMETRY_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("mixture needs at least one component")]
    Empty,
    #[error("component {0} has mismatched dimensions")]
    DimMismatch(usize),
    #[error("weights must be >= 0 and sum to 1 within 1e-12 (sum = {0})")]
    BadWeights(f64),
    #[error("covariance of component {0} is not symmetric")]
    NotSymmetric(usize),
    #[error("covariance of component {0} is not positive definite")]
    NotPositiveDefinite(usize),
    #[error("point has dimension {got}, mixture has {expected}")]
    PointDimMismatch { expected: usize, got: usize },
    #[error("KL is only defined here between single-component mixtures of equal dimension")]
    KlNotSingleGaussian,
}

/// Covariance of one component, as supplied by the caller.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovSpec {
    /// Diagonal covariance: the vector of variances.
    Diagonal(Vec<f64>),
    /// Full covariance, row by row.
    Full(Vec<Vec<f64>>),
}

/// Internal component storage. Diagonal covariances keep their cheap path;
/// full covariances carry their Cholesky factor from construction.
#[derive(Debug, Clone)]
enum Cov {
    Diagonal(Vec<f64>),
    Full { matrix: DMatrix<f64>, chol: Cholesky<f64, Dyn> },
}

#[derive(Debug, Clone)]
struct Component {
    weight: f64,
    mean: Vec<f64>,
    cov: Cov,
}

/// A validated Gaussian mixture: weights >= 0 summing to 1, every covariance
/// symmetric positive definite (verified by Cholesky at construction).
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<CovSpec>,
    ) -> Result<Self, OracleError> {
        if weights.is_empty() {
            return Err(OracleError::Empty);
        }
        if means.len() != weights.len() || covs.len() != weights.len() {
            return Err(OracleError::DimMismatch(0));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(OracleError::DimMismatch(0));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(OracleError::BadWeights(sum));
        }
        let mut components = Vec::with_capacity(weights.len());
        for (k, ((w, mean), cov)) in weights.into_iter().zip(means).zip(covs).enumerate() {
            if mean.len() != dim {
                return Err(OracleError::DimMismatch(k));
            }
            let cov = match cov {
                CovSpec::Diagonal(d) => {
                    if d.len() != dim {
                        return Err(OracleError::DimMismatch(k));
                    }
                    if d.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
                        return Err(OracleError::NotPositiveDefinite(k));
                    }
                    Cov::Diagonal(d)
                }
                CovSpec::Full(rows) => {
                    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                        return Err(OracleError::DimMismatch(k));
                    }
                    let m = DMatrix::from_fn(dim, dim, |i, j| rows[i][j]);
                    let scale = m.iter().fold(1.0f64, |a, &v| a.max(v.abs()));
                    for i in 0..dim {
                        for j in (i + 1)..dim {
                            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                                return Err(OracleError::NotSymmetric(k));
                            }
                        }
                    }
                    let chol = Cholesky::new(m.clone())
                        .ok_or(OracleError::NotPositiveDefinite(k))?;
                    Cov::Full { matrix: m, chol }
                }
            };
            components.push(Component { weight: w, mean, cov });
        }
        Ok(Self { dim, components })
    }

    /// Convenience: a single Gaussian.
    pub fn single(mean: Vec<f64>, cov: CovSpec) -> Result<Self, OracleError> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    /// Standard normal N(0, I_dim).
    pub fn standard(dim: usize) -> Self {
        Self::single(vec![0.0; dim], CovSpec::Diagonal(vec![1.0; dim]))
            .expect("standard normal is always valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.components[k].weight
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.components[k].mean
    }

    /// Covariance of component `k` as a dense row-major matrix.
    pub fn cov_matrix(&self, k: usize) -> Vec<Vec<f64>> {
        match &self.components[k].cov {
            Cov::Diagonal(d) => {
                let mut m = vec![vec![0.0; self.dim]; self.dim];
                for (i, &v) in d.iter().enumerate() {
                    m[i][i] = v;
                }
                m
            }
            Cov::Full { matrix, .. } => (0..self.dim)
                .map(|i| (0..self.dim).map(|j| matrix[(i, j)]).collect())
                .collect(),
        }
    }

    /// The mixture at diffusion time `t`: component k becomes
    /// N(α_t·μ_k, α_t²·Σ_k + σ_t²·I) with unchanged weight.
    pub fn diffuse(&self, schedule: &NoiseSchedule, t: usize) -> GaussianMixture {
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        let (a2, s2) = (a * a, s * s);
        let weights: Vec<f64> = self.components.iter().map(|c| c.weight).collect();
        let means: Vec<Vec<f64>> = self
            .components
            .iter()
            .map(|c| c.mean.iter().map(|m| a * m).collect())
            .collect();
        let covs: Vec<CovSpec> = self
            .components
            .iter()
            .map(|c| match &c.cov {
                Cov::Diagonal(d) => {
                    CovSpec::Diagonal(d.iter().map(|v| a2 * v + s2).collect())
                }
                Cov::Full { matrix, .. } => {
                    let mut m = matrix.clone() * a2;
                    for i in 0..self.dim {
                        m[(i, i)] += s2;
                    }
                    CovSpec::Full(
                        (0..self.dim)
                            .map(|i| (0..self.dim).map(|j| m[(i, j)]).collect())
                            .collect(),
                    )
                }
            })
            .collect();
        GaussianMixture::new(weights, means, covs)
            .expect("diffusing a valid mixture preserves validity")
    }

    /// Per-component log weight + log density at `x`. The building block for
    /// both [`log_density`](Self::log_density) and [`score`](Self::score).
    fn log_terms(&self, x: &[f64]) -> Result<Vec<f64>, OracleError> {
        if x.len() != self.dim {
            return Err(OracleError::PointDimMismatch { expected: self.dim, got: x.len() });
        }
        let d = self.dim as f64;
        Ok(self
            .components
            .iter()
            .map(|c| {
                if c.weight == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let log_n = match &c.cov {
                    Cov::Diagonal(diag) => {
                        let mut quad = 0.0;
                        let mut logdet = 0.0;
                        for ((xi, mi), vi) in x.iter().zip(&c.mean).zip(diag) {
                            let r = xi - mi;
                            quad += r * r / vi;
                            logdet += vi.ln();
                        }
                        -0.5 * (quad + logdet + d * LN_2PI)
                    }
                    Cov::Full { chol, .. } => {
                        let r = DVector::from_fn(self.dim, |i, _| x[i] - c.mean[i]);
                        // Solve L y = r; quad = ‖y‖², logdet = 2 Σ ln L_ii.
                        let y = chol.l_dirty().solve_lower_triangular(&r)
                            .expect("Cholesky factor is nonsingular");
                        let quad = y.norm_squared();
                        let logdet: f64 =
                            2.0 * (0..self.dim).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>();
                        -0.5 * (quad + logdet + d * LN_2PI)
                    }
                };
                c.weight.ln() + log_n
            })
            .collect())
    }

    /// log p(x) via a max-shifted log-sum-exp over components.
    pub fn log_density(&self, x: &[f64]) -> Result<f64, OracleError> {
        let terms = self.log_terms(x)?;
        Ok(log_sum_exp(&terms))
    }

    /// ∇_x log p(x): the responsibility-weighted sum of per-component scores
    /// −Σ_k⁻¹(x − μ_k).
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>, OracleError> {
        let terms = self.log_terms(x)?;
        let lse = log_sum_exp(&terms);
        let mut out = vec![0.0; self.dim];
        if lse == f64::NEG_INFINITY {
            // Density underflowed everywhere; the score is not informative.
            return Ok(out);
        }
        for (c, &term) in self.components.iter().zip(&terms) {
            if term == f64::NEG_INFINITY {
                continue;
            }
            let resp = (term - lse).exp();
            match &c.cov {
                Cov::Diagonal(diag) => {
                    for ((o, (xi, mi)), vi) in
                        out.iter_mut().zip(x.iter().zip(&c.mean)).zip(diag)
                    {
                        *o += resp * (-(xi - mi) / vi);
                    }
                }
                Cov::Full { chol, .. } => {
                    let r = DVector::from_fn(self.dim, |i, _| x[i] - c.mean[i]);
                    let v = chol.solve(&r);
                    for (o, vi) in out.iter_mut().zip(v.iter()) {
                        *o -= resp * vi;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Draws `n` exact samples: component by inverse-CDF on the weights, then
    /// μ + L·z with L the Cholesky factor (√variances on the diagonal path).
    /// Fully determined by the caller's RNG state.
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    /// Like [`sample`](Self::sample), but also reports which component each
    /// draw came from (the conditioning label).
    pub fn sample_labeled(
        &self,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut xs = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (x, k) = self.sample_one_labeled(rng);
            xs.push(x);
            labels.push(k);
        }
        (xs, labels)
    }

    /// One exact sample; see [`sample`](Self::sample).
    pub fn sample_one(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.sample_one_labeled(rng).0
    }

    /// One exact sample plus its component index.
    pub fn sample_one_labeled(&self, rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (k, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = k;
                break;
            }
        }
        let c = &self.components[chosen];
        let z: Vec<f64> = (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let x = match &c.cov {
            Cov::Diagonal(diag) => c
                .mean
                .iter()
                .zip(&z)
                .zip(diag)
                .map(|((m, zi), v)| m + v.sqrt() * zi)
                .collect(),
            Cov::Full { chol, .. } => {
                let l = chol.l_dirty();
                (0..self.dim)
                    .map(|i| {
                        // L is lower-triangular; only j <= i contributes.
                        c.mean[i] + (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>()
                    })
                    .collect()
            }
        };
        (x, chosen)
    }

    /// Which component a label refers to; labels are component indices.
    pub fn component_mean(&self, label: usize) -> Option<&[f64]> {
        self.components.get(label).map(|c| c.mean.as_slice())
    }

    /// Component `label` as a standalone single-component mixture (weight
    /// renormalised to 1), e.g. for per-mode divergence fits.
    pub fn component_as_single(&self, label: usize) -> Option<GaussianMixture> {
        let c = self.components.get(label)?;
        let cov = match &c.cov {
            Cov::Diagonal(d) => CovSpec::Diagonal(d.clone()),
            Cov::Full { matrix, .. } => CovSpec::Full(
                (0..self.dim)
                    .map(|i| (0..self.dim).map(|j| matrix[(i, j)]).collect())
                    .collect(),
            ),
        };
        Some(GaussianMixture::single(c.mean.clone(), cov).expect(
            "a component of a valid mixture is itself a valid mixture",
        ))
    }
}

/// Max-shifted log-sum-exp; −∞ entries are ignored, all-−∞ gives −∞.
fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = terms.iter().map(|&t| (t - m).exp()).sum();
    m + sum.ln()
}

/// Closed-form KL divergence KL(p ‖ q) between two single-component
/// mixtures (Gaussians) of equal dimension:
/// ½·(tr(Σq⁻¹Σp) + (μq−μp)ᵀΣq⁻¹(μq−μp) − d + ln det Σq − ln det Σp).
pub fn gaussian_kl(p: &GaussianMixture, q: &GaussianMixture) -> Result<f64, OracleError> {
    if p.num_components() != 1 || q.num_components() != 1 || p.dim != q.dim {
        return Err(OracleError::KlNotSingleGaussian);
    }
    let d = p.dim;
    let (cp, cq) = (&p.components[0], &q.components[0]);

    // Fast path: both diagonal.
    if let (Cov::Diagonal(dp), Cov::Diagonal(dq)) = (&cp.cov, &cq.cov) {
        let mut acc = 0.0;
        for i in 0..d {
            let dm = cq.mean[i] - cp.mean[i];
            acc += dp[i] / dq[i] + dm * dm / dq[i] - 1.0 + (dq[i] / dp[i]).ln();
        }
        return Ok(0.5 * acc);
    }

    let to_dense = |c: &Component| -> DMatrix<f64> {
        match &c.cov {
            Cov::Diagonal(diag) => DMatrix::from_fn(d, d, |i, j| if i == j { diag[i] } else { 0.0 }),
            Cov::Full { matrix, .. } => matrix.clone(),
        }
    };
    let sp = to_dense(cp);
    let sq = to_dense(cq);
    let chol_q = Cholesky::new(sq).expect("validated covariance is PD");
    let chol_p = Cholesky::new(sp.clone()).expect("validated covariance is PD");

    let trace = chol_q.solve(&sp).trace();
    let dm = DVector::from_fn(d, |i, _| cq.mean[i] - cp.mean[i]);
    let quad = dm.dot(&chol_q.solve(&dm));
    let logdet = |ch: &Cholesky<f64, Dyn>| -> f64 {
        2.0 * (0..d).map(|i| ch.l_dirty()[(i, i)].ln()).sum::<f64>()
    };
    Ok(0.5 * (trace + quad - d as f64 + logdet(&chol_q) - logdet(&chol_p)))
}
