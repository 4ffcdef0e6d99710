//! One-step restoration by score distillation with dynamic noise control.
//!
//! A generator G maps a degraded input (concatenated with fresh noise z) to
//! a restored sample in one pass. Each training step combines two signals:
//!
//! 1. **Regression**: mean squared error against the clean reference.
//! 2. **Score difference**: a KL-shrinking update obtained by diffusing the
//!    generator output to a noise level matched to the current batch error,
//!    then weighing the generator's Jacobian by the difference between the
//!    teacher's noise prediction and a concurrently trained "fake" noise
//!    predictor that tracks the generator's own output distribution. For
//!    noise-prediction networks ε(x_t) = −σ_t·∇log p_t(x_t), so the
//!    per-sample weight on ∂G/∂θ is ω(t)·α_t·(ε_teacher − ε_fake)/σ_t —
//!    the division by σ_t converts residual differences back into score
//!    differences.
//!
//! The noise level is **dynamic**: T_max = σ⁻¹(κ·d) where d is the RMS
//! batch distance between restored and clean samples, and the blend weight
//! α = T_max/T shifts from pure regression (early, large errors) toward
//! pure score matching (late, small errors). A third stage per step fits
//! the fake predictor to the generator's current outputs by standard
//! denoising regression on detached samples.

use crate::nets::{
    backward, forward, forward_cached, FwdCache, NetError, NetSpec, ParamVector,
};
use crate::opt::{AdamW, AdamWConfig};
use crate::oracle::GaussianMixture;
use crate::rng::ChaCha8Rng;
use crate::schedule::{NoiseSchedule, ScheduleError};
use crate::util::{dist_sq, expected_norm_std_normal, norm};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("batch invalid: {0}")]
    BadBatch(String),
    #[error("timestep {t} outside 1..={max}")]
    BadTimestep { t: usize, max: usize },
    #[error("options invalid: {0}")]
    BadOptions(String),
    #[error("architecture mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// The frozen teacher: either an analytic mixture (its diffused score is
/// exact) or a pretrained noise-prediction network.
#[derive(Debug, Clone)]
pub enum Teacher {
    Oracle(GaussianMixture),
    Network { spec: NetSpec, params: ParamVector },
}

impl Teacher {
    /// Data dimension the teacher operates on.
    pub fn dim(&self) -> Result<usize, DistillError> {
        match self {
            Teacher::Oracle(gm) => Ok(gm.dim()),
            Teacher::Network { spec, .. } => {
                if spec.input_dim != spec.output_dim {
                    return Err(DistillError::Mismatch(
                        "a noise-prediction network must map dim -> dim".into(),
                    ));
                }
                Ok(spec.input_dim)
            }
        }
    }

    /// Caches per-timestep work (the diffused mixture, and under label
    /// conditioning each diffused component) and returns an evaluator for
    /// ε_teacher(x_t, t, y).
    ///
    /// `conditional` selects whether the oracle scores the target
    /// *conditioned on the label* (each label names one mixture component)
    /// or the full marginal; a network teacher always receives the label
    /// directly and ignores the flag.
    pub fn at<'a>(
        &'a self,
        schedule: &NoiseSchedule,
        t: usize,
        conditional: bool,
    ) -> Result<TeacherAtT<'a>, DistillError> {
        if t == 0 || t > schedule.num_steps() {
            return Err(DistillError::BadTimestep { t, max: schedule.num_steps() });
        }
        Ok(match self {
            Teacher::Oracle(gm) => {
                let components = if conditional && gm.num_components() > 1 {
                    (0..gm.num_components())
                        .map(|k| {
                            let single = gm
                                .component_as_single(k)
                                .expect("k ranges over this mixture's components");
                            single.diffuse(schedule, t)
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                TeacherAtT::Oracle {
                    diffused: gm.diffuse(schedule, t),
                    components,
                    sigma: schedule.sigma(t),
                }
            }
            Teacher::Network { spec, params } => TeacherAtT::Network { spec, params, t },
        })
    }
}

/// A teacher bound to one timestep; cheap to evaluate per batch item.
pub enum TeacherAtT<'a> {
    Oracle {
        /// The full diffused marginal.
        diffused: GaussianMixture,
        /// Per-label diffused components; empty when unconditional (or when
        /// there is only one component, where the two readings coincide).
        components: Vec<GaussianMixture>,
        sigma: f64,
    },
    Network {
        spec: &'a NetSpec,
        params: &'a ParamVector,
        t: usize,
    },
}

impl TeacherAtT<'_> {
    /// ε_teacher(x_t, y): the oracle converts the exact diffused score of
    /// the label's component (or of the full marginal when unconditional)
    /// via ε = −σ_t·score; a network teacher is evaluated directly.
    pub fn residual(&self, x_t: &[f64], label: usize) -> Result<Vec<f64>, DistillError> {
        match self {
            TeacherAtT::Oracle { diffused, components, sigma } => {
                let scored = if components.is_empty() {
                    diffused
                } else {
                    components.get(label).ok_or_else(|| {
                        DistillError::Mismatch(format!(
                            "label {label} has no component in a {}-mode target",
                            components.len()
                        ))
                    })?
                };
                let score = scored
                    .score(x_t)
                    .map_err(|e| DistillError::Mismatch(e.to_string()))?;
                Ok(score.into_iter().map(|s| -sigma * s).collect())
            }
            TeacherAtT::Network { spec, params, t } => {
                Ok(forward(spec, params, x_t, *t, label)?)
            }
        }
    }
}

/// One training batch: clean references, degraded inputs, per-item labels,
/// and the fresh noise concatenated to each degraded input.
#[derive(Debug, Clone)]
pub struct Batch {
    pub hq: Vec<Vec<f64>>,
    pub lq: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.hq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hq.is_empty()
    }
}

/// Behavioural knobs of the distillation loop.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillOptions {
    /// Multiplier on the batch distance when choosing the noise level.
    pub kappa: f64,
    /// Weight of the score-difference term; 0 disables it entirely.
    pub lambda: f64,
    /// When false, T_max is pinned to T and the blend uses `fixed_alpha`.
    pub dynamic_control: bool,
    /// Regression weight used only when `dynamic_control` is off.
    pub fixed_alpha: f64,
    /// Whether an oracle teacher scores the label's own component rather
    /// than the full marginal (network teachers always see the label).
    pub condition_teacher: bool,
    pub gen_opt: AdamWConfig,
    pub fake_opt: AdamWConfig,
}

impl Default for DistillOptions {
    fn default() -> Self {
        Self {
            kappa: 1.5,
            lambda: 1.0,
            dynamic_control: true,
            fixed_alpha: 0.5,
            condition_teacher: true,
            gen_opt: AdamWConfig::default(),
            fake_opt: AdamWConfig::default(),
        }
    }
}

/// What one call to [`DistillState::train_step`] measured and did.
#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    /// 1-based index of the completed step.
    pub step: u64,
    /// Per-element mean squared regression error of this batch.
    pub reg_loss: f64,
    /// L2 norm of the score-difference gradient estimate (before weighting
    /// by λ and 1−α); exactly 0 when the term is disabled or skipped.
    pub dsm_norm: f64,
    /// The noise ceiling chosen for this batch.
    pub tmax: usize,
    /// Regression weight α used for this step.
    pub alpha: f64,
    /// Per-element denoising loss of the fake-score update.
    pub fake_loss: f64,
    /// The timestep drawn for the score-difference term, if any.
    pub sampled_t: Option<usize>,
    /// σ at the drawn timestep (None when no timestep was drawn).
    pub sigma_t: Option<f64>,
    /// σ at the ceiling; always >= `sigma_t` by construction.
    pub sigma_tmax: f64,
    /// RMS batch distance d that set the ceiling.
    pub batch_distance: f64,
}

/// RNG streams a training step consumes; owned by the caller so stream
/// policy stays outside this module.
pub struct StepRngs<'a> {
    /// Noise ε for diffusing generator outputs on the score path.
    pub diffusion: &'a mut ChaCha8Rng,
    /// Timestep draws on the score path.
    pub timestep: &'a mut ChaCha8Rng,
    /// Timesteps and noise for the fake-score denoising update.
    pub fake: &'a mut ChaCha8Rng,
}

/// All mutable state of a distillation run.
#[derive(Debug, Clone)]
pub struct DistillState {
    pub gen_spec: NetSpec,
    pub gen_params: ParamVector,
    pub fake_spec: NetSpec,
    pub fake_params: ParamVector,
    pub teacher: Teacher,
    pub schedule: NoiseSchedule,
    pub options: DistillOptions,
    opt_gen: AdamW,
    opt_fake: AdamW,
    step: u64,
}

impl DistillState {
    pub fn new(
        gen_spec: NetSpec,
        gen_params: ParamVector,
        fake_spec: NetSpec,
        fake_params: ParamVector,
        teacher: Teacher,
        schedule: NoiseSchedule,
        options: DistillOptions,
    ) -> Result<Self, DistillError> {
        gen_spec.validate()?;
        fake_spec.validate()?;
        let dim = gen_spec.output_dim;
        if fake_spec.input_dim != dim || fake_spec.output_dim != dim {
            return Err(DistillError::Mismatch(format!(
                "fake net must map {dim} -> {dim}, got {} -> {}",
                fake_spec.input_dim, fake_spec.output_dim
            )));
        }
        if teacher.dim()? != dim {
            return Err(DistillError::Mismatch(format!(
                "teacher dimension {} != generator output {dim}",
                teacher.dim()?
            )));
        }
        if gen_params.len() != gen_spec.param_count() {
            return Err(NetError::ParamCountMismatch {
                expected: gen_spec.param_count(),
                got: gen_params.len(),
            }
            .into());
        }
        if fake_params.len() != fake_spec.param_count() {
            return Err(NetError::ParamCountMismatch {
                expected: fake_spec.param_count(),
                got: fake_params.len(),
            }
            .into());
        }
        if !(options.kappa > 0.0 && options.kappa.is_finite()) {
            return Err(DistillError::BadOptions(format!("kappa = {}", options.kappa)));
        }
        if !(options.lambda >= 0.0 && options.lambda.is_finite()) {
            return Err(DistillError::BadOptions(format!("lambda = {}", options.lambda)));
        }
        if !(0.0..=1.0).contains(&options.fixed_alpha) {
            return Err(DistillError::BadOptions(format!(
                "fixed_alpha = {}",
                options.fixed_alpha
            )));
        }
        let opt_gen = AdamW::new(options.gen_opt, gen_params.len());
        let opt_fake = AdamW::new(options.fake_opt, fake_params.len());
        Ok(Self {
            gen_spec,
            gen_params,
            fake_spec,
            fake_params,
            teacher,
            schedule,
            options,
            opt_gen,
            opt_fake,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), DistillError> {
        let b = batch.len();
        if b == 0 {
            return Err(DistillError::BadBatch("empty batch".into()));
        }
        if batch.lq.len() != b || batch.z.len() != b || batch.labels.len() != b {
            return Err(DistillError::BadBatch("ragged batch arrays".into()));
        }
        let dim = self.gen_spec.output_dim;
        for i in 0..b {
            if batch.hq[i].len() != dim {
                return Err(DistillError::BadBatch(format!(
                    "hq[{i}] has dim {}, want {dim}",
                    batch.hq[i].len()
                )));
            }
            if batch.lq[i].len() + batch.z[i].len() != self.gen_spec.input_dim {
                return Err(DistillError::BadBatch(format!(
                    "lq[{i}] ⊕ z[{i}] has dim {}, generator wants {}",
                    batch.lq[i].len() + batch.z[i].len(),
                    self.gen_spec.input_dim
                )));
            }
            if batch.labels[i] >= self.gen_spec.num_labels {
                return Err(DistillError::BadBatch(format!(
                    "label {} out of range",
                    batch.labels[i]
                )));
            }
        }
        Ok(())
    }

    /// Runs the generator on every batch item, keeping backward caches.
    fn generator_forward(&self, batch: &Batch) -> Result<Vec<FwdCache>, DistillError> {
        let inputs: Vec<Vec<f64>> = batch
            .lq
            .iter()
            .zip(&batch.z)
            .map(|(lq, z)| {
                let mut v = Vec::with_capacity(lq.len() + z.len());
                v.extend_from_slice(lq);
                v.extend_from_slice(z);
                v
            })
            .collect();
        let caches: Result<Vec<FwdCache>, NetError> = inputs
            .par_iter()
            .zip(batch.labels.par_iter())
            .map(|(input, &label)| forward_cached(&self.gen_spec, &self.gen_params, input, 0, label))
            .collect();
        Ok(caches?)
    }

    /// Restores a single item (inference path).
    pub fn restore(
        &self,
        lq: &[f64],
        z: &[f64],
        label: usize,
    ) -> Result<Vec<f64>, DistillError> {
        let mut input = Vec::with_capacity(lq.len() + z.len());
        input.extend_from_slice(lq);
        input.extend_from_slice(z);
        Ok(forward(&self.gen_spec, &self.gen_params, &input, 0, label)?)
    }

    /// Regression loss and its parameter gradient over one batch:
    /// L = Σᵢ‖G(lqᵢ⊕zᵢ) − hqᵢ‖² / (B·D).
    pub fn regression_gradient(
        &self,
        batch: &Batch,
    ) -> Result<(f64, ParamVector), DistillError> {
        self.check_batch(batch)?;
        let caches = self.generator_forward(batch)?;
        let (loss, grad) = self.regression_from_caches(batch, &caches)?;
        Ok((loss, grad))
    }

    fn regression_from_caches(
        &self,
        batch: &Batch,
        caches: &[FwdCache],
    ) -> Result<(f64, ParamVector), DistillError> {
        let b = batch.len();
        let d = self.gen_spec.output_dim;
        let scale = 1.0 / (b * d) as f64;
        let per_item: Result<Vec<(f64, ParamVector)>, NetError> = caches
            .par_iter()
            .zip(batch.hq.par_iter())
            .map(|(cache, hq)| {
                let out = cache.output();
                let loss = dist_sq(out, hq);
                let out_grad: Vec<f64> =
                    out.iter().zip(hq).map(|(o, h)| 2.0 * (o - h) * scale).collect();
                let mut grad = ParamVector::zeros(self.gen_spec.param_count());
                backward(&self.gen_spec, &self.gen_params, cache, &out_grad, &mut grad)?;
                Ok((loss * scale, grad))
            })
            .collect();
        // Sequential, index-ordered reduction: results are independent of
        // the number of rayon workers.
        let mut loss = 0.0;
        let mut grad = ParamVector::zeros(self.gen_spec.param_count());
        for (l, g) in per_item? {
            loss += l;
            grad.add_scaled(&g, 1.0);
        }
        Ok((loss, grad))
    }

    /// Score-difference gradient for the generator at a fixed timestep,
    /// using the production teacher and the current fake net.
    pub fn dsm_generator_gradient(
        &self,
        batch: &Batch,
        t: usize,
        diffusion_rng: &mut ChaCha8Rng,
    ) -> Result<ParamVector, DistillError> {
        self.check_batch(batch)?;
        let caches = self.generator_forward(batch)?;
        let noises = draw_noises(diffusion_rng, batch.len(), self.gen_spec.output_dim);
        let teacher_at = self.teacher.at(&self.schedule, t, self.options.condition_teacher)?;
        let fake = |x_t: &[f64], tt: usize, label: usize| -> Result<Vec<f64>, DistillError> {
            Ok(forward(&self.fake_spec, &self.fake_params, x_t, tt, label)?)
        };
        dsm_core(
            &self.gen_spec,
            &self.gen_params,
            &self.schedule,
            t,
            &caches,
            &batch.labels,
            &noises,
            &|x_t, label| teacher_at.residual(x_t, label),
            &fake,
        )
    }

    /// Denoising update of the fake net on the generator's current outputs
    /// (taken as fixed targets). Returns the per-element loss.
    pub fn fake_score_update(
        &mut self,
        batch: &Batch,
        fake_rng: &mut ChaCha8Rng,
    ) -> Result<f64, DistillError> {
        self.check_batch(batch)?;
        let caches = self.generator_forward(batch)?;
        let outputs: Vec<Vec<f64>> = caches.iter().map(|c| c.output().to_vec()).collect();
        self.fake_update_on(&outputs, &batch.labels, fake_rng)
    }

    /// The same update with the generator outputs already in hand.
    fn fake_update_on(
        &mut self,
        outputs: &[Vec<f64>],
        labels: &[usize],
        fake_rng: &mut ChaCha8Rng,
    ) -> Result<f64, DistillError> {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let b = outputs.len();
        let d = self.fake_spec.input_dim;
        let t_total = self.schedule.num_steps();
        // Draw (t_i, ε_i) sequentially, in item order, before going parallel.
        let draws: Vec<(usize, Vec<f64>)> = (0..b)
            .map(|_| {
                let t = fake_rng.random_range(1..=t_total);
                let eps: Vec<f64> =
                    (0..d).map(|_| fake_rng.sample::<f64, _>(StandardNormal)).collect();
                (t, eps)
            })
            .collect();
        let scale = 1.0 / (b * d) as f64;
        let per_item: Result<Vec<(f64, ParamVector)>, DistillError> = outputs
            .par_iter()
            .zip(labels.par_iter())
            .zip(draws.par_iter())
            .map(|((x, &label), (t, eps))| {
                let (a, s) = (self.schedule.alpha(*t), self.schedule.sigma(*t));
                let x_t: Vec<f64> =
                    x.iter().zip(eps).map(|(xi, ei)| a * xi + s * ei).collect();
                let cache = forward_cached(&self.fake_spec, &self.fake_params, &x_t, *t, label)?;
                let pred = cache.output();
                let loss = dist_sq(pred, eps);
                let out_grad: Vec<f64> =
                    pred.iter().zip(eps).map(|(p, e)| 2.0 * (p - e) * scale).collect();
                let mut grad = ParamVector::zeros(self.fake_spec.param_count());
                backward(&self.fake_spec, &self.fake_params, &cache, &out_grad, &mut grad)?;
                Ok((loss * scale, grad))
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = ParamVector::zeros(self.fake_spec.param_count());
        for (l, g) in per_item? {
            loss += l;
            grad.add_scaled(&g, 1.0);
        }
        self.opt_fake.step(&mut self.fake_params, &grad);
        Ok(loss)
    }

    /// One full training step: forward, choose the noise ceiling from the
    /// batch distance, combine α·∇reg + (1−α)·λ·∇(score difference) into a
    /// generator update, then refresh the fake net on the (detached)
    /// generator outputs.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        rngs: &mut StepRngs<'_>,
    ) -> Result<StepReport, DistillError> {
        self.check_batch(batch)?;
        let t_total = self.schedule.num_steps();
        let caches = self.generator_forward(batch)?;
        let outputs: Vec<Vec<f64>> = caches.iter().map(|c| c.output().to_vec()).collect();

        let d = batch_distance(&batch.hq, &outputs)?;
        let (tmax, alpha) = if self.options.dynamic_control {
            let tmax = dynamic_tmax(d, self.options.kappa, &self.schedule);
            (tmax, loss_alpha(tmax, t_total))
        } else {
            (t_total, self.options.fixed_alpha)
        };

        let (reg_loss, reg_grad) = self.regression_from_caches(batch, &caches)?;

        let mut sampled_t = None;
        let mut dsm_norm = 0.0;
        let mut total = ParamVector::zeros(self.gen_spec.param_count());
        total.add_scaled(&reg_grad, alpha);
        if self.options.lambda > 0.0 {
            if let Some(t) = sample_timestep(tmax, rngs.timestep) {
                debug_assert!(self.schedule.sigma(t) <= self.schedule.sigma(tmax));
                let noises = draw_noises(rngs.diffusion, batch.len(), self.gen_spec.output_dim);
                let teacher_at = self.teacher.at(&self.schedule, t, self.options.condition_teacher)?;
                let fake = |x_t: &[f64], tt: usize, label: usize| -> Result<Vec<f64>, DistillError> {
                    Ok(forward(&self.fake_spec, &self.fake_params, x_t, tt, label)?)
                };
                let dsm_grad = dsm_core(
                    &self.gen_spec,
                    &self.gen_params,
                    &self.schedule,
                    t,
                    &caches,
                    &batch.labels,
                    &noises,
                    &|x_t, label| teacher_at.residual(x_t, label),
                    &fake,
                )?;
                dsm_norm = norm(dsm_grad.as_slice());
                total.add_scaled(&dsm_grad, (1.0 - alpha) * self.options.lambda);
                sampled_t = Some(t);
            }
        }
        self.opt_gen.step(&mut self.gen_params, &total);

        let fake_loss = self.fake_update_on(&outputs, &batch.labels, rngs.fake)?;

        self.step += 1;
        Ok(StepReport {
            step: self.step,
            reg_loss,
            dsm_norm,
            tmax,
            alpha,
            fake_loss,
            sampled_t,
            sigma_t: sampled_t.map(|t| self.schedule.sigma(t)),
            sigma_tmax: self.schedule.sigma(tmax),
            batch_distance: d,
        })
    }
}

/// RMS batch distance d = sqrt(Σᵢ‖hqᵢ − xᵢ‖² / B).
pub fn batch_distance(hq: &[Vec<f64>], x: &[Vec<f64>]) -> Result<f64, DistillError> {
    if hq.is_empty() || hq.len() != x.len() {
        return Err(DistillError::BadBatch("distance needs equal non-empty sets".into()));
    }
    let mut acc = 0.0;
    for (h, o) in hq.iter().zip(x) {
        if h.len() != o.len() {
            return Err(DistillError::BadBatch("distance dim mismatch".into()));
        }
        acc += dist_sq(h, o);
    }
    Ok((acc / hq.len() as f64).sqrt())
}

/// Noise ceiling for a batch at distance `d`: the smallest t whose σ_t
/// reaches κ·d, saturating at T (and 0 when d = 0).
pub fn dynamic_tmax(d: f64, kappa: f64, schedule: &NoiseSchedule) -> usize {
    schedule.inverse_sigma(kappa * d)
}

/// Draws t uniformly from [ceil(T_max/50), T_max] — the lower 2% of levels
/// carry no usable signal. Returns None when `tmax` < 1.
pub fn sample_timestep(tmax: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
    use rand::Rng;
    if tmax < 1 {
        return None;
    }
    let t_min = tmax.div_ceil(50);
    Some(rng.random_range(t_min..=tmax))
}

/// Regression weight α = T_max/T: 1 while errors still demand full-range
/// noise, falling toward 0 as the generator closes in.
pub fn loss_alpha(tmax: usize, t_total: usize) -> f64 {
    debug_assert!(tmax <= t_total);
    tmax as f64 / t_total as f64
}

/// Upper bound on the expected distance between a diffused generator output
/// x_t = α_t·x + σ_t·ε and the clean reference:
/// B(t) = |α_t − 1|·‖x‖ + σ_t·E‖ε‖ + ‖hq − x‖ (triangle inequality).
/// Nondecreasing in t because each coefficient is.
pub fn distance_bound(
    schedule: &NoiseSchedule,
    t: usize,
    x_norm: f64,
    residual_norm: f64,
    dim: usize,
) -> f64 {
    (schedule.alpha(t) - 1.0).abs() * x_norm
        + schedule.sigma(t) * expected_norm_std_normal(dim)
        + residual_norm
}

fn draw_noises(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    (0..count)
        .map(|_| (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// The score-difference gradient core, shared by training and the
/// verification harnesses (which inject analytic residual closures).
///
/// For each item: x_t = α_t·x + σ_t·ε, then the generator's backward pass is
/// driven by ω(t)·α_t·(ε_teacher(x_t) − ε_fake(x_t)) / (σ_t·B).
#[allow(clippy::too_many_arguments)]
fn dsm_core(
    gen_spec: &NetSpec,
    gen_params: &ParamVector,
    schedule: &NoiseSchedule,
    t: usize,
    caches: &[FwdCache],
    labels: &[usize],
    noises: &[Vec<f64>],
    teacher_residual: &(dyn Fn(&[f64], usize) -> Result<Vec<f64>, DistillError> + Sync),
    fake_residual: &(dyn Fn(&[f64], usize, usize) -> Result<Vec<f64>, DistillError> + Sync),
) -> Result<ParamVector, DistillError> {
    if t == 0 || t > schedule.num_steps() {
        return Err(DistillError::BadTimestep { t, max: schedule.num_steps() });
    }
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let w = schedule.weight(t)?;
    let b = caches.len();
    let scale = w * a / (s * b as f64);
    let per_item: Result<Vec<ParamVector>, DistillError> = caches
        .par_iter()
        .zip(labels.par_iter())
        .zip(noises.par_iter())
        .map(|((cache, &label), eps)| {
            let x = cache.output();
            let x_t: Vec<f64> = x.iter().zip(eps).map(|(xi, ei)| a * xi + s * ei).collect();
            let e_teacher = teacher_residual(&x_t, label)?;
            let e_fake = fake_residual(&x_t, t, label)?;
            let out_grad: Vec<f64> = e_teacher
                .iter()
                .zip(&e_fake)
                .map(|(et, ef)| scale * (et - ef))
                .collect();
            let mut grad = ParamVector::zeros(gen_spec.param_count());
            backward(gen_spec, gen_params, cache, &out_grad, &mut grad)?;
            Ok(grad)
        })
        .collect();
    let mut grad = ParamVector::zeros(gen_spec.param_count());
    for g in per_item? {
        grad.add_scaled(&g, 1.0);
    }
    Ok(grad)
}

/// Gradient-estimator verification: closed-form checks that the training
/// estimator measures what it claims.
pub mod verify {
    use super::*;
    use crate::nets::Activation;
    use crate::oracle::CovSpec;
    use crate::rng::{stream_rng, Stream};
    use crate::schedule::WeightKind;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// Fixed-coefficient exact check: at (α, σ) = (0.8, 0.6) with target
    /// N(0, 1) and generator output N(μ, 1), the mean-parameter gradient of
    /// the KL divergence is α²·μ — and the estimator reproduces it to
    /// floating-point accuracy because the residual difference is constant.
    #[derive(Debug, Clone, Serialize)]
    pub struct PointReport {
        pub mean: f64,
        pub expected: f64,
        pub stderr: f64,
        pub samples: usize,
        pub pass: bool,
    }

    /// Monte-Carlo-vs-finite-difference agreement over a full schedule.
    #[derive(Debug, Clone, Serialize)]
    pub struct CosineReport {
        pub cosine: f64,
        pub mc_grad: Vec<f64>,
        pub fd_grad: Vec<f64>,
        pub samples: usize,
        pub pass: bool,
    }

    #[derive(Debug, Clone, Serialize)]
    pub struct EstimatorReport {
        pub point: PointReport,
        pub cosine: CosineReport,
        pub pass: bool,
    }

    /// The affine generator used by both harnesses: G(lq ⊕ z) =
    /// w_lq·lq + w_z·z + bias, as a hidden-layer-free production net.
    fn affine_generator() -> NetSpec {
        NetSpec {
            input_dim: 2,
            hidden_dims: vec![],
            output_dim: 1,
            activation: Activation::Tanh,
            time_embed_dim: 0,
            cond_embed_dim: 0,
            num_labels: 1,
            residual: false,
        }
    }

    /// Exact-value check. The generator is G(lq, z) = z + μ (so its output
    /// distribution is N(μ, 1)); the teacher is the analytic N(0, 1); the
    /// fake residual is the analytic optimal predictor for N(μ, 1). Then
    /// ε_teacher − ε_fake = σ·α·μ for every draw, and the bias-coordinate
    /// of the estimator must equal α²·μ up to floating-point accumulation.
    pub fn point_check(samples: usize, seed: u64) -> Result<PointReport, DistillError> {
        let mu = 0.5;
        // A two-step table engineered so t = 1 has (α, σ) = (0.8, 0.6).
        let schedule = NoiseSchedule::from_tables(
            vec![1.0, 0.8, 0.6],
            vec![0.0, 0.6, 0.8],
            WeightKind::Constant,
        )?;
        let t = 1;
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));

        let gen_spec = affine_generator();
        // [w_lq, w_z, bias] = [0, 1, μ].
        let gen_params = ParamVector::from_vec(vec![0.0, 1.0, mu]);
        let teacher = Teacher::Oracle(GaussianMixture::standard(1));
        let teacher_at = teacher.at(&schedule, t, true)?;

        // Optimal fake for q_0 = N(μ, 1): q_t = N(α·μ, 1), score is
        // −(x_t − α·μ), residual ε = −σ·score.
        let fake = move |x_t: &[f64], _t: usize, _y: usize| -> Result<Vec<f64>, DistillError> {
            Ok(vec![s * (x_t[0] - a * mu)])
        };

        let mut rng = stream_rng(seed, Stream::DiffusionNoise);
        let bias_idx = 2; // [w_lq, w_z, bias] layout: W row, then b.
        let mut vals = Vec::with_capacity(samples);
        // One item per call: every draw produces its own bias-gradient.
        for _ in 0..samples {
            let z: f64 = rng.sample(StandardNormal);
            let input = [0.0, z];
            let cache = forward_cached(&gen_spec, &gen_params, &input, 0, 0)?;
            let eps = vec![vec![rng.sample::<f64, _>(StandardNormal)]];
            let grad = dsm_core(
                &gen_spec,
                &gen_params,
                &schedule,
                t,
                std::slice::from_ref(&cache),
                &[0usize],
                &eps,
                &|x_t, label| teacher_at.residual(x_t, label),
                &fake,
            )?;
            vals.push(grad.as_slice()[bias_idx]);
        }
        let mean = vals.iter().sum::<f64>() / samples as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / (samples as f64 - 1.0);
        let stderr = (var / samples as f64).sqrt();
        let expected = a * a * mu;
        // The estimate is analytically constant across draws; allow three
        // standard errors of floating-point jitter with an absolute floor.
        let tol = (3.0 * stderr).max(1e-9);
        let pass = (mean - expected).abs() <= tol;
        Ok(PointReport { mean, expected, stderr, samples, pass })
    }

    /// Monte-Carlo vs finite differences. The generator is affine with
    /// parameters θ = (w_lq, w_z, bias), inputs lq, z ~ N(0, 1), so its
    /// output distribution is N(bias, w_lq² + w_z²) in closed form. The
    /// objective F(θ) = mean over the sampler's support of KL(q_t ‖ p_t)
    /// is differentiated two ways: by the production estimator (averaging
    /// single-item calls over random t) and by central differences of the
    /// closed form. Cosine similarity must exceed 0.99 at 1e5 draws.
    pub fn cosine_check(samples: usize, seed: u64) -> Result<CosineReport, DistillError> {
        let schedule = NoiseSchedule::build_vp(1000, 1e-4, 0.02, WeightKind::Constant)?;
        let t_total = schedule.num_steps();
        let theta = [0.7, 1.2, 0.4]; // (w_lq, w_z, bias)
        let p_mean = -0.3;
        let p_var = 1.69;
        let target =
            GaussianMixture::single(vec![p_mean], CovSpec::Diagonal(vec![p_var])).unwrap();
        let teacher = Teacher::Oracle(target);

        let gen_spec = affine_generator();
        let gen_params = ParamVector::from_vec(theta.to_vec());

        // Fake residual: analytic optimal predictor for the generator's
        // current output distribution N(bias, w_lq² + w_z²).
        let q_var = theta[0] * theta[0] + theta[1] * theta[1];
        let q_mean = theta[2];

        let mut mc = vec![0.0; 3];
        let mut t_rng = stream_rng(seed, Stream::Timestep);
        let mut x_rng = stream_rng(seed, Stream::Data);
        let mut e_rng = stream_rng(seed, Stream::DiffusionNoise);
        for _ in 0..samples {
            let t = sample_timestep(t_total, &mut t_rng).expect("tmax = T >= 1");
            let (a, s) = (schedule.alpha(t), schedule.sigma(t));
            let teacher_at = teacher.at(&schedule, t, true)?;
            let fake = move |x_t: &[f64], _t: usize, _y: usize| -> Result<Vec<f64>, DistillError> {
                let vq = a * a * q_var + s * s;
                Ok(vec![s * (x_t[0] - a * q_mean) / vq])
            };
            let lq: f64 = x_rng.sample(StandardNormal);
            let z: f64 = x_rng.sample(StandardNormal);
            let cache = forward_cached(&gen_spec, &gen_params, &[lq, z], 0, 0)?;
            let eps = vec![vec![e_rng.sample::<f64, _>(StandardNormal)]];
            let grad = dsm_core(
                &gen_spec,
                &gen_params,
                &schedule,
                t,
                std::slice::from_ref(&cache),
                &[0usize],
                &eps,
                &|x_t, label| teacher_at.residual(x_t, label),
                &fake,
            )?;
            for (m, g) in mc.iter_mut().zip(grad.as_slice()) {
                *m += g;
            }
        }
        for m in &mut mc {
            *m /= samples as f64;
        }

        // Closed form: F(θ) = mean_t KL(N(α·b, α²(w₁²+w₂²)+σ²) ‖ p_t) over
        // the sampler's support, differentiated by central differences.
        let f = |th: &[f64]| -> f64 {
            let qv = th[0] * th[0] + th[1] * th[1];
            let t_min = t_total.div_ceil(50);
            let mut acc = 0.0;
            for t in t_min..=t_total {
                let (a, s) = (schedule.alpha(t), schedule.sigma(t));
                let (a2, s2) = (a * a, s * s);
                let vq = a2 * qv + s2;
                let vp = a2 * p_var + s2;
                let dm = a * th[2] - a * p_mean;
                acc += 0.5 * (vq / vp + dm * dm / vp - 1.0 + (vp / vq).ln());
            }
            acc / (t_total - t_min + 1) as f64
        };
        let h = 1e-4;
        let mut fd = vec![0.0; 3];
        for i in 0..3 {
            let mut tp = theta;
            tp[i] += h;
            let mut tm = theta;
            tm[i] -= h;
            fd[i] = (f(&tp) - f(&tm)) / (2.0 * h);
        }

        let cosine = crate::util::cosine_similarity(&mc, &fd);
        let pass = cosine > 0.99;
        Ok(CosineReport { cosine, mc_grad: mc, fd_grad: fd, samples, pass })
    }

    /// Runs both harnesses.
    pub fn run(samples: usize, seed: u64) -> Result<EstimatorReport, DistillError> {
        let point = point_check(samples, seed)?;
        let cosine = cosine_check(samples, seed)?;
        let pass = point.pass && cosine.pass;
        Ok(EstimatorReport { point, cosine, pass })
    }
}
