//! Teacher pretraining, dataset construction, and experiment orchestration.
//!
//! Three phases share one module because they share the data plumbing:
//!
//! 1. **Corpora**: procedural texture patches written to disk with a JSON
//!    manifest recording labels and per-item degradation seeds; degraded
//!    inputs are always *recomputed* from the clean patch, the run's
//!    degradation settings, and the per-item seed, so a corpus can never
//!    drift out of sync with its inputs.
//! 2. **Teacher pretraining**: standard denoising regression on target
//!    samples, cached by a fingerprint of everything that influences it.
//! 3. **Experiments**: the distillation loop with CSV logging, periodic
//!    evaluation, and checkpointing — a pure function of (config, seed).

use crate::config::{ExperimentConfig, Task, TeacherMode};
use crate::degrade::{degrade, DegradationConfig, DegradeError};
use crate::distill::{
    Batch, DistillError, DistillOptions, DistillState, StepReport, StepRngs, Teacher,
};
use crate::metrics::{fit_gaussian_kl, mmd2, psnr, ssim, EvalReport, MetricsError};
use crate::nets::{
    backward, copy_matching_layers, forward, forward_cached, init_params, read_checkpoint,
    write_checkpoint, CkptError, NetError, NetSpec, ParamVector,
};
use crate::opt::AdamW;
use crate::oracle::GaussianMixture;
use crate::patch::{Patch, PatchError};
use crate::rng::{indexed_rng, stream_rng, ChaCha8Rng, Stream};
use crate::schedule::{NoiseSchedule, ScheduleError};
use crate::util::{cosine_similarity, dist_sq, sha256_hex16, sha256_u64};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("corpus invalid: {0}")]
    Corpus(String),
    #[error("i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("training diverged at step {step} (loss = {loss})")]
    Diverged { step: u64, loss: f64 },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Ckpt(#[from] CkptError),
    #[error(transparent)]
    Degrade(#[from] DegradeError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainerError + '_ {
    move |source| TrainerError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Corpora
// ---------------------------------------------------------------------------

pub const MANIFEST_FORMAT: &str = "patch-corpus-v1";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Hard cap on manifest entries; a corpus is a directory of tiny patches,
/// not a bulk dataset.
pub const MAX_CORPUS_ENTRIES: usize = 1 << 20;

/// One corpus item: a clean patch file, its texture class, and the seed
/// that deterministically degrades it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub label: usize,
    pub seed: u64,
}

/// On-disk description of a patch corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format: String,
    pub side: usize,
    pub num_classes: usize,
    /// The degradation the corpus was built for; runs must match it.
    pub degradation: DegradationConfig,
    pub entries: Vec<ManifestEntry>,
}

/// Parses and structurally validates manifest bytes. Total: any byte input
/// yields `Ok` or a descriptive error, never a panic. File names are
/// restricted to simple path components so a manifest cannot reference
/// files outside its own directory.
pub fn parse_manifest(bytes: &[u8]) -> Result<CorpusManifest, TrainerError> {
    let m: CorpusManifest = serde_json::from_slice(bytes)
        .map_err(|e| TrainerError::Corpus(format!("manifest JSON: {e}")))?;
    if m.format != MANIFEST_FORMAT {
        return Err(TrainerError::Corpus(format!(
            "unsupported format {:?} (expected {MANIFEST_FORMAT:?})",
            m.format
        )));
    }
    if m.side == 0 || m.side > 4096 {
        return Err(TrainerError::Corpus(format!("side {} out of range", m.side)));
    }
    if m.num_classes == 0 {
        return Err(TrainerError::Corpus("num_classes must be >= 1".into()));
    }
    if m.entries.len() > MAX_CORPUS_ENTRIES {
        return Err(TrainerError::Corpus(format!(
            "{} entries exceeds the {MAX_CORPUS_ENTRIES} cap",
            m.entries.len()
        )));
    }
    m.degradation
        .validate()
        .map_err(|e| TrainerError::Corpus(format!("degradation: {e}")))?;
    for (i, e) in m.entries.iter().enumerate() {
        let name_ok = !e.file.is_empty()
            && e.file.len() <= 255
            && !e.file.starts_with('.')
            && e.file.bytes().all(|b| {
                b.is_ascii_alphanumeric() || b == b'.' || b == b'_' || b == b'-'
            });
        if !name_ok {
            return Err(TrainerError::Corpus(format!(
                "entry {i}: file name {:?} is not a simple file name",
                e.file
            )));
        }
        if e.label >= m.num_classes {
            return Err(TrainerError::Corpus(format!(
                "entry {i}: label {} >= num_classes {}",
                e.label, m.num_classes
            )));
        }
    }
    Ok(m)
}

/// A corpus with all patches loaded (they are tiny).
#[derive(Debug, Clone)]
pub struct Corpus {
    pub side: usize,
    pub num_classes: usize,
    pub degradation: DegradationConfig,
    pub patches: Vec<Patch>,
    pub labels: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Fingerprint of the manifest bytes; part of the teacher cache key.
    pub fingerprint: String,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Loads a corpus directory: manifest plus every referenced patch file.
pub fn load_corpus(dir: &Path) -> Result<Corpus, TrainerError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest = parse_manifest(&bytes)?;
    if manifest.entries.is_empty() {
        return Err(TrainerError::Corpus(format!("{} lists no entries", dir.display())));
    }
    let mut patches = Vec::with_capacity(manifest.entries.len());
    let mut labels = Vec::with_capacity(manifest.entries.len());
    let mut seeds = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let p = Patch::read_pgm(&dir.join(&e.file))?;
        if p.height() != manifest.side || p.width() != manifest.side {
            return Err(TrainerError::Corpus(format!(
                "{}: {}×{} does not match side {}",
                e.file,
                p.height(),
                p.width(),
                manifest.side
            )));
        }
        patches.push(p);
        labels.push(e.label);
        seeds.push(e.seed);
    }
    Ok(Corpus {
        side: manifest.side,
        num_classes: manifest.num_classes,
        degradation: manifest.degradation,
        patches,
        labels,
        seeds,
        fingerprint: sha256_hex16(&bytes),
    })
}

/// Parameters for corpus generation.
#[derive(Debug, Clone)]
pub struct CorpusParams {
    pub count: usize,
    pub side: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub degradation: DegradationConfig,
}

/// One procedural texture patch. Class 0: low-frequency plane waves;
/// class 1: a soft radial blob on a dark background. Both families are
/// smooth enough that the degradation chain is meaningfully invertible.
pub fn synth_patch(class: usize, side: usize, rng: &mut ChaCha8Rng) -> Patch {
    assert!(side >= 4, "patches below 4×4 have no texture to speak of");
    let s = side as f64;
    match class {
        0 => {
            let fr = rng.random_range(1..=3) as f64;
            let fc = rng.random_range(1..=3) as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            Patch::from_fn(side, side, |r, c| {
                let arg =
                    std::f64::consts::TAU * (fr * r as f64 + fc * c as f64) / s + phase;
                0.5 + 0.4 * arg.sin()
            })
        }
        1 => {
            let cr = rng.random_range(0.25 * s..0.75 * s);
            let cc = rng.random_range(0.25 * s..0.75 * s);
            let width = rng.random_range(s / 6.0..s / 3.0);
            let amp = rng.random_range(0.5..0.8);
            let bg = rng.random_range(0.1..0.2);
            Patch::from_fn(side, side, |r, c| {
                let dr = r as f64 - cr;
                let dc = c as f64 - cc;
                bg + amp * (-(dr * dr + dc * dc) / (2.0 * width * width)).exp()
            })
        }
        _ => panic!("texture class {class} not defined (0..=1)"),
    }
}

/// Generates a corpus directory: `count` patches with uniformly drawn
/// classes and per-item degradation seeds, plus the manifest.
pub fn make_corpus(dir: &Path, params: &CorpusParams) -> Result<CorpusManifest, TrainerError> {
    if params.count == 0 || params.count > MAX_CORPUS_ENTRIES {
        return Err(TrainerError::Corpus(format!("count {} out of range", params.count)));
    }
    if params.num_classes == 0 || params.num_classes > 2 {
        return Err(TrainerError::Corpus(
            "num_classes must be 1 or 2 (two texture families exist)".into(),
        ));
    }
    params
        .degradation
        .validate()
        .map_err(|e| TrainerError::Corpus(format!("degradation: {e}")))?;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut rng = stream_rng(params.seed, Stream::Data);
    let mut entries = Vec::with_capacity(params.count);
    for i in 0..params.count {
        let label = rng.random_range(0..params.num_classes);
        let patch = synth_patch(label, params.side, &mut rng);
        let seed: u64 = rng.random();
        let file = format!("patch-{i:06}.pgm");
        patch.write_pgm(&dir.join(&file))?;
        entries.push(ManifestEntry { file, label, seed });
    }
    let manifest = CorpusManifest {
        format: MANIFEST_FORMAT.to_string(),
        side: params.side,
        num_classes: params.num_classes,
        degradation: params.degradation.clone(),
        entries,
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;
    Ok(manifest)
}

/// The degraded counterpart of one corpus item, recomputed from the clean
/// patch, the corpus degradation settings, and the item's own seed.
pub fn degraded_item(corpus: &Corpus, index: usize) -> Result<Patch, TrainerError> {
    let cfg = DegradationConfig { rng_seed: corpus.seeds[index], ..corpus.degradation.clone() };
    Ok(degrade(&corpus.patches[index], &cfg)?)
}

// ---------------------------------------------------------------------------
// Resolution: config → concrete dimensions, specs, and targets
// ---------------------------------------------------------------------------

/// Everything derived from the config before training can start.
#[derive(Debug, Clone)]
pub struct Resolved {
    /// Flattened clean-sample dimension.
    pub dim: usize,
    /// Flattened degraded-input dimension.
    pub lq_dim: usize,
    /// Width of the fresh noise concatenated to the input.
    pub noise_dim: usize,
    pub num_labels: usize,
    pub gen_spec: NetSpec,
    pub den_spec: NetSpec,
    pub schedule: NoiseSchedule,
    pub mixture: Option<GaussianMixture>,
    pub corpus_train: Option<Corpus>,
    pub corpus_eval: Option<Corpus>,
    /// Patch side lengths (clean, degraded) for the patch task.
    pub sides: Option<(usize, usize)>,
}

pub fn resolve(cfg: &ExperimentConfig) -> Result<Resolved, TrainerError> {
    cfg.validate().map_err(|e| TrainerError::Config(e.to_string()))?;
    let schedule = NoiseSchedule::build_vp(
        cfg.schedule.num_steps,
        cfg.schedule.beta_min,
        cfg.schedule.beta_max,
        cfg.schedule.weight,
    )?;

    let (dim, lq_dim, num_labels, mixture, corpus_train, corpus_eval, sides) = match cfg.task {
        Task::Oracle1d | Task::Oracle2d => {
            let mix = cfg.target.mixture.as_ref().expect("validated");
            let gm = mix.build().map_err(|e| TrainerError::Config(e.to_string()))?;
            let dim = gm.dim();
            let labels = gm.num_components();
            (dim, dim, labels, Some(gm), None, None, None)
        }
        Task::PatchRestore => {
            let corpus_cfg = cfg.target.corpus.as_ref().expect("validated");
            let deg = cfg.degradation.as_ref().expect("validated");
            let train = load_corpus(&corpus_cfg.train)?;
            let eval = load_corpus(&corpus_cfg.eval)?;
            for (name, c) in [("train", &train), ("eval", &eval)] {
                if &c.degradation != deg {
                    return Err(TrainerError::Config(format!(
                        "{name} corpus was built for a different degradation \
                         than [degradation] configures"
                    )));
                }
            }
            if train.side != eval.side || train.num_classes != eval.num_classes {
                return Err(TrainerError::Config(
                    "train and eval corpora disagree on side or classes".into(),
                ));
            }
            let side = train.side;
            let factor = deg.downsample_factor;
            if side % factor != 0 {
                return Err(TrainerError::Config(format!(
                    "side {side} not divisible by downsample factor {factor}"
                )));
            }
            let lq_side = side / factor;
            let labels = train.num_classes;
            // The generator is fed the degraded patch upsampled back to the
            // clean geometry (pixel-aligned conditioning), so its lq width
            // is the full patch size.
            (
                side * side,
                side * side,
                labels,
                None,
                Some(train),
                Some(eval),
                Some((side, lq_side)),
            )
        }
    };

    let noise_dim = cfg.generator.noise_dim.unwrap_or(lq_dim);
    if noise_dim == 0 {
        return Err(TrainerError::Config("noise_dim must be >= 1".into()));
    }
    let gen_spec = NetSpec {
        input_dim: lq_dim + noise_dim,
        hidden_dims: cfg.generator.hidden_dims.clone(),
        output_dim: dim,
        activation: cfg.generator.activation,
        time_embed_dim: 0,
        cond_embed_dim: cfg.generator.cond_embed_dim,
        num_labels,
        residual: cfg.generator.residual,
    };
    gen_spec.validate()?;
    let den_spec = NetSpec {
        input_dim: dim,
        hidden_dims: cfg.denoiser.hidden_dims.clone(),
        output_dim: dim,
        activation: cfg.denoiser.activation,
        time_embed_dim: cfg.denoiser.time_embed_dim,
        cond_embed_dim: cfg.denoiser.cond_embed_dim,
        num_labels,
        residual: false,
    };
    den_spec.validate()?;

    Ok(Resolved {
        dim,
        lq_dim,
        noise_dim,
        num_labels,
        gen_spec,
        den_spec,
        schedule,
        mixture,
        corpus_train,
        corpus_eval,
        sides,
    })
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

/// Deterministic, seeded stream of training batches.
pub struct BatchStream<'a> {
    cfg: &'a ExperimentConfig,
    resolved: &'a Resolved,
    rng: ChaCha8Rng,
}

impl<'a> BatchStream<'a> {
    pub fn new(cfg: &'a ExperimentConfig, resolved: &'a Resolved, rng: ChaCha8Rng) -> Self {
        Self { cfg, resolved, rng }
    }

    /// The next batch. Oracle tasks: hq from the mixture, lq = hq plus
    /// heavy Gaussian corruption. Patch task: uniformly drawn corpus items
    /// with lq recomputed through the degradation chain, then upsampled back
    /// to the clean geometry so the generator sees aligned pixels. `z` is
    /// fresh per batch; under the no-condition ablation every label
    /// collapses to 0.
    pub fn next_batch(&mut self, b: usize) -> Result<Batch, TrainerError> {
        let r = self.resolved;
        let (hq, lq, mut labels) = match (&r.mixture, &r.corpus_train) {
            (Some(gm), None) => {
                let (hq, labels) = gm.sample_labeled(b, &mut self.rng);
                let sigma = self.cfg.distill.corruption_sigma;
                let lq: Vec<Vec<f64>> = hq
                    .iter()
                    .map(|x| {
                        x.iter()
                            .map(|v| v + sigma * self.rng.sample::<f64, _>(StandardNormal))
                            .collect()
                    })
                    .collect();
                (hq, lq, labels)
            }
            (None, Some(corpus)) => {
                let factor = corpus.degradation.downsample_factor;
                let mut hq = Vec::with_capacity(b);
                let mut lq = Vec::with_capacity(b);
                let mut labels = Vec::with_capacity(b);
                for _ in 0..b {
                    let idx = self.rng.random_range(0..corpus.len());
                    hq.push(corpus.patches[idx].to_vec());
                    lq.push(degraded_item(corpus, idx)?.upsample_nearest(factor).to_vec());
                    labels.push(corpus.labels[idx]);
                }
                (hq, lq, labels)
            }
            _ => unreachable!("resolve() produces exactly one target"),
        };
        let z: Vec<Vec<f64>> = (0..b)
            .map(|_| {
                (0..r.noise_dim)
                    .map(|_| self.rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        if self.cfg.ablations.no_condition {
            labels.iter_mut().for_each(|l| *l = 0);
        }
        Ok(Batch { hq, lq, z, labels })
    }
}

// ---------------------------------------------------------------------------
// Teacher pretraining
// ---------------------------------------------------------------------------

/// What pretraining measured (or that a cache hit skipped it).
#[derive(Debug, Clone, Serialize)]
pub struct TeacherReport {
    pub from_cache: bool,
    pub steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    /// Cosine between predicted and analytically optimal noise on held-out
    /// diffused points; only available when the target has a closed form.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_cosine: Option<f64>,
}

/// Everything that influences the pretrained teacher, hashed into its
/// cache key.
#[derive(Serialize)]
struct TeacherKey<'a> {
    schedule: &'a crate::config::ScheduleConfig,
    denoiser: &'a crate::config::DenoiserConfig,
    pretrain: &'a crate::config::PretrainConfig,
    seed: u64,
    no_condition: bool,
    mixture: Option<&'a crate::config::MixtureConfig>,
    corpus_fingerprint: Option<&'a str>,
    corruption_irrelevant: (),
}

pub fn teacher_cache_key(cfg: &ExperimentConfig, resolved: &Resolved) -> String {
    let key = TeacherKey {
        schedule: &cfg.schedule,
        denoiser: &cfg.denoiser,
        pretrain: &cfg.pretrain,
        seed: cfg.seed,
        no_condition: cfg.ablations.no_condition,
        mixture: cfg.target.mixture.as_ref(),
        corpus_fingerprint: resolved.corpus_train.as_ref().map(|c| c.fingerprint.as_str()),
        corruption_irrelevant: (),
    };
    sha256_hex16(serde_json::to_string(&key).expect("key serializes").as_bytes())
}

/// Derives the pretraining phase's own master seed so its stream
/// consumption can never interleave with the distillation phase's.
fn teacher_master_seed(seed: u64) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(b"teacher-pretrain");
    sha256_u64(&bytes)
}

/// Trains the noise predictor on clean target samples by denoising
/// regression: t ~ U[1, T], x_t = α_t·x + σ_t·ε, minimise per-element
/// ‖ε̂ − ε‖². Aborts with a diagnostic if the loss goes non-finite.
pub fn pretrain_teacher(
    cfg: &ExperimentConfig,
    resolved: &Resolved,
) -> Result<(ParamVector, TeacherReport), TrainerError> {
    let seed = teacher_master_seed(cfg.seed);
    let spec = &resolved.den_spec;
    let sched = &resolved.schedule;
    let t_total = sched.num_steps();
    let mut params = init_params(spec, &mut indexed_rng(seed, Stream::Init, 0));
    let mut opt = AdamW::new(cfg.pretrain.opt, params.len());
    let mut data = BatchStream::new(cfg, resolved, stream_rng(seed, Stream::Data));
    let mut noise_rng = stream_rng(seed, Stream::FakeDiffusion);

    let b = cfg.pretrain.batch_size;
    let d = resolved.dim;
    let scale = 1.0 / (b * d) as f64;
    let mut initial_loss = None;
    let mut final_loss = None;
    for step in 1..=cfg.pretrain.steps {
        let batch = data.next_batch(b)?;
        let draws: Vec<(usize, Vec<f64>)> = (0..b)
            .map(|_| {
                let t = noise_rng.random_range(1..=t_total);
                let eps: Vec<f64> =
                    (0..d).map(|_| noise_rng.sample::<f64, _>(StandardNormal)).collect();
                (t, eps)
            })
            .collect();
        let per_item: Result<Vec<(f64, ParamVector)>, NetError> = batch
            .hq
            .par_iter()
            .zip(batch.labels.par_iter())
            .zip(draws.par_iter())
            .map(|((x, &label), (t, eps))| {
                let (a, s) = (sched.alpha(*t), sched.sigma(*t));
                let x_t: Vec<f64> =
                    x.iter().zip(eps).map(|(xi, ei)| a * xi + s * ei).collect();
                let cache = forward_cached(spec, &params, &x_t, *t, label)?;
                let pred = cache.output();
                let loss = dist_sq(pred, eps);
                let out_grad: Vec<f64> =
                    pred.iter().zip(eps).map(|(p, e)| 2.0 * (p - e) * scale).collect();
                let mut grad = ParamVector::zeros(spec.param_count());
                backward(spec, &params, &cache, &out_grad, &mut grad)?;
                Ok((loss * scale, grad))
            })
            .collect();
        let mut loss = 0.0;
        let mut grad = ParamVector::zeros(spec.param_count());
        for (l, g) in per_item? {
            loss += l;
            grad.add_scaled(&g, 1.0);
        }
        if !loss.is_finite() {
            return Err(TrainerError::Diverged { step, loss });
        }
        opt.step(&mut params, &grad);
        if step == 1 {
            initial_loss = Some(loss);
        }
        final_loss = Some(loss);
    }

    // Score validation against the analytic oracle, when one exists: on
    // held-out diffused points the ideal prediction is −σ_t · score_t(x_t).
    let score_cosine = resolved.mixture.as_ref().map(|gm| {
        let mut probe = stream_rng(seed, Stream::Probe);
        let mut pred_all = Vec::new();
        let mut opt_all = Vec::new();
        for _ in 0..256 {
            let x0 = gm.sample_one(&mut probe);
            let t = probe.random_range(1..=t_total);
            let (a, s) = (sched.alpha(t), sched.sigma(t));
            let x_t: Vec<f64> = x0
                .iter()
                .map(|v| a * v + s * probe.sample::<f64, _>(StandardNormal))
                .collect();
            let diffused = gm.diffuse(sched, t);
            let score = diffused.score(&x_t).expect("probe point is finite");
            let pred = forward(spec, &params, &x_t, t, 0).expect("probe dims match");
            pred_all.extend(pred);
            opt_all.extend(score.into_iter().map(|sc| -s * sc));
        }
        cosine_similarity(&pred_all, &opt_all)
    });

    let report = TeacherReport {
        from_cache: false,
        steps: cfg.pretrain.steps,
        initial_loss,
        final_loss,
        score_cosine,
    };
    Ok((params, report))
}

/// Returns the cached teacher if its checkpoint exists, pretraining and
/// caching it otherwise.
pub fn ensure_teacher(
    cfg: &ExperimentConfig,
    resolved: &Resolved,
    out_dir: &Path,
) -> Result<(ParamVector, TeacherReport, PathBuf), TrainerError> {
    let path = out_dir.join(format!("teacher-{}.ckpt", teacher_cache_key(cfg, resolved)));
    if path.exists() {
        let params = read_checkpoint(&path, &resolved.den_spec)?;
        let report = TeacherReport {
            from_cache: true,
            steps: 0,
            initial_loss: None,
            final_loss: None,
            score_cosine: None,
        };
        return Ok((params, report, path));
    }
    let (params, report) = pretrain_teacher(cfg, resolved)?;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_checkpoint(&path, &resolved.den_spec, &params)?;
    Ok((params, report, path))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Evaluates a generator. Oracle tasks: kernel two-sample distance against
/// fresh target draws plus per-mode moment-fit KL. Patch task: mean PSNR /
/// SSIM over the whole eval corpus, with the nearest-neighbour upsample of
/// the degraded input as the do-nothing baseline. The held-out set is
/// rebuilt from the Eval stream each call, so every evaluation of a run
/// sees identical inputs.
pub fn evaluate_generator(
    cfg: &ExperimentConfig,
    resolved: &Resolved,
    gen_params: &ParamVector,
    step: u64,
    null_condition: bool,
) -> Result<EvalReport, TrainerError> {
    let spec = &resolved.gen_spec;
    let mut rng = stream_rng(cfg.seed, Stream::Eval);
    let null = null_condition || cfg.ablations.no_condition;

    match (&resolved.mixture, &resolved.corpus_eval) {
        (Some(gm), None) => {
            let n = cfg.eval.samples;
            let (hq, true_labels) = gm.sample_labeled(n, &mut rng);
            let sigma = cfg.distill.corruption_sigma;
            let inputs: Vec<(Vec<f64>, usize)> = hq
                .iter()
                .zip(&true_labels)
                .map(|(x, &label)| {
                    let mut input: Vec<f64> = x
                        .iter()
                        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    input.extend(
                        (0..resolved.noise_dim)
                            .map(|_| rng.sample::<f64, _>(StandardNormal)),
                    );
                    (input, if null { 0 } else { label })
                })
                .collect();
            // Independent target draws for the two-sample distance; reusing
            // the paired hq would correlate the two sides of the estimator.
            let target = gm.sample(n, &mut rng);
            let outputs: Result<Vec<Vec<f64>>, NetError> = inputs
                .par_iter()
                .map(|(input, label)| forward(spec, gen_params, input, 0, *label))
                .collect();
            let outputs = outputs?;
            let mmd = mmd2(&outputs, &target, cfg.eval.mmd_bandwidth)?;

            let mut per_mode = Vec::with_capacity(resolved.num_labels);
            for k in 0..resolved.num_labels {
                let group: Vec<Vec<f64>> = outputs
                    .iter()
                    .zip(&true_labels)
                    .filter(|(_, &l)| l == k)
                    .map(|(o, _)| o.clone())
                    .collect();
                let component = gm.component_as_single(k).expect("label in range");
                per_mode.push(fit_gaussian_kl(&group, &component)?);
            }
            let worst = per_mode.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(EvalReport {
                step,
                n_samples: n,
                psnr: None,
                ssim: None,
                baseline_psnr: None,
                mmd2: Some(mmd),
                fit_kl_per_mode: Some(per_mode),
                fit_kl: Some(worst),
            })
        }
        (None, Some(corpus)) => {
            let (side, lq_side) = resolved.sides.expect("patch task");
            let factor = side / lq_side;
            let mut psnr_sum = 0.0;
            let mut ssim_sum = 0.0;
            let mut base_sum = 0.0;
            for idx in 0..corpus.len() {
                let hq = &corpus.patches[idx];
                let upsampled = degraded_item(corpus, idx)?.upsample_nearest(factor);
                let mut input = upsampled.to_vec();
                input.extend(
                    (0..resolved.noise_dim).map(|_| rng.sample::<f64, _>(StandardNormal)),
                );
                let label = if null { 0 } else { corpus.labels[idx] };
                let out = forward(spec, gen_params, &input, 0, label)?;
                let restored =
                    Patch::from_fn(side, side, |r, c| out[r * side + c].clamp(0.0, 1.0));
                psnr_sum += psnr(&restored, hq)?;
                ssim_sum += ssim(&restored, hq)?;
                base_sum += psnr(&upsampled, hq)?;
            }
            let n = corpus.len();
            Ok(EvalReport {
                step,
                n_samples: n,
                psnr: Some(psnr_sum / n as f64),
                ssim: Some(ssim_sum / n as f64),
                baseline_psnr: Some(base_sum / n as f64),
                mmd2: None,
                fit_kl_per_mode: None,
                fit_kl: None,
            })
        }
        _ => unreachable!("resolve() produces exactly one target"),
    }
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

/// Where a finished run left its artifacts, plus its headline numbers.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub steps: u64,
    pub final_eval: EvalReport,
    pub train_log: PathBuf,
    pub timing_log: PathBuf,
    pub metrics_path: PathBuf,
    pub generator_ckpt: PathBuf,
    pub fake_ckpt: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_ckpt: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher: Option<TeacherReport>,
}

fn write_csv_row(w: &mut impl Write, path: &Path, rep: &StepReport) -> Result<(), TrainerError> {
    writeln!(
        w,
        "{},{},{},{},{},{}",
        rep.step, rep.reg_loss, rep.dsm_norm, rep.tmax, rep.alpha, rep.fake_loss
    )
    .map_err(io_err(path))
}

fn write_metrics(path: &Path, reports: &[EvalReport]) -> Result<(), TrainerError> {
    let json = serde_json::to_string_pretty(reports).expect("reports serialize");
    std::fs::write(path, json + "\n").map_err(io_err(path))
}

/// Runs a full experiment: optional teacher pretraining, the distillation
/// loop with CSV logging, periodic evaluation, and final checkpoints.
/// Output bytes (train log, metrics, checkpoints) are a pure function of
/// the configuration; wall-clock timings go to a separate file so the
/// deterministic artifacts stay byte-identical across repeats.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary, TrainerError> {
    let resolved = resolve(cfg)?;
    let out_dir = &cfg.out_dir;
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let config_copy = out_dir.join("config.toml");
    std::fs::write(&config_copy, cfg.canonical()).map_err(io_err(&config_copy))?;

    // Teacher + initial parameters. In network mode all three nets descend
    // from the pretrained teacher: the fake net starts as an exact copy and
    // the generator copies every layer whose shape matches.
    let seed = cfg.seed;
    let mut gen_params = init_params(&resolved.gen_spec, &mut indexed_rng(seed, Stream::Init, 0));
    let mut fake_params = init_params(&resolved.den_spec, &mut indexed_rng(seed, Stream::Init, 1));
    let (teacher, teacher_ckpt, teacher_report) = match cfg.distill.teacher {
        TeacherMode::Oracle => {
            let gm = resolved.mixture.clone().expect("validated: oracle teacher");
            (Teacher::Oracle(gm), None, None)
        }
        TeacherMode::Network => {
            let (params, report, path) = ensure_teacher(cfg, &resolved, out_dir)?;
            fake_params = params.clone();
            copy_matching_layers(&resolved.gen_spec, &mut gen_params, &resolved.den_spec, &params);
            (
                Teacher::Network { spec: resolved.den_spec.clone(), params },
                Some(path),
                Some(report),
            )
        }
    };

    let options = DistillOptions {
        kappa: cfg.distill.kappa,
        lambda: if cfg.ablations.no_score { 0.0 } else { cfg.distill.lambda },
        dynamic_control: !cfg.ablations.no_dynamic,
        fixed_alpha: 0.5,
        // Dropping the condition also drops it from the oracle teacher
        // (a network teacher simply sees the null label everywhere).
        condition_teacher: !cfg.ablations.no_condition,
        gen_opt: cfg.distill.gen_opt,
        fake_opt: cfg.distill.fake_opt,
    };
    let mut state = DistillState::new(
        resolved.gen_spec.clone(),
        gen_params,
        resolved.den_spec.clone(),
        fake_params,
        teacher,
        resolved.schedule.clone(),
        options,
    )?;

    let mut data = BatchStream::new(cfg, &resolved, stream_rng(seed, Stream::Data));
    let mut diffusion = stream_rng(seed, Stream::DiffusionNoise);
    let mut timestep = stream_rng(seed, Stream::Timestep);
    let mut fake = stream_rng(seed, Stream::FakeDiffusion);

    let train_log = out_dir.join("train_log.csv");
    let timing_log = out_dir.join("timing.csv");
    let metrics_path = out_dir.join("metrics.json");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&train_log).map_err(io_err(&train_log))?,
    );
    writeln!(log, "step,reg_loss,dsm_norm,tmax,alpha,fake_loss").map_err(io_err(&train_log))?;
    let mut timing = std::io::BufWriter::new(
        std::fs::File::create(&timing_log).map_err(io_err(&timing_log))?,
    );
    writeln!(timing, "step,wall_ms").map_err(io_err(&timing_log))?;

    let mut evals =
        vec![evaluate_generator(cfg, &resolved, &state.gen_params, 0, false)?];
    write_metrics(&metrics_path, &evals)?;

    for step in 1..=cfg.steps {
        let started = std::time::Instant::now();
        let batch = data.next_batch(cfg.batch_size)?;
        let mut rngs = StepRngs {
            diffusion: &mut diffusion,
            timestep: &mut timestep,
            fake: &mut fake,
        };
        let report = state.train_step(&batch, &mut rngs)?;
        write_csv_row(&mut log, &train_log, &report)?;
        writeln!(timing, "{},{}", step, started.elapsed().as_secs_f64() * 1e3)
            .map_err(io_err(&timing_log))?;
        if !report.reg_loss.is_finite() || !report.fake_loss.is_finite() {
            log.flush().map_err(io_err(&train_log))?;
            return Err(TrainerError::Diverged { step, loss: report.reg_loss });
        }
        if step % cfg.eval.every == 0 || step == cfg.steps {
            log.flush().map_err(io_err(&train_log))?;
            timing.flush().map_err(io_err(&timing_log))?;
            evals.push(evaluate_generator(cfg, &resolved, &state.gen_params, step, false)?);
            write_metrics(&metrics_path, &evals)?;
            log::info!(
                "step {step}: reg {:.5} dsm {:.5} tmax {} alpha {:.3}",
                report.reg_loss,
                report.dsm_norm,
                report.tmax,
                report.alpha
            );
        }
    }
    log.flush().map_err(io_err(&train_log))?;
    timing.flush().map_err(io_err(&timing_log))?;

    let generator_ckpt = out_dir.join("generator.ckpt");
    let fake_ckpt = out_dir.join("fake.ckpt");
    write_checkpoint(&generator_ckpt, &resolved.gen_spec, &state.gen_params)?;
    write_checkpoint(&fake_ckpt, &resolved.den_spec, &state.fake_params)?;

    Ok(RunSummary {
        config_hash: cfg.hash16(),
        seed,
        steps: cfg.steps,
        final_eval: evals.last().expect("at least the initial eval").clone(),
        train_log,
        timing_log,
        metrics_path,
        generator_ckpt,
        fake_ckpt,
        teacher_ckpt,
        teacher: teacher_report,
    })
}

/// Evaluates a stored generator checkpoint against the config's held-out
/// data (the `eval` subcommand).
pub fn eval_checkpoint(
    cfg: &ExperimentConfig,
    ckpt: &Path,
    null_condition: bool,
) -> Result<EvalReport, TrainerError> {
    let resolved = resolve(cfg)?;
    let params = read_checkpoint(ckpt, &resolved.gen_spec)?;
    evaluate_generator(cfg, &resolved, &params, 0, null_condition)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{
        CorpusConfig, DistillConfig, EvalConfig, MixtureConfig, PretrainConfig, TargetConfig,
    };
    use crate::oracle::CovSpec;

    fn oracle1d_config(out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            task: Task::Oracle1d,
            steps: 40,
            batch_size: 8,
            seed: 11,
            out_dir: out.to_path_buf(),
            schedule: Default::default(),
            target: TargetConfig {
                mixture: Some(MixtureConfig {
                    weights: vec![1.0],
                    means: vec![vec![0.5]],
                    covs: vec![CovSpec::Diagonal(vec![0.25])],
                }),
                corpus: None,
            },
            distill: DistillConfig::default(),
            generator: crate::config::GeneratorConfig {
                hidden_dims: vec![16],
                ..Default::default()
            },
            denoiser: crate::config::DenoiserConfig {
                hidden_dims: vec![16],
                ..Default::default()
            },
            pretrain: PretrainConfig { steps: 30, batch_size: 16, ..Default::default() },
            eval: EvalConfig { every: 20, samples: 200, mmd_bandwidth: 1.0 },
            ablations: Default::default(),
            degradation: None,
        }
    }

    fn two_mode_config(out: &Path) -> ExperimentConfig {
        let mut cfg = oracle1d_config(out);
        cfg.task = Task::Oracle2d;
        cfg.target.mixture = Some(MixtureConfig {
            weights: vec![0.5, 0.5],
            means: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            covs: vec![
                CovSpec::Diagonal(vec![0.25, 0.25]),
                CovSpec::Diagonal(vec![0.25, 0.25]),
            ],
        });
        cfg
    }

    fn small_degradation() -> DegradationConfig {
        DegradationConfig {
            blur_sigma: 0.6,
            kernel_radius: 2,
            downsample_factor: 2,
            noise_sigma: 0.03,
            jpeg_quality: 60,
            rng_seed: 0,
            second_round: false,
        }
    }

    #[test]
    fn manifest_parsing_is_strict() {
        let good = serde_json::json!({
            "format": MANIFEST_FORMAT,
            "side": 16,
            "num_classes": 2,
            "degradation": small_degradation(),
            "entries": [{"file": "p-0.pgm", "label": 1, "seed": 5}],
        });
        parse_manifest(good.to_string().as_bytes()).unwrap();

        for (mutation, needle) in [
            (serde_json::json!({"format": "other"}), "format"),
            (serde_json::json!({"side": 0}), "side"),
            (serde_json::json!({"num_classes": 0}), "num_classes"),
            (
                serde_json::json!({"entries": [{"file": "../p.pgm", "label": 0, "seed": 1}]}),
                "file name",
            ),
            (
                serde_json::json!({"entries": [{"file": "a/b.pgm", "label": 0, "seed": 1}]}),
                "file name",
            ),
            (
                serde_json::json!({"entries": [{"file": ".hidden", "label": 0, "seed": 1}]}),
                "file name",
            ),
            (
                serde_json::json!({"entries": [{"file": "p.pgm", "label": 2, "seed": 1}]}),
                "label",
            ),
        ] {
            let mut bad = good.clone();
            for (k, v) in mutation.as_object().unwrap() {
                bad[k] = v.clone();
            }
            let err = parse_manifest(bad.to_string().as_bytes()).unwrap_err();
            assert!(err.to_string().contains(needle), "{err} should mention {needle}");
        }

        assert!(parse_manifest(b"not json").is_err());
        assert!(parse_manifest(b"").is_err());
    }

    #[test]
    fn corpus_round_trips_and_batches_match_the_degradation_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let params = CorpusParams {
            count: 12,
            side: 16,
            num_classes: 2,
            seed: 3,
            degradation: small_degradation(),
        };
        let manifest = make_corpus(dir.path(), &params).unwrap();
        assert_eq!(manifest.entries.len(), 12);

        let corpus = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus.len(), 12);
        assert_eq!(corpus.side, 16);

        // Every batch lq must equal the degradation chain applied to the
        // item's clean patch under the item's recorded seed — bit-exactly.
        for idx in 0..corpus.len() {
            let lq = degraded_item(&corpus, idx).unwrap();
            let expect = degrade(
                &corpus.patches[idx],
                &DegradationConfig {
                    rng_seed: corpus.seeds[idx],
                    ..small_degradation()
                },
            )
            .unwrap();
            assert_eq!(lq.to_vec(), expect.to_vec());
        }
    }

    #[test]
    fn corpus_generation_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let params = CorpusParams {
            count: 6,
            side: 12,
            num_classes: 2,
            seed: 9,
            degradation: small_degradation(),
        };
        make_corpus(a.path(), &params).unwrap();
        make_corpus(b.path(), &params).unwrap();
        let ma = std::fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        let mb = std::fs::read(b.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma, mb);
        for i in 0..6 {
            let name = format!("patch-{i:06}.pgm");
            let pa = std::fs::read(a.path().join(&name)).unwrap();
            let pb = std::fs::read(b.path().join(&name)).unwrap();
            assert_eq!(pa, pb, "{name} differs");
        }
    }

    #[test]
    fn oracle_labels_are_uniform_over_components() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = two_mode_config(tmp.path());
        let resolved = resolve(&cfg).unwrap();
        let mut stream = BatchStream::new(&cfg, &resolved, stream_rng(5, Stream::Data));
        let mut counts = [0usize; 2];
        let n = 10_000;
        for _ in 0..n / 100 {
            let batch = stream.next_batch(100).unwrap();
            for &l in &batch.labels {
                counts[l] += 1;
            }
        }
        // χ² against the uniform expectation; P(χ²₁ > 6.635) = 0.01.
        let expected = n as f64 / 2.0;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 6.634_896_601_021_214_5, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn batches_are_reproducible_and_respect_ablation() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = two_mode_config(tmp.path());
        let resolved = resolve(&cfg).unwrap();
        let b1 = BatchStream::new(&cfg, &resolved, stream_rng(7, Stream::Data))
            .next_batch(16)
            .unwrap();
        let b2 = BatchStream::new(&cfg, &resolved, stream_rng(7, Stream::Data))
            .next_batch(16)
            .unwrap();
        assert_eq!(b1.hq, b2.hq);
        assert_eq!(b1.lq, b2.lq);
        assert_eq!(b1.z, b2.z);
        assert_eq!(b1.labels, b2.labels);
        assert!(b1.labels.iter().any(|&l| l == 1), "two modes should both appear");

        cfg.ablations.no_condition = true;
        let resolved = resolve(&cfg).unwrap();
        let b3 = BatchStream::new(&cfg, &resolved, stream_rng(7, Stream::Data))
            .next_batch(16)
            .unwrap();
        assert!(b3.labels.iter().all(|&l| l == 0));
        assert_eq!(b1.hq, b3.hq, "nulling labels must not reshuffle the data");
    }

    #[test]
    fn pretraining_learns_the_standard_normal_denoiser() {
        // For an N(0, I) target the optimal prediction is ε̂ = σ_t·x_t, so
        // the score-validation cosine must become large.
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = oracle1d_config(tmp.path());
        cfg.target.mixture = Some(MixtureConfig {
            weights: vec![1.0],
            means: vec![vec![0.0]],
            covs: vec![CovSpec::Diagonal(vec![1.0])],
        });
        cfg.pretrain = PretrainConfig {
            steps: 1200,
            batch_size: 64,
            opt: crate::opt::AdamWConfig { lr: 3e-3, weight_decay: 0.0, ..Default::default() },
        };
        cfg.denoiser.hidden_dims = vec![32];
        let resolved = resolve(&cfg).unwrap();
        let (_, report) = pretrain_teacher(&cfg, &resolved).unwrap();
        assert!(report.final_loss.unwrap() < report.initial_loss.unwrap());
        let cosine = report.score_cosine.unwrap();
        assert!(cosine > 0.95, "score cosine only reached {cosine}");
    }

    #[test]
    fn pretraining_is_deterministic_and_caches() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = oracle1d_config(tmp.path());
        let resolved = resolve(&cfg).unwrap();
        let (p1, r1) = pretrain_teacher(&cfg, &resolved).unwrap();
        let (p2, _) = pretrain_teacher(&cfg, &resolved).unwrap();
        assert!(p1.bits_eq(&p2));
        assert!(!r1.from_cache);

        let (c1, cr1, path) = ensure_teacher(&cfg, &resolved, tmp.path()).unwrap();
        assert!(!cr1.from_cache);
        assert!(path.exists());
        let (c2, cr2, _) = ensure_teacher(&cfg, &resolved, tmp.path()).unwrap();
        assert!(cr2.from_cache);
        assert!(c1.bits_eq(&c2));
    }

    #[test]
    fn diverged_pretraining_reports_the_step() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = oracle1d_config(tmp.path());
        // An absurd learning rate reliably blows the loss up to non-finite.
        cfg.pretrain.opt.lr = 1e18;
        cfg.pretrain.steps = 200;
        let resolved = resolve(&cfg).unwrap();
        match pretrain_teacher(&cfg, &resolved) {
            Err(TrainerError::Diverged { step, .. }) => assert!(step > 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn zero_step_run_writes_only_the_initial_evaluation() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = two_mode_config(tmp.path());
        cfg.steps = 0;
        let summary = run_experiment(&cfg).unwrap();
        assert_eq!(summary.final_eval.step, 0);
        let metrics: Vec<EvalReport> =
            serde_json::from_str(&std::fs::read_to_string(&summary.metrics_path).unwrap())
                .unwrap();
        assert_eq!(metrics.len(), 1);
        let log = std::fs::read_to_string(&summary.train_log).unwrap();
        assert_eq!(log.lines().count(), 1, "header only");
    }

    #[test]
    fn experiments_are_byte_reproducible() {
        let t1 = tempfile::tempdir().unwrap();
        let t2 = tempfile::tempdir().unwrap();
        let s1 = run_experiment(&two_mode_config(t1.path())).unwrap();
        let s2 = run_experiment(&two_mode_config(t2.path())).unwrap();
        for (a, b) in [
            (&s1.train_log, &s2.train_log),
            (&s1.metrics_path, &s2.metrics_path),
            (&s1.generator_ckpt, &s2.generator_ckpt),
            (&s1.fake_ckpt, &s2.fake_ckpt),
        ] {
            let ba = std::fs::read(a).unwrap();
            let bb = std::fs::read(b).unwrap();
            assert_eq!(ba, bb, "{} and {} differ", a.display(), b.display());
        }
    }

    #[test]
    fn patch_task_resolves_and_streams_consistent_batches() {
        let root = tempfile::tempdir().unwrap();
        let deg = small_degradation();
        let train_dir = root.path().join("train");
        let eval_dir = root.path().join("eval");
        for (dir, seed, count) in [(&train_dir, 21u64, 10usize), (&eval_dir, 22, 4)] {
            make_corpus(
                dir,
                &CorpusParams {
                    count,
                    side: 16,
                    num_classes: 2,
                    seed,
                    degradation: deg.clone(),
                },
            )
            .unwrap();
        }
        let mut cfg = oracle1d_config(&root.path().join("out"));
        cfg.task = Task::PatchRestore;
        cfg.target = TargetConfig {
            mixture: None,
            corpus: Some(CorpusConfig { train: train_dir, eval: eval_dir }),
        };
        cfg.degradation = Some(deg.clone());
        cfg.distill.teacher = TeacherMode::Network;
        cfg.generator.hidden_dims = vec![32];
        cfg.denoiser.hidden_dims = vec![32];
        let resolved = resolve(&cfg).unwrap();
        assert_eq!(resolved.dim, 256);
        // The generator's conditioning input is the degraded patch upsampled
        // back to full geometry: 8×8 → 16×16.
        assert_eq!(resolved.lq_dim, 256);
        assert_eq!(resolved.gen_spec.input_dim, 512);
        assert_eq!(resolved.num_labels, 2);

        let mut stream = BatchStream::new(&cfg, &resolved, stream_rng(1, Stream::Data));
        let batch = stream.next_batch(6).unwrap();
        assert_eq!(batch.hq[0].len(), 256);
        assert_eq!(batch.lq[0].len(), 256);
        assert!(batch.lq.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        // Each upsampled row repeats every pixel of the 8-wide source twice.
        let row = &batch.lq[0][..16];
        assert!(row.chunks(2).all(|pair| pair[0] == pair[1]));

        // A degradation mismatch between run config and corpus is an error.
        let mut wrong = cfg.clone();
        wrong.degradation = Some(DegradationConfig { noise_sigma: 0.2, ..deg });
        assert!(matches!(resolve(&wrong), Err(TrainerError::Config(_))));
    }

    #[test]
    fn evaluation_is_deterministic_given_params() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = two_mode_config(tmp.path());
        let resolved = resolve(&cfg).unwrap();
        let params =
            init_params(&resolved.gen_spec, &mut indexed_rng(3, Stream::Init, 0));
        let a = evaluate_generator(&cfg, &resolved, &params, 0, false).unwrap();
        let b = evaluate_generator(&cfg, &resolved, &params, 0, false).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.mmd2.unwrap() > 0.0, "an untrained generator is far from target");
    }
}
