//! Experiment configuration: a strict TOML schema with no unknown keys.
//!
//! Misconfiguration is the dominant failure mode of reproduction work, so
//! every table rejects unrecognised keys, every value is validated before a
//! run starts, and the effective configuration (after command-line
//! overrides) is hashed so logs and results can be traced back to exactly
//! the settings that produced them.

use crate::degrade::DegradationConfig;
use crate::nets::Activation;
use crate::opt::AdamWConfig;
use crate::oracle::{CovSpec, GaussianMixture, OracleError};
use crate::schedule::WeightKind;
use crate::util::sha256_hex16;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("cannot parse config: {0}")]
    Syntax(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// What kind of experiment the run is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// 1-D mixture target with analytic everything; the most checkable.
    #[serde(rename = "oracle_1d")]
    Oracle1d,
    /// 2-D mixture target; the convergence and ablation battleground.
    #[serde(rename = "oracle_2d")]
    Oracle2d,
    /// 16×16-ish grayscale patches through the degradation chain.
    PatchRestore,
}

impl Task {
    /// Data dimension for oracle tasks; patch dimensions come from the
    /// corpus manifest.
    pub fn oracle_dim(self) -> Option<usize> {
        match self {
            Task::Oracle1d => Some(1),
            Task::Oracle2d => Some(2),
            Task::PatchRestore => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub weight: WeightKind,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { num_steps: 1000, beta_min: 1e-4, beta_max: 0.02, weight: WeightKind::Constant }
    }
}

/// Mixture target for oracle tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<CovSpec>,
}

impl MixtureConfig {
    pub fn build(&self) -> Result<GaussianMixture, OracleError> {
        GaussianMixture::new(self.weights.clone(), self.means.clone(), self.covs.clone())
    }
}

/// Patch corpora (produced by `make-corpus`): training and held-out dirs,
/// each containing a `manifest.json` plus PGM files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub train: PathBuf,
    pub eval: PathBuf,
}

/// The target distribution: exactly one of `mixture` (oracle tasks) or
/// `corpus` (patch task).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mixture: Option<MixtureConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<CorpusConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Analytic mixture score (oracle tasks only).
    Oracle,
    /// Pretrained noise-prediction network.
    Network,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Multiplier on the batch distance when choosing the noise ceiling.
    pub kappa: f64,
    /// Weight of the score-difference loss.
    pub lambda: f64,
    pub teacher: TeacherMode,
    /// Oracle tasks: degraded inputs are hq + corruption_sigma · noise.
    pub corruption_sigma: f64,
    pub gen_opt: AdamWConfig,
    pub fake_opt: AdamWConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            kappa: 1.5,
            lambda: 1.0,
            teacher: TeacherMode::Oracle,
            corruption_sigma: 1.0,
            gen_opt: AdamWConfig::default(),
            fake_opt: AdamWConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub cond_embed_dim: usize,
    /// Width of the fresh-noise vector concatenated to the degraded input;
    /// defaults to the degraded input's own width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_dim: Option<usize>,
    /// Adds the degraded input to the network output, so the layers learn a
    /// correction on top of it instead of synthesizing from scratch.
    pub residual: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64],
            activation: Activation::Silu,
            cond_embed_dim: 4,
            noise_dim: None,
            residual: false,
        }
    }
}

/// Architecture shared by the teacher and the fake noise predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
    pub cond_embed_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 64],
            activation: Activation::Silu,
            time_embed_dim: 8,
            cond_embed_dim: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub opt: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 64, opt: AdamWConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate every this many steps (plus once before and once after).
    pub every: u64,
    /// Held-out sample count for oracle tasks (patch tasks evaluate the
    /// whole eval corpus).
    pub samples: usize,
    /// RBF bandwidth for the kernel two-sample distance.
    pub mmd_bandwidth: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { every: 1000, samples: 10_000, mmd_bandwidth: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Drop the score-difference loss (λ = 0).
    pub no_score: bool,
    /// Pin the noise ceiling to T and the blend weight to 0.5.
    pub no_dynamic: bool,
    /// Replace every condition label with the null label 0.
    pub no_condition: bool,
}

/// The whole experiment; one TOML file per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub target: TargetConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub denoiser: DenoiserConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub ablations: AblationConfig,
    /// Degradation chain for the patch task (and the corpus/degrade tools).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degradation: Option<DegradationConfig>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("run-out")
}

impl ExperimentConfig {
    /// Reads, parses, and validates a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml_str(&text).map_err(|e| match e {
            ConfigError::Syntax(message) => {
                ConfigError::Parse { path: path.to_path_buf(), message }
            }
            other => other,
        })
    }

    /// Parses and validates a config from TOML text. Total over arbitrary
    /// input: any byte string either yields a validated config or an error,
    /// never a panic.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The built-in experiment used when no config file is given: a
    /// well-separated two-mode 2-D mixture with the analytic teacher.
    pub fn builtin() -> Self {
        Self {
            task: Task::Oracle2d,
            steps: 2000,
            batch_size: 32,
            seed: 0,
            out_dir: default_out_dir(),
            schedule: ScheduleConfig::default(),
            target: TargetConfig {
                mixture: Some(MixtureConfig {
                    weights: vec![0.5, 0.5],
                    means: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
                    covs: vec![
                        CovSpec::Diagonal(vec![0.25, 0.25]),
                        CovSpec::Diagonal(vec![0.25, 0.25]),
                    ],
                }),
                corpus: None,
            },
            distill: DistillConfig::default(),
            generator: GeneratorConfig::default(),
            denoiser: DenoiserConfig::default(),
            pretrain: PretrainConfig::default(),
            eval: EvalConfig::default(),
            ablations: AblationConfig::default(),
            degradation: None,
        }
    }

    /// Canonical serialization: the parsed structure re-emitted, so two
    /// files differing only in comments, ordering, or defaults spelled out
    /// explicitly produce the same text (and hash).
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("a validated config serializes")
    }

    /// 16-hex-digit fingerprint of the canonical form; embedded in logs and
    /// result files.
    pub fn hash16(&self) -> String {
        sha256_hex16(self.canonical().as_bytes())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be >= 1".into()));
        }
        if self.eval.every == 0 {
            return Err(ConfigError::Invalid("eval.every must be >= 1".into()));
        }
        if self.eval.samples < 2 {
            return Err(ConfigError::Invalid("eval.samples must be >= 2".into()));
        }
        if !(self.eval.mmd_bandwidth > 0.0) {
            return Err(ConfigError::Invalid("eval.mmd_bandwidth must be > 0".into()));
        }
        if !(self.distill.kappa > 0.0 && self.distill.kappa.is_finite()) {
            return Err(ConfigError::Invalid("distill.kappa must be > 0".into()));
        }
        if !(self.distill.lambda >= 0.0 && self.distill.lambda.is_finite()) {
            return Err(ConfigError::Invalid("distill.lambda must be >= 0".into()));
        }
        if self.denoiser.time_embed_dim == 0 || self.denoiser.time_embed_dim % 2 != 0 {
            return Err(ConfigError::Invalid(
                "denoiser.time_embed_dim must be positive and even (the \
                 noise predictor needs to see the timestep)"
                    .into(),
            ));
        }
        match self.task {
            Task::Oracle1d | Task::Oracle2d => {
                let dim = self.task.oracle_dim().expect("oracle task");
                let Some(mix) = &self.target.mixture else {
                    return Err(ConfigError::Invalid(
                        "oracle tasks need [target.mixture]".into(),
                    ));
                };
                if self.target.corpus.is_some() {
                    return Err(ConfigError::Invalid(
                        "oracle tasks take a mixture target, not a corpus".into(),
                    ));
                }
                let gm = mix
                    .build()
                    .map_err(|e| ConfigError::Invalid(format!("target.mixture: {e}")))?;
                if gm.dim() != dim {
                    return Err(ConfigError::Invalid(format!(
                        "task wants dimension {dim}, target.mixture has {}",
                        gm.dim()
                    )));
                }
                if !(self.distill.corruption_sigma > 0.0) {
                    return Err(ConfigError::Invalid(
                        "distill.corruption_sigma must be > 0 on oracle tasks".into(),
                    ));
                }
            }
            Task::PatchRestore => {
                if self.target.corpus.is_none() {
                    return Err(ConfigError::Invalid(
                        "patch_restore needs [target.corpus]".into(),
                    ));
                }
                if self.target.mixture.is_some() {
                    return Err(ConfigError::Invalid(
                        "patch_restore takes a corpus target, not a mixture".into(),
                    ));
                }
                let Some(deg) = &self.degradation else {
                    return Err(ConfigError::Invalid(
                        "patch_restore needs a [degradation] table".into(),
                    ));
                };
                deg.validate()
                    .map_err(|e| ConfigError::Invalid(format!("degradation: {e}")))?;
                if self.distill.teacher == TeacherMode::Oracle {
                    return Err(ConfigError::Invalid(
                        "patch_restore has no analytic score; use teacher = \"network\"".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle2d_toml() -> String {
        r#"
            task = "oracle_2d"
            steps = 5000
            batch_size = 32
            seed = 7

            [target.mixture]
            weights = [0.5, 0.5]
            means = [[-2.0, 0.0], [2.0, 0.0]]
            covs = [{ diagonal = [0.25, 0.25] }, { diagonal = [0.25, 0.25] }]
        "#
        .to_string()
    }

    #[test]
    fn parses_a_minimal_oracle_config_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(&oracle2d_toml()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.task, Task::Oracle2d);
        assert_eq!(cfg.schedule.num_steps, 1000);
        assert_eq!(cfg.distill.kappa, 1.5);
        assert_eq!(cfg.distill.lambda, 1.0);
        assert_eq!(cfg.distill.teacher, TeacherMode::Oracle);
        assert!(!cfg.ablations.no_score);
        assert_eq!(cfg.generator.hidden_dims, vec![64, 64]);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        // A typo'd key anywhere must fail loudly, not be ignored.
        let bad = oracle2d_toml() + "\n[distill]\nkapa = 2.0\n";
        let err = toml::from_str::<ExperimentConfig>(&bad).unwrap_err();
        assert!(err.to_string().contains("kapa"), "{err}");

        let bad_top = oracle2d_toml() + "\nstepz = 3\n";
        assert!(toml::from_str::<ExperimentConfig>(&bad_top).is_err());
    }

    #[test]
    fn hash_ignores_formatting_but_tracks_values() {
        let a: ExperimentConfig = toml::from_str(&oracle2d_toml()).unwrap();
        // Same settings, different formatting / comments / spelled defaults.
        let b: ExperimentConfig = toml::from_str(&format!(
            "# a comment\n{}\n[distill]\nkappa = 1.5\n",
            oracle2d_toml()
        ))
        .unwrap();
        assert_eq!(a.hash16(), b.hash16());

        let mut c = a.clone();
        c.distill.kappa = 1.6;
        assert_ne!(a.hash16(), c.hash16());

        let mut d = a.clone();
        d.seed = 8;
        assert_ne!(a.hash16(), d.hash16(), "the seed is part of the fingerprint");
    }

    #[test]
    fn canonical_form_round_trips() {
        let a: ExperimentConfig = toml::from_str(&oracle2d_toml()).unwrap();
        let again: ExperimentConfig = toml::from_str(&a.canonical()).unwrap();
        assert_eq!(a, again);
        assert_eq!(a.hash16(), again.hash16());
    }

    #[test]
    fn validation_rejects_inconsistent_tasks() {
        // Oracle task with a 1-D mixture under oracle_2d.
        let mut cfg: ExperimentConfig = toml::from_str(&oracle2d_toml()).unwrap();
        cfg.target.mixture = Some(MixtureConfig {
            weights: vec![1.0],
            means: vec![vec![0.0]],
            covs: vec![CovSpec::Diagonal(vec![1.0])],
        });
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));

        // Patch task without corpus/degradation, or with an oracle teacher.
        let patch: Result<ExperimentConfig, _> = toml::from_str(
            r#"
                task = "patch_restore"
                steps = 10
                batch_size = 4
                [target.corpus]
                train = "corpus/train"
                eval = "corpus/eval"
            "#,
        );
        let patch = patch.unwrap();
        assert!(matches!(patch.validate(), Err(ConfigError::Invalid(_))));

        // Odd time embedding.
        let mut odd: ExperimentConfig = toml::from_str(&oracle2d_toml()).unwrap();
        odd.denoiser.time_embed_dim = 7;
        assert!(odd.validate().is_err());
    }

    #[test]
    fn load_reports_missing_files_distinctly() {
        let err = ExperimentConfig::load(Path::new("/nonexistent/cfg.toml")).unwrap_err();
        assert!(matches!(err, ConfigError::Io { .. }));
    }
}
