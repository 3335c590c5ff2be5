//! Experiment configuration.
//!
//! A config is a TOML document. Every optional field has a default; the
//! manifest written next to the artifacts is the same document with every
//! default filled in and every seed resolved, so it replays exactly.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fedpart::federation::{Algorithm, FedConfig, FinetuneConfig, FinetuneReg, PipelineConfig, Statefulness};
use fedpart::objective::StocGradSpec;
use fedpart::problems::{AdditiveSpec, FullPersonalizationSpec, QuadraticEnsembleSpec};
use fedpart::solvers::LocalHyper;
use serde::{Deserialize, Serialize};

pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Experiment seed; stages and the problem default to it.
    #[serde(default)]
    pub seed: u64,
    /// Where artifacts go unless the command line says otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Write every `metric_cadence`-th round (the last round is always written).
    #[serde(default = "one")]
    pub metric_cadence: usize,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared: Option<StageConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personalized: Option<StageConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tune: Option<TuneConfig>,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProblemConfig {
    Quadratic(QuadraticConfig),
    Additive(AdditiveConfig),
    FullPersonalization(FullConfig),
    /// A serialized problem container.
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticConfig {
    pub n: usize,
    pub d0: usize,
    /// Uniform personal dimension; ignored when `personal_dims` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personal_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub personal_dims: Option<Vec<usize>>,
    #[serde(default = "default_eigs")]
    pub shared_eigs: (f64, f64),
    #[serde(default = "default_eigs")]
    pub personal_eigs: (f64, f64),
    #[serde(default = "half")]
    pub coupling: f64,
    #[serde(default = "unit")]
    pub heterogeneity: f64,
    #[serde(default = "yes")]
    pub device_bounded_below: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_eigs() -> (f64, f64) {
    (1.0, 2.0)
}

fn half() -> f64 {
    0.5
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdditiveConfig {
    pub n: usize,
    pub d0: usize,
    pub personal_dim: usize,
    pub samples: usize,
    #[serde(default)]
    pub heldout_samples: usize,
    #[serde(default = "unit")]
    pub heterogeneity: f64,
    #[serde(default = "tenth")]
    pub noise: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn tenth() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FullConfig {
    pub n: usize,
    pub dim: usize,
    /// One value for every device, or a per-device list.
    pub lambda: Lambda,
    #[serde(default = "default_eigs")]
    pub curvature: (f64, f64),
    #[serde(default = "unit")]
    pub heterogeneity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Lambda {
    Uniform(f64),
    PerDevice(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitConfig {
    #[default]
    Zeros,
    Random {
        #[serde(default = "unit")]
        scale: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

/// One federated stage. The `algorithm` is fixed to FedAvg for the shared
/// stage and must be FedAlt or FedSim for the personalized one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
    pub rounds: usize,
    pub cohort_size: usize,
    pub gamma_u: f64,
    pub gamma_v: f64,
    #[serde(default = "one")]
    pub tau: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_u: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_v: Option<usize>,
    #[serde(default)]
    pub noise: StocGradSpec,
    #[serde(default)]
    pub statefulness: Statefulness,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub parallel: bool,
}

impl StageConfig {
    pub fn hyper(&self) -> LocalHyper {
        LocalHyper {
            tau_u: self.tau_u.unwrap_or(self.tau),
            tau_v: self.tau_v.unwrap_or(self.tau),
            ..LocalHyper::new(self.gamma_u, self.gamma_v, self.tau)
        }
    }

    fn to_fed(&self, algorithm: Algorithm, seed: u64) -> FedConfig {
        FedConfig {
            noise: self.noise,
            statefulness: self.statefulness,
            parallel: self.parallel,
            ..FedConfig::new(algorithm, self.rounds, self.cohort_size, self.hyper(), self.seed.unwrap_or(seed))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneStage {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub reg: FinetuneReg,
    #[serde(default)]
    pub noise: StocGradSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Paired FedAlt/FedSim runs from the initial state at matched settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub rounds: usize,
    pub cohort_size: usize,
    /// Matched `eta`: `gamma_u = eta/(tau L_u)`, `gamma_v = eta/(tau L_v)`.
    /// Needs closed-form constants.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_u: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_v: Option<f64>,
    #[serde(default = "one")]
    pub tau: usize,
    pub threshold: f64,
    #[serde(default)]
    pub noise: StocGradSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Inputs for the `tune` command. Missing profile fields are filled from the
/// problem where possible (closed-form constants, noise level, diversity at
/// the initial state).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuneConfig {
    pub algorithm: Algorithm,
    pub rounds: usize,
    pub cohort_size: usize,
    #[serde(default = "one")]
    pub tau: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_u: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_v: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_f0: Option<f64>,
    #[serde(default)]
    pub noise: StocGradSpec,
    #[serde(default)]
    pub profile: ProfileOverrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ProfileOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_u: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_uv: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_vu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_u2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_v2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho2: Option<f64>,
}

/// Replay record: the fully resolved config plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub fedpart_version: String,
    pub config: ExperimentConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("invalid experiment config")?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::from_toml(&text).with_context(|| format!("in {}", path.display()))?;
        // Container paths are relative to the config file.
        if let ProblemConfig::File { path: p } = &mut cfg.problem {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
            // Absolute, so a manifest replays from any working directory.
            if let Ok(abs) = p.canonicalize() {
                *p = abs;
            }
        }
        Ok(cfg)
    }

    /// Structural checks that need no problem instance. Errors name the field.
    pub fn check(&self) -> Result<()> {
        if self.metric_cadence == 0 {
            bail!("metric_cadence must be at least 1");
        }
        if let Some(s) = &self.shared {
            if s.algorithm.is_some_and(|a| a != Algorithm::FedAvg) {
                bail!("shared.algorithm must be fedavg (the non-personalized stage)");
            }
        }
        if let Some(s) = &self.personalized {
            match s.algorithm {
                Some(Algorithm::FedAlt | Algorithm::FedSim) => {}
                Some(Algorithm::FedAvg) => bail!("personalized.algorithm must be fedalt or fedsim"),
                None => bail!("personalized.algorithm is required"),
            }
        }
        if let Some(c) = &self.compare {
            if c.eta.is_none() && (c.gamma_u.is_none() || c.gamma_v.is_none()) {
                bail!("compare needs either eta or both gamma_u and gamma_v");
            }
            if c.threshold.is_nan() || c.threshold <= 0.0 {
                bail!("compare.threshold must be positive");
            }
        }
        if let Some(f) = &self.finetune {
            if f.lr.is_nan() || f.lr < 0.0 {
                bail!("finetune.lr must be nonnegative");
            }
        }
        Ok(())
    }

    /// Fills every seed and default so the result replays without context.
    pub fn resolved(&self) -> Self {
        let mut cfg = self.clone();
        let seed = cfg.seed;
        match &mut cfg.problem {
            ProblemConfig::Quadratic(q) => {
                q.seed.get_or_insert(seed);
                if q.personal_dims.is_none() {
                    q.personal_dims = Some(vec![q.personal_dim.unwrap_or(q.d0); q.n]);
                }
                q.personal_dim = None;
            }
            ProblemConfig::Additive(a) => {
                a.seed.get_or_insert(seed);
            }
            ProblemConfig::FullPersonalization(f) => {
                f.seed.get_or_insert(seed);
                if let Lambda::Uniform(l) = f.lambda {
                    f.lambda = Lambda::PerDevice(vec![l; f.n]);
                }
            }
            ProblemConfig::File { .. } => {}
        }
        if let InitConfig::Random { seed: s, .. } = &mut cfg.init {
            s.get_or_insert(seed);
        }
        for stage in [&mut cfg.shared, &mut cfg.personalized].into_iter().flatten() {
            stage.seed.get_or_insert(seed);
            stage.tau_u.get_or_insert(stage.tau);
            stage.tau_v.get_or_insert(stage.tau);
        }
        if let Some(s) = &mut cfg.shared {
            s.algorithm = Some(Algorithm::FedAvg);
        }
        if let Some(f) = &mut cfg.finetune {
            f.seed.get_or_insert(seed);
        }
        if let Some(c) = &mut cfg.compare {
            c.seed.get_or_insert(seed);
        }
        if let Some(t) = &mut cfg.tune {
            t.tau_u.get_or_insert(t.tau);
            t.tau_v.get_or_insert(t.tau);
        }
        cfg
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let seed = self.seed;
        PipelineConfig {
            shared: self.shared.as_ref().map(|s| s.to_fed(Algorithm::FedAvg, seed)),
            personalized: self
                .personalized
                .as_ref()
                .map(|s| s.to_fed(s.algorithm.unwrap_or(Algorithm::FedAlt), seed)),
            finetune: self.finetune.as_ref().map(|f| FinetuneConfig {
                epochs: f.epochs,
                lr: f.lr,
                reg: f.reg.clone(),
                noise: f.noise,
                seed: f.seed.unwrap_or(seed),
            }),
        }
    }
}

impl QuadraticConfig {
    pub fn spec(&self, seed: u64) -> QuadraticEnsembleSpec {
        QuadraticEnsembleSpec {
            n: self.n,
            d0: self.d0,
            personal_dims: self
                .personal_dims
                .clone()
                .unwrap_or_else(|| vec![self.personal_dim.unwrap_or(self.d0); self.n]),
            shared_eigs: self.shared_eigs,
            personal_eigs: self.personal_eigs,
            coupling: self.coupling,
            heterogeneity: self.heterogeneity,
            device_bounded_below: self.device_bounded_below,
            weights: self.weights.clone(),
            seed: self.seed.unwrap_or(seed),
        }
    }
}

impl AdditiveConfig {
    pub fn spec(&self, seed: u64) -> AdditiveSpec {
        AdditiveSpec {
            n: self.n,
            d0: self.d0,
            personal_dim: self.personal_dim,
            samples: self.samples,
            heldout_samples: self.heldout_samples,
            heterogeneity: self.heterogeneity,
            noise: self.noise,
            seed: self.seed.unwrap_or(seed),
        }
    }
}

impl FullConfig {
    pub fn spec(&self, seed: u64) -> FullPersonalizationSpec {
        FullPersonalizationSpec {
            n: self.n,
            dim: self.dim,
            lambdas: match &self.lambda {
                Lambda::Uniform(l) => vec![*l; self.n],
                Lambda::PerDevice(ls) => ls.clone(),
            },
            curvature: self.curvature,
            heterogeneity: self.heterogeneity,
            seed: self.seed.unwrap_or(seed),
        }
    }
}

impl Manifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        let mut config = config.resolved();
        config.output_dir = None;
        Self {
            format: MANIFEST_FORMAT,
            fedpart_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing manifest")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: Self = toml::from_str(&text).with_context(|| format!("invalid manifest {}", path.display()))?;
        if m.format != MANIFEST_FORMAT {
            bail!("manifest format {} is not supported (expected {MANIFEST_FORMAT})", m.format);
        }
        m.config.check()?;
        Ok(m)
    }
}
