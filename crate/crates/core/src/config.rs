//! Run configuration: a human-readable TOML file with one section per
//! subsystem. Unknown keys are errors everywhere.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynfit::FitConfig;
use crate::env::{ArmParams, EnvKind, EnvSpec, InitStateDist, TargetMode};
use crate::error::{Error, Result};
use crate::sphase::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    ResetFree,
    ClassicMdgps,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub algorithm: Algorithm,
    pub iterations: usize,
    pub seed: u64,
    /// Where report.csv, the config echo, and checkpoints go. The CLI's
    /// --out flag overrides this.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub kind: EnvKind,
    #[serde(default = "default_workspace_dim")]
    pub workspace_dim: usize,
    pub horizon: usize,
    pub dt: f64,
    #[serde(default)]
    pub process_noise_std: f64,
    pub action_cost_weight: f64,
    #[serde(default)]
    pub action_limit: Option<f64>,
    pub init_dist: InitDist,
    pub init_a: Vec<f64>,
    pub init_b: Vec<f64>,
    pub target_mode: TargetModeName,
    #[serde(default)]
    pub target: Option<Vec<f64>>,
    #[serde(default)]
    pub target_low: Option<Vec<f64>>,
    #[serde(default)]
    pub target_high: Option<Vec<f64>>,
    #[serde(default)]
    pub arm: Option<ArmParams>,
}

fn default_workspace_dim() -> usize {
    2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitDist {
    /// init_a = mean, init_b = per-dimension std.
    Gaussian,
    /// init_a = lower corner, init_b = upper corner.
    UniformBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetModeName {
    Fixed,
    RandomPerEpisode,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    /// M for reset-free runs.
    #[serde(default)]
    pub samples_per_iteration: usize,
    /// N for classic runs.
    #[serde(default)]
    pub samples_per_condition: usize,
    /// Fixed full initial states for classic runs (one per condition).
    #[serde(default)]
    pub init_states: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringSection {
    pub k: usize,
    #[serde(default = "default_max_em_iters")]
    pub max_em_iters: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
}

fn default_max_em_iters() -> usize {
    20
}

fn default_restarts() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub enabled: bool,
    #[serde(default = "default_n_components")]
    pub n_components: usize,
    #[serde(default = "default_strength")]
    pub strength: f64,
    /// Pool tuples from earlier iterations into the GMM fit instead of
    /// refitting on the current iteration only.
    #[serde(default)]
    pub accumulate_iterations: bool,
}

fn default_n_components() -> usize {
    4
}

fn default_strength() -> f64 {
    1.0
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            enabled: false,
            n_components: default_n_components(),
            strength: default_strength(),
            accumulate_iterations: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CphaseSection {
    pub epsilon_init: f64,
    #[serde(default = "default_eps_min")]
    pub eps_min: f64,
    /// Defaults to 10 * epsilon_init.
    #[serde(default)]
    pub eps_max: Option<f64>,
}

fn default_eps_min() -> f64 {
    1e-4
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SphaseSection {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_init_output_var")]
    pub init_output_var: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![42, 42]
}

fn default_momentum() -> f64 {
    0.9
}

fn default_init_output_var() -> f64 {
    0.1
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_eval_episodes")]
    pub episodes: usize,
    pub success_threshold: f64,
}

fn default_eval_episodes() -> usize {
    50
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub env: EnvSection,
    pub sampling: SamplingSection,
    #[serde(default)]
    pub clustering: Option<ClusteringSection>,
    #[serde(default)]
    pub prior: PriorSection,
    pub cphase: CphaseSection,
    pub sphase: SphaseSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.iterations == 0 {
            return Err(Error::InvalidConfig("run.iterations must be positive".into()));
        }
        let spec = self.env_spec()?;
        spec.validate()?;
        match self.run.algorithm {
            Algorithm::ResetFree => {
                if self.sampling.samples_per_iteration == 0 {
                    return Err(Error::InvalidConfig(
                        "sampling.samples_per_iteration must be positive for reset_free".into(),
                    ));
                }
                let clustering = self.clustering.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("reset_free runs need a [clustering] section".into())
                })?;
                if clustering.k == 0 || clustering.k > self.sampling.samples_per_iteration {
                    return Err(Error::InvalidConfig(
                        "clustering.k must be in 1..=samples_per_iteration".into(),
                    ));
                }
                if clustering.restarts == 0 {
                    return Err(Error::InvalidConfig("clustering.restarts must be positive".into()));
                }
            }
            Algorithm::ClassicMdgps => {
                if self.sampling.init_states.is_empty() {
                    return Err(Error::InvalidConfig(
                        "classic_mdgps runs need sampling.init_states".into(),
                    ));
                }
                if self.sampling.samples_per_condition == 0 {
                    return Err(Error::InvalidConfig(
                        "sampling.samples_per_condition must be positive for classic_mdgps".into(),
                    ));
                }
                for (i, s) in self.sampling.init_states.iter().enumerate() {
                    if s.len() != spec.state_dim {
                        return Err(Error::InvalidConfig(format!(
                            "sampling.init_states[{i}] has length {}, expected {}",
                            s.len(),
                            spec.state_dim
                        )));
                    }
                }
            }
        }
        if self.cphase.epsilon_init <= 0.0 || self.cphase.eps_min <= 0.0 {
            return Err(Error::InvalidConfig("cphase epsilon values must be positive".into()));
        }
        if self.eps_max() < self.cphase.eps_min {
            return Err(Error::InvalidConfig("cphase.eps_max below eps_min".into()));
        }
        if self.sphase.epochs == 0 || self.sphase.batch_size == 0 {
            return Err(Error::InvalidConfig("sphase.epochs and batch_size must be positive".into()));
        }
        if self.eval.success_threshold <= 0.0 {
            return Err(Error::InvalidConfig("eval.success_threshold must be positive".into()));
        }
        Ok(())
    }

    pub fn eps_max(&self) -> f64 {
        self.cphase.eps_max.unwrap_or(10.0 * self.cphase.epsilon_init)
    }

    /// Materialize the environment specification.
    pub fn env_spec(&self) -> Result<EnvSpec> {
        let e = &self.env;
        let (state_dim, action_dim, target_dim) = match e.kind {
            EnvKind::DoubleIntegratorReacher => {
                (3 * e.workspace_dim, e.workspace_dim, e.workspace_dim)
            }
            EnvKind::TwoLinkArmReacher => (6, 2, 2),
        };
        let dynamic_dim = state_dim - target_dim;
        if e.init_a.len() != dynamic_dim || e.init_b.len() != dynamic_dim {
            return Err(Error::InvalidConfig(format!(
                "env.init_a/init_b must have length {dynamic_dim}"
            )));
        }
        let init_state = match e.init_dist {
            InitDist::Gaussian => InitStateDist::Gaussian {
                mean: DVector::from_vec(e.init_a.clone()),
                std: DVector::from_vec(e.init_b.clone()),
            },
            InitDist::UniformBox => InitStateDist::UniformBox {
                lo: DVector::from_vec(e.init_a.clone()),
                hi: DVector::from_vec(e.init_b.clone()),
            },
        };
        let target_mode = match e.target_mode {
            TargetModeName::Fixed => {
                let t = e.target.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("env.target required for fixed target mode".into())
                })?;
                if t.len() != target_dim {
                    return Err(Error::InvalidConfig(format!(
                        "env.target must have length {target_dim}"
                    )));
                }
                TargetMode::Fixed(DVector::from_vec(t.clone()))
            }
            TargetModeName::RandomPerEpisode => {
                let lo = e.target_low.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("env.target_low required for random targets".into())
                })?;
                let hi = e.target_high.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("env.target_high required for random targets".into())
                })?;
                if lo.len() != target_dim || hi.len() != target_dim {
                    return Err(Error::InvalidConfig(format!(
                        "env.target_low/high must have length {target_dim}"
                    )));
                }
                TargetMode::RandomPerEpisode {
                    lo: DVector::from_vec(lo.clone()),
                    hi: DVector::from_vec(hi.clone()),
                }
            }
        };
        Ok(EnvSpec {
            kind: e.kind,
            state_dim,
            action_dim,
            horizon: e.horizon,
            dt: e.dt,
            process_noise_std: e.process_noise_std,
            init_state,
            target_mode,
            action_cost_weight: e.action_cost_weight,
            action_limit: e.action_limit,
            arm: e.arm.unwrap_or_default(),
        })
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            prior_strength: self.prior.strength,
            ..FitConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.sphase.epochs,
            batch_size: self.sphase.batch_size,
            learning_rate: self.sphase.learning_rate,
            momentum: self.sphase.momentum,
        }
    }

    /// Network layer sizes [dx, hidden..., du].
    pub fn layer_sizes(&self, state_dim: usize, action_dim: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.sphase.hidden.len() + 2);
        sizes.push(state_dim);
        sizes.extend_from_slice(&self.sphase.hidden);
        sizes.push(action_dim);
        sizes
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.run.seed = seed;
        self
    }

    pub fn with_out_dir(mut self, out_dir: PathBuf) -> Self {
        self.run.out_dir = Some(out_dir);
        self
    }
}
