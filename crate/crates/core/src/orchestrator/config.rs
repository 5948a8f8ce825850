use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::execute::ExecConfig;
use crate::library::SimilarityWeights;
use crate::planner::PlannerConfig;
use crate::policy::{DiffusionSchedule, GripperMode, PolicyError, DEFAULT_HORIZON};
use crate::sim::{PerturbationConfig, TemplateRegistry};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Oracle,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self { kind: BackendKind::Oracle, endpoint: None, timeout_ms: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub r: usize,
    pub action_weight: f64,
    pub geometry_weight: f64,
    pub retries: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let w = SimilarityWeights::default();
        Self { r: 3, action_weight: w.action, geometry_weight: w.geometry, retries: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub sigma0: f64,
    pub horizon: usize,
    pub gripper: GripperMode,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 16, alpha: 1.0, gamma: 0.5, sigma0: 0.01, horizon: DEFAULT_HORIZON, gripper: GripperMode::Diffuse }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule, PolicyError> {
        DiffusionSchedule::linear(self.steps, self.alpha, self.gamma, self.sigma0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationPhases {
    #[serde(default = "no_perturbation")]
    pub forward: PerturbationConfig,
    #[serde(default = "no_perturbation")]
    pub reverse: PerturbationConfig,
}

fn no_perturbation() -> PerturbationConfig {
    PerturbationConfig::NONE
}

impl Default for PerturbationPhases {
    fn default() -> Self {
        Self { forward: PerturbationConfig::NONE, reverse: PerturbationConfig::NONE }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub template: String,
    pub episodes: usize,
    /// Independent worlds sharing the task's episode budget.
    #[serde(default = "one")]
    pub lanes: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignConfig {
    pub library_path: PathBuf,
    pub dataset_path: PathBuf,
    /// Machine-readable stats summary; skipped when absent.
    pub summary_path: Option<PathBuf>,
    /// Alternative scene template registry; the built-in one when absent.
    pub templates_path: Option<PathBuf>,
    pub master_seed: u64,
    pub workers: usize,
    pub repetition_cap: usize,
    pub harvest_to_library: bool,
    pub harvest_reverse: bool,
    pub masking: bool,
    /// Consecutive planning failures after which a lane gives up.
    pub max_plan_failures: usize,
    pub backend: BackendConfig,
    pub retrieval: RetrievalConfig,
    pub diffusion: DiffusionConfig,
    pub perturbation: PerturbationPhases,
    pub tasks: Vec<TaskSpec>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            library_path: PathBuf::from("library.jsonl"),
            dataset_path: PathBuf::from("dataset.jsonl"),
            summary_path: None,
            templates_path: None,
            master_seed: 0,
            workers: 4,
            repetition_cap: 5,
            harvest_to_library: false,
            harvest_reverse: false,
            masking: true,
            max_plan_failures: 20,
            backend: BackendConfig::default(),
            retrieval: RetrievalConfig::default(),
            diffusion: DiffusionConfig::default(),
            perturbation: PerturbationPhases::default(),
            tasks: Vec::new(),
        }
    }
}

/// Templates run by default: every executable task with scripted demonstrations.
pub const DEFAULT_TASKS: [&str; 13] = [
    "push_block",
    "push_block_distractors",
    "pick_ball",
    "pick_distractors",
    "stack_block",
    "large_container_cup",
    "large_container_laptop",
    "put_laptop_cup_into_tray",
    "push_stack",
    "push_stack_distractors",
    "close_box",
    "open_box",
    "close_then_open_box",
];

impl CampaignConfig {
    /// Default settings running `episodes` episodes of every default task.
    pub fn with_default_tasks(episodes: usize) -> Self {
        Self {
            tasks: DEFAULT_TASKS.iter().map(|t| TaskSpec { template: t.to_string(), episodes, lanes: 1 }).collect(),
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        let mut cfg: CampaignConfig = toml::from_str(text)
            .map_err(|e| ConfigError::Parse { path: origin.to_path_buf(), message: e.to_string() })?;
        let base = origin.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.library_path);
        fix(&mut self.dataset_path);
        if let Some(p) = self.summary_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.templates_path.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self, registry: &TemplateRegistry) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.tasks.is_empty() {
            return bad("no tasks configured".into());
        }
        for t in &self.tasks {
            if registry.get(&t.template).is_none() {
                return bad(format!("unknown template '{}'", t.template));
            }
            if t.lanes == 0 {
                return bad(format!("task '{}' has zero lanes", t.template));
            }
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.repetition_cap == 0 {
            return bad("repetition_cap must be at least 1".into());
        }
        if self.retrieval.r == 0 {
            return bad("retrieval.r must be at least 1".into());
        }
        if self.planner_config().weights.normalized().is_none() {
            return bad("retrieval weights must be non-negative with a positive sum".into());
        }
        if self.diffusion.horizon == 0 {
            return bad("diffusion.horizon must be at least 1".into());
        }
        self.diffusion.schedule().map_err(|e| ConfigError::Invalid(format!("diffusion: {e}")))?;
        for (name, p) in [("forward", &self.perturbation.forward), ("reverse", &self.perturbation.reverse)] {
            if !p.is_valid() {
                return bad(format!("perturbation.{name} needs p_perturb in [0,1] and sigma_t >= 0"));
            }
        }
        if self.backend.kind == BackendKind::External && self.backend.endpoint.is_none() {
            return bad("external backend needs an endpoint".into());
        }
        Ok(())
    }

    pub fn planner_config(&self) -> PlannerConfig {
        PlannerConfig {
            retrieval_r: self.retrieval.r,
            weights: SimilarityWeights { action: self.retrieval.action_weight, geometry: self.retrieval.geometry_weight },
            retries: self.retrieval.retries,
        }
    }

    pub fn exec_config(&self) -> Result<ExecConfig, ConfigError> {
        Ok(ExecConfig {
            schedule: self.diffusion.schedule().map_err(|e| ConfigError::Invalid(format!("diffusion: {e}")))?,
            horizon: self.diffusion.horizon,
            gripper_mode: self.diffusion.gripper,
            masking: self.masking,
        })
    }

    pub fn total_episodes(&self) -> usize {
        self.tasks.iter().map(|t| t.episodes).sum()
    }
}
