//! Experiment specification: one TOML file fully determines a run.
//!
//! The file names the experiment, the synthetic data to generate, the
//! model variants to train, the training hyperparameters, the seeds to
//! repeat over, and the classical-baseline settings. Every command takes
//! the same file, so `gen-data`, `train`, and `compare` always agree on
//! what the experiment is.

use std::path::Path;

use anyhow::{bail, Context};
use serde::Deserialize;
use socnav_core::baselines::{BaselineConfig, BaselineKind, DwaConfig};
use socnav_core::network::{ModelConfig, Modality};
use socnav_core::synthgen::{ExpertConfig, SCENARIOS};
use socnav_core::trainer::TrainConfig;

/// Upper bound on episodes per scenario per split, set by the seed
/// partitioning scheme (train and test draw from disjoint seed blocks).
pub const MAX_EPISODES_PER_SCENARIO: usize = 500_000;

/// Parsed experiment file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    /// Experiment name; also the default output directory (`runs/<name>`).
    pub name: String,
    /// Training seeds; each (variant, seed) pair is one independent run.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub data: DataSpec,
    #[serde(default)]
    pub expert: ExpertConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub baselines: BaselineSpec,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

/// What synthetic data to generate and how to slice it into samples.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Scenario preset names; each contributes episodes to both splits.
    pub scenarios: Vec<String>,
    /// Episodes per scenario in the training split.
    #[serde(default = "default_train_episodes")]
    pub train_episodes: usize,
    /// Episodes per scenario in the test split.
    #[serde(default = "default_test_episodes")]
    pub test_episodes: usize,
    /// Base seed; episode seeds derive from it so the splits are disjoint
    /// by construction.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_episode_seconds")]
    pub episode_seconds: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Keep every `stride`-th frame when slicing episodes into samples.
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Cap on training samples after slicing (0 = no cap). Thinning is
    /// spread evenly across the dataset, preserving the scenario mix.
    #[serde(default)]
    pub max_train_samples: usize,
    /// Cap on test samples after slicing (0 = no cap).
    #[serde(default)]
    pub max_test_samples: usize,
}

fn default_train_episodes() -> usize {
    6
}
fn default_test_episodes() -> usize {
    2
}
fn default_episode_seconds() -> f64 {
    12.0
}
fn default_dt() -> f64 {
    0.1
}
fn default_stride() -> usize {
    3
}

/// Which policy variants to train, plus optional capacity overrides
/// shared by all of them (defaults match the library's model defaults).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub variants: Vec<Modality>,
    pub img_channels: Option<Vec<usize>>,
    pub vox_channels: Option<Vec<usize>>,
    pub embed_dim: Option<usize>,
    pub rnn_hidden: Option<usize>,
    pub tf_layers: Option<usize>,
    pub tf_heads: Option<usize>,
}

impl ModelSpec {
    /// The full model configuration for one variant: library defaults with
    /// this spec's overrides applied.
    pub fn config_for(&self, modality: Modality) -> ModelConfig {
        let mut cfg: ModelConfig =
            serde_json::from_value(serde_json::json!({ "modality": modality.as_str() }))
                .expect("a bare modality deserializes with library defaults");
        if let Some(v) = &self.img_channels {
            cfg.img_channels = v.clone();
        }
        if let Some(v) = &self.vox_channels {
            cfg.vox_channels = v.clone();
        }
        if let Some(v) = self.embed_dim {
            cfg.embed_dim = v;
        }
        if let Some(v) = self.rnn_hidden {
            cfg.rnn_hidden = v;
        }
        if let Some(v) = self.tf_layers {
            cfg.tf_layers = v;
        }
        if let Some(v) = self.tf_heads {
            cfg.tf_heads = v;
        }
        cfg
    }
}

/// Optional overrides for the classical baselines (shared by both kinds).
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub v_nominal: Option<f64>,
    pub dwa: Option<DwaConfig>,
}

impl BaselineSpec {
    pub fn config_for(&self, kind: BaselineKind) -> BaselineConfig {
        let mut cfg = BaselineConfig::new(kind);
        if let Some(v) = self.v_nominal {
            cfg.v_nominal = v;
        }
        if let Some(d) = self.dwa {
            cfg.dwa = d;
        }
        cfg
    }
}

impl ExperimentSpec {
    /// Reads and validates an experiment file.
    pub fn load(path: &Path) -> anyhow::Result<ExperimentSpec> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read experiment spec {}", path.display()))?;
        let spec: ExperimentSpec = toml::from_str(&text)
            .with_context(|| format!("invalid experiment spec {}", path.display()))?;
        spec.validate()
            .with_context(|| format!("invalid experiment spec {}", path.display()))?;
        Ok(spec)
    }

    /// The training configuration for one seeded run.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { seed, ..self.train.clone() }
    }

    fn validate(&self) -> anyhow::Result<()> {
        let mut problems = Vec::new();

        if self.name.is_empty() {
            problems.push("name is empty".to_string());
        } else if !self
            .name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
        {
            problems.push(format!(
                "name {:?} may only use letters, digits, '.', '_', '-' (it becomes a directory)",
                self.name
            ));
        }

        if self.seeds.is_empty() {
            problems.push("seeds must list at least one seed".to_string());
        }
        let mut seen = std::collections::HashSet::new();
        for &s in &self.seeds {
            if !seen.insert(s) {
                problems.push(format!("seed {s} is listed twice"));
            }
        }

        if self.model.variants.is_empty() {
            problems.push("model.variants must list at least one variant".to_string());
        }
        let mut seen = std::collections::HashSet::new();
        for &v in &self.model.variants {
            if !seen.insert(v) {
                problems.push(format!("variant {v} is listed twice"));
            }
        }

        let d = &self.data;
        if d.scenarios.is_empty() {
            problems.push("data.scenarios must list at least one scenario".to_string());
        }
        for s in &d.scenarios {
            if !SCENARIOS.contains(&s.as_str()) {
                problems.push(format!("unknown scenario {s:?}; expected one of {SCENARIOS:?}"));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for s in &d.scenarios {
            if !seen.insert(s.as_str()) {
                problems.push(format!("scenario {s:?} is listed twice"));
            }
        }
        if d.train_episodes == 0 {
            problems.push("data.train_episodes must be at least 1".to_string());
        }
        if d.test_episodes == 0 {
            problems.push("data.test_episodes must be at least 1".to_string());
        }
        if d.train_episodes.max(d.test_episodes) >= MAX_EPISODES_PER_SCENARIO {
            problems.push(format!(
                "episode counts must stay below {MAX_EPISODES_PER_SCENARIO} per scenario"
            ));
        }
        if !(d.dt.is_finite() && d.dt > 0.0) {
            problems.push(format!("data.dt must be finite and > 0, got {}", d.dt));
        } else if !(d.episode_seconds.is_finite() && d.episode_seconds / d.dt >= 2.0) {
            problems.push(format!(
                "data.episode_seconds ({}) at dt {} must cover at least 2 frames",
                d.episode_seconds, d.dt
            ));
        }
        if d.stride == 0 {
            problems.push("data.stride must be at least 1".to_string());
        }

        if let Err(e) = self.train.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = self.expert.validate() {
            problems.push(e.to_string());
        }
        for kind in [BaselineKind::StraightPursuit, BaselineKind::DwaLite] {
            if let Err(e) = self.baselines.config_for(kind).validate() {
                problems.push(format!("baseline {kind}: {e}"));
            }
        }

        if problems.is_empty() {
            Ok(())
        } else {
            bail!("{}", problems.join("\n"));
        }
    }
}
