//! Experiment configuration: one TOML document covering every stage.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::ExplainConfig;
use crate::augment::AugmentConfig;
use crate::data::SynthConfig;
use crate::downstream::DownstreamConfig;
use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::nn::ModelConfig;
use crate::ssl::TrainConfig;

/// Floating-point width used for every array in a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Float32,
    Float64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Existing dataset directory; when absent the synthetic generator is used.
    pub path: Option<PathBuf>,
    /// Generator parameters. Its `graph` field is replaced by the top-level
    /// graph section.
    pub synth: SynthConfig,
    /// Block boundaries (`start`, `end`) for `build`; empty keeps each run
    /// whole.
    pub blocks: Vec<(usize, usize)>,
}

/// Architecture plus the ablation switches that live in other sections.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: Option<usize>,
    pub gat_width: Option<usize>,
    pub cnn_channels: Option<Vec<usize>>,
    pub predictor_hidden: Option<usize>,
    pub predictor_hidden_norm: Option<bool>,
    pub head_hidden: Option<Vec<usize>>,
    pub no_gnn: bool,
    pub no_cnn: bool,
    pub no_projection_mlp: bool,
    /// Drops the cross-task loss term.
    pub no_task_invariance: bool,
    /// Enables image-space augmentation.
    pub with_image_aug: bool,
}

impl ModelSection {
    pub fn model_config(&self) -> ModelConfig {
        let base = ModelConfig::default();
        ModelConfig {
            d: self.d.unwrap_or(base.d),
            gat_width: self.gat_width.unwrap_or(base.gat_width),
            cnn_channels: self.cnn_channels.clone().unwrap_or(base.cnn_channels),
            predictor_hidden: self.predictor_hidden,
            predictor_hidden_norm: self.predictor_hidden_norm.unwrap_or(base.predictor_hidden_norm),
            head_hidden: self.head_hidden.clone(),
            no_gnn: self.no_gnn,
            no_cnn: self.no_cnn,
            no_projection_mlp: self.no_projection_mlp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub explain: ExplainConfig,
    /// Phenotypes for correlation tables and prediction-scope explanations.
    pub phenotypes: Vec<String>,
    /// Cap on explained test instances per fold; `None` explains all.
    pub max_instances_per_fold: Option<usize>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            explain: ExplainConfig::default(),
            phenotypes: vec!["diagnosis".into(), "score".into()],
            max_instances_per_fold: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub precision: Precision,
    pub dataset: DatasetSection,
    pub graph: GraphConfig,
    pub augment: AugmentConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub downstream: DownstreamConfig,
    pub analysis: AnalysisSection,
}

impl ExperimentConfig {
    /// Parses TOML, naming the offending key on failure.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_owned()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copies cross-cutting settings into the sections that consume them:
    /// the seed everywhere, the graph section into the generator, and the
    /// two pipeline-level ablation switches.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.dataset.synth.graph = c.graph;
        c.train.seed = c.seed;
        c.downstream.seed = c.seed;
        if c.model.no_task_invariance {
            c.train.task_invariance = false;
        }
        if c.model.with_image_aug {
            c.augment.image_aug_enabled = true;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.resolved();
        c.model_config().validate()?;
        c.train.validate()?;
        c.downstream.probe.validate("downstream.probe")?;
        c.downstream.finetune.validate("downstream.finetune")?;
        c.analysis.explain.validate()?;
        if c.downstream.folds < 2 {
            return Err(Error::Config(format!("downstream.folds must be at least 2, got {}", c.downstream.folds)));
        }
        for (name, p) in [
            ("p_node_mask", c.augment.p_node_mask),
            ("p_edge_drop", c.augment.p_edge_drop),
            ("p_roi_mask", c.augment.p_roi_mask),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(c.graph.edge_fraction > 0.0 && c.graph.edge_fraction <= 1.0) || !(c.graph.ridge >= 0.0) {
            return Err(Error::Config(
                "graph.edge_fraction must lie in (0, 1] and graph.ridge must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        self.model.model_config()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// First 16 hex digits of the SHA-256 of the resolved configuration,
    /// seed excluded.
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.seed = 0;
        c.train.seed = 0;
        c.downstream.seed = 0;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        hex::encode(digest)[..16].to_owned()
    }
}
