//! Experiment configuration: one TOML file with dotted sections.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, SideBranchConfig};
use crate::cfn::CfnConfig;
use crate::channels::ChannelName;
use crate::error::{Error, Result};
use crate::experiment::EvalConfig;
use crate::heads::{AnchorConfig, HeadConfig};
use crate::loss::LossWeights;
use crate::model::{Mode, ModelConfig};
use crate::synthworld::SceneConfig;
use crate::trainer::TrainOptions;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub train_count: usize,
    pub test_count: usize,
    /// Channel maps rendered at generation time.
    pub channels: Vec<ChannelName>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            train_count: 400,
            test_count: 100,
            channels: vec![ChannelName::Segmentation],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    /// Iterations of the cfn, rpn, frcnn and joint stages.
    pub iterations: [usize; 4],
    pub learning_rates: [f64; 4],
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let o = TrainOptions::default();
        TrainingSection {
            iterations: o.iterations,
            learning_rates: o.learning_rates,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            clip_norm: o.clip_norm,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for parameter initialization and training.
    pub seed: u64,
    pub mode: Mode,
    pub channel: Option<ChannelName>,
    pub stop_proposal_gradient: bool,
    pub dataset: DatasetSection,
    pub scene: SceneConfig,
    pub backbone: BackboneConfig,
    pub side_branch: SideBranchConfig,
    pub cfn: CfnConfig,
    pub anchors: AnchorConfig,
    pub heads: HeadConfig,
    pub loss_weights: LossWeights,
    pub training: TrainingSection,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        ExperimentConfig {
            seed: 0,
            mode: m.mode,
            channel: m.channel,
            stop_proposal_gradient: m.stop_proposal_gradient,
            dataset: DatasetSection::default(),
            scene: SceneConfig::default(),
            backbone: m.backbone,
            side_branch: m.side_branch,
            cfn: m.cfn,
            anchors: m.anchors,
            heads: m.heads,
            loss_weights: m.loss_weights,
            training: TrainingSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {}", path.display(), m)),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model().validate()?;
        self.training_options().validate()?;
        self.eval.validate()?;
        if let Some(c) = self.channel {
            if !self.dataset.channels.contains(&c) && c != ChannelName::Icf {
                return Err(Error::Config(format!(
                    "channel {} is not among the generated dataset channels",
                    c.as_str()
                )));
            }
        }
        if self.dataset.channels.contains(&ChannelName::Flow) && !self.scene.frame_pair {
            return Err(Error::FlowWithoutFramePair);
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            channel: self.channel,
            backbone: self.backbone.clone(),
            side_branch: self.side_branch.clone(),
            cfn: self.cfn.clone(),
            anchors: self.anchors.clone(),
            heads: self.heads.clone(),
            loss_weights: self.loss_weights,
            stop_proposal_gradient: self.stop_proposal_gradient,
        }
    }

    pub fn training_options(&self) -> TrainOptions {
        TrainOptions {
            seed: self.seed,
            iterations: self.training.iterations,
            learning_rates: self.training.learning_rates,
            momentum: self.training.momentum,
            weight_decay: self.training.weight_decay,
            clip_norm: self.training.clip_norm,
        }
    }
}
