//! In-memory dataset records shared by generation, training and evaluation.

use std::collections::BTreeMap;

use crate::channels::{compute_icf, ChannelMap, ChannelName};
use crate::error::{Error, Result};
use crate::evalkit::{GroundTruth, GtClass};
use crate::heads::{GtBox, CLASS_CYCLIST, CLASS_PEDESTRIAN};
use crate::model::Sample;
use crate::synthworld::{generate_scene, render_ground_truth_channel, GroundTruthKind, ObjectClass, Scene, SceneConfig};
use crate::tensor::Tensor;

/// One image with its labels and any precomputed channel maps.
#[derive(Clone, Debug)]
pub struct Record {
    pub image: Tensor,
    pub second_image: Option<Tensor>,
    /// Labelled objects followed by unannotated ones (`annotated == false`).
    pub ground_truth: Vec<GroundTruth>,
    pub channels: BTreeMap<ChannelName, ChannelMap>,
}

impl Record {
    /// Labels and channel maps of a generated scene; `channels` lists the
    /// maps to render.
    pub fn from_scene(scene: &Scene, channels: &[ChannelName]) -> Result<Self> {
        let mut maps = BTreeMap::new();
        for &name in channels {
            maps.insert(name, channel_for_scene(scene, name)?);
        }
        Ok(Record {
            image: scene.image.clone(),
            second_image: scene.second_image.clone(),
            ground_truth: scene_ground_truth(scene),
            channels: maps,
        })
    }

    /// Boxes the detector is trained on: annotated pedestrians and cyclists.
    pub fn training_boxes(&self) -> Vec<GtBox> {
        self.ground_truth
            .iter()
            .filter(|g| g.annotated)
            .filter_map(|g| {
                let class_id = match g.class {
                    GtClass::Pedestrian => CLASS_PEDESTRIAN,
                    GtClass::Cyclist => CLASS_CYCLIST,
                    GtClass::DontCare => return None,
                };
                Some(GtBox { bbox: g.bbox, class_id })
            })
            .collect()
    }

    /// Whether `name` is stored or can be computed from the image.
    pub fn has_channel(&self, name: ChannelName) -> bool {
        name == ChannelName::Icf || self.channels.contains_key(&name)
    }

    /// Training/evaluation sample carrying the named channel (computed on
    /// demand for ICF when not stored).
    pub fn sample(&self, channel: Option<ChannelName>) -> Result<Sample> {
        let channel = match channel {
            None => None,
            Some(name) => Some(match self.channels.get(&name) {
                Some(m) => m.clone(),
                None if name == ChannelName::Icf => compute_icf(&self.image)?,
                None => {
                    return Err(Error::Config(format!("record has no {} channel", name.as_str())));
                }
            }),
        };
        Ok(Sample {
            image: self.image.clone(),
            gts: self.training_boxes(),
            channel,
        })
    }
}

/// Channel map of `scene` for `name`: rendered ground truth, or ICF
/// computed from the image.
pub fn channel_for_scene(scene: &Scene, name: ChannelName) -> Result<ChannelMap> {
    let kind = match name {
        ChannelName::Icf => return compute_icf(&scene.image),
        ChannelName::Edge => GroundTruthKind::Edge,
        ChannelName::Segmentation => GroundTruthKind::Segmentation,
        ChannelName::Heatmap => GroundTruthKind::Heatmap,
        ChannelName::Disparity => GroundTruthKind::Disparity,
        ChannelName::Flow => GroundTruthKind::Flow,
        ChannelName::RawImage => {
            return Err(Error::Config("the raw image is not a derived channel".into()));
        }
    };
    render_ground_truth_channel(scene, kind)
}

/// Evaluation ground truth: pedestrians and cyclists with their difficulty
/// attributes. Distractors are not ground truth.
pub fn scene_ground_truth(scene: &Scene) -> Vec<GroundTruth> {
    let mut out: Vec<GroundTruth> = Vec::new();
    let mut hidden: Vec<GroundTruth> = Vec::new();
    for a in &scene.annotations {
        let class = match a.class {
            ObjectClass::Pedestrian => GtClass::Pedestrian,
            ObjectClass::Cyclist => GtClass::Cyclist,
            ObjectClass::Distractor => continue,
        };
        let gt = GroundTruth {
            bbox: a.bbox,
            class,
            truncation: a.truncation,
            occlusion_level: a.occlusion_level,
            annotated: a.annotated,
        };
        if a.annotated {
            out.push(gt);
        } else {
            hidden.push(gt);
        }
    }
    out.extend(hidden);
    out
}

/// Seed of scene `index` in a split generated from `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Generate `count` scenes from `config` with per-scene seeds derived from
/// `config.seed`.
pub fn generate_scenes(config: &SceneConfig, count: usize) -> Result<Vec<Scene>> {
    config.validate()?;
    (0..count)
        .map(|i| generate_scene(&config.with_seed(scene_seed(config.seed, i))))
        .collect()
}

/// Generate records with the requested channels.
pub fn generate_records(config: &SceneConfig, count: usize, channels: &[ChannelName]) -> Result<Vec<Record>> {
    generate_scenes(config, count)?
        .iter()
        .map(|s| Record::from_scene(s, channels))
        .collect()
}
