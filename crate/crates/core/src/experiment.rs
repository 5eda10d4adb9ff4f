//! Evaluation of a trained model over a set of records.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Record;
use crate::error::{Error, Result};
use crate::evalkit::{
    average_precision, categorize_false_positives, default_height_buckets, evaluate, log_average_miss_rate,
    recall_at_precision, DifficultySpec, EvalCurve, FpBreakdown, FpSelection, GroundTruth,
};
use crate::heads::{Detection, CLASS_PEDESTRIAN};
use crate::model::{pixel_accuracy, Model, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub difficulties: Vec<DifficultySpec>,
    /// Precision at which per-height recall is reported.
    pub recall_precision: f64,
    /// Recall at which false positives are categorized.
    pub fp_recall: f64,
    pub fp_top_n: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            difficulties: DifficultySpec::standard().to_vec(),
            recall_precision: 0.7,
            fp_recall: 0.7,
            fp_top_n: 200,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config("IoU threshold must lie in (0, 1]".into()));
        }
        if self.difficulties.is_empty() {
            return Err(Error::Config("at least one difficulty is required".into()));
        }
        for d in &self.difficulties {
            d.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub bucket: String,
    pub gt_count: usize,
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyMetrics {
    pub average_precision: f64,
    pub gt_count: usize,
    /// Undefined without ground truth.
    pub log_average_miss_rate_2: Option<f64>,
    pub log_average_miss_rate_4: Option<f64>,
    pub recall_threshold: Option<f64>,
    pub max_precision: f64,
    pub recall_overall: Option<f64>,
    pub recall_buckets: Vec<BucketRow>,
    pub fp_at_recall: FpBreakdown,
    pub fp_top_n: FpBreakdown,
    /// `(recall, precision)` at each distinct score.
    pub pr_curve: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub image_count: usize,
    pub difficulties: BTreeMap<String, DifficultyMetrics>,
    /// CFN pixel accuracy against the stored supervisor, when applicable.
    pub pixel_accuracy: Option<f64>,
}

/// Pedestrian detections of `model` on every record.
pub fn detect_pedestrians(model: &Model, records: &[Record]) -> Result<Vec<Vec<Detection>>> {
    records
        .iter()
        .map(|r| {
            let inf = model.infer(&inference_sample(model, r)?)?;
            Ok(keep_pedestrians(inf.detections))
        })
        .collect()
}

/// Sample for inference; the channel is attached when the model consumes
/// it or when it is available for scoring the CFN.
pub fn inference_sample(model: &Model, r: &Record) -> Result<Sample> {
    match model.config.channel {
        Some(c) if model.config.mode.uses_side_branch() || r.has_channel(c) => r.sample(Some(c)),
        _ => r.sample(None),
    }
}

pub fn keep_pedestrians(dets: Vec<Detection>) -> Vec<Detection> {
    dets.into_iter().filter(|d| d.class_id == CLASS_PEDESTRIAN).collect()
}

/// All metrics for precomputed detections.
pub fn score_detections(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], cfg: &EvalConfig) -> Result<Metrics> {
    cfg.validate()?;
    let mut out = BTreeMap::new();
    let images = gts.len();
    for d in &cfg.difficulties {
        let (curve, _) = evaluate(dets, gts, d, cfg.iou_threshold)?;
        out.insert(d.name.clone(), difficulty_metrics(&curve, dets, gts, d, cfg, images)?);
    }
    Ok(Metrics {
        image_count: images,
        difficulties: out,
        pixel_accuracy: None,
    })
}

fn difficulty_metrics(
    curve: &EvalCurve,
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    d: &DifficultySpec,
    cfg: &EvalConfig,
    images: usize,
) -> Result<DifficultyMetrics> {
    let ap = if curve.gt_count() == 0 {
        0.0
    } else {
        average_precision(curve)?
    };
    let mr = |exponent| -> Result<Option<f64>> {
        if curve.gt_count() == 0 {
            return Ok(None);
        }
        log_average_miss_rate(curve, images.max(1), exponent).map(Some)
    };
    let rap = recall_at_precision(curve, cfg.recall_precision, &default_height_buckets());
    Ok(DifficultyMetrics {
        average_precision: ap,
        gt_count: curve.gt_count(),
        log_average_miss_rate_2: mr(-2.0)?,
        log_average_miss_rate_4: mr(-4.0)?,
        recall_threshold: rap.threshold,
        max_precision: rap.max_precision,
        recall_overall: rap.overall,
        recall_buckets: rap
            .buckets
            .iter()
            .map(|b| BucketRow {
                bucket: b.bucket.label(),
                gt_count: b.gt_count,
                recall: b.recall,
            })
            .collect(),
        fp_at_recall: categorize_false_positives(dets, gts, d, FpSelection::AtRecall(cfg.fp_recall), cfg.iou_threshold)?,
        fp_top_n: categorize_false_positives(dets, gts, d, FpSelection::TopN(cfg.fp_top_n), cfg.iou_threshold)?,
        pr_curve: curve.pr_curve(),
    })
}

/// Run `model` on `records` and score it. Pixel accuracy is reported for
/// models with a CFN supervised by a binary or multiclass channel.
pub fn evaluate_model(model: &Model, records: &[Record], cfg: &EvalConfig) -> Result<Metrics> {
    let mut dets = Vec::with_capacity(records.len());
    let mut acc_sum = 0.0;
    let mut acc_n = 0usize;
    for r in records {
        let sample = inference_sample(model, r)?;
        let inf = model.infer(&sample)?;
        if let (Some(pred), Some(truth)) = (&inf.channel, &sample.channel) {
            if let Ok(a) = pixel_accuracy(pred, truth) {
                acc_sum += a;
                acc_n += 1;
            }
        }
        dets.push(keep_pedestrians(inf.detections));
    }
    let gts: Vec<Vec<GroundTruth>> = records.iter().map(|r| r.ground_truth.clone()).collect();
    let mut m = score_detections(&dets, &gts, cfg)?;
    m.pixel_accuracy = (acc_n > 0).then(|| acc_sum / acc_n as f64);
    Ok(m)
}
