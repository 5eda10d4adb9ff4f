//! Anchors, target assignment, non-maximum suppression, proposals and the
//! two detection heads (RPN and Fast R-CNN).

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{conv, new_conv, ActivationMap, NEW_LAYER_SIGMA};
use crate::boxes::{decode_box_clamped, encode_box, iou, Box};
use crate::error::{Error, Result};
use crate::params::{Bindings, Init, LayerInit, ParamStore};
use crate::tensor::Tensor;

/// Background, pedestrian, cyclist.
pub const CLASS_COUNT: usize = 3;
pub const CLASS_PEDESTRIAN: usize = 1;
pub const CLASS_CYCLIST: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    /// Anchor heights in pixels.
    pub scales: Vec<f64>,
    /// Width / height ratios.
    pub ratios: Vec<f64>,
    pub stride: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            scales: vec![16.0, 28.0, 48.0, 84.0, 144.0],
            ratios: vec![0.25, 0.35, 0.41, 0.5, 0.7, 1.0, 1.4],
            stride: 8,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err(Error::Config("anchor scales and ratios must be non-empty".into()));
        }
        if self.scales.iter().chain(&self.ratios).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("anchor scales and ratios must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("anchor stride must be ≥ 1".into()));
        }
        Ok(())
    }

    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }
}

/// Anchors in (row, column, scale, ratio) order.
pub fn generate_anchors(cfg: &AnchorConfig, map_h: usize, map_w: usize) -> Vec<Box> {
    let s = cfg.stride as f64;
    let mut out = Vec::with_capacity(map_h * map_w * cfg.per_cell());
    for i in 0..map_h {
        for j in 0..map_w {
            let (cx, cy) = ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s);
            for &h in &cfg.scales {
                for &r in &cfg.ratios {
                    out.push(Box::from_center(cx, cy, h * r, h));
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box,
    pub score: f64,
    pub class_id: usize,
}

/// Per-anchor labels (1 positive, 0 negative, −1 ignored) and regression
/// targets (meaningful for positives only).
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorTargets {
    pub labels: Vec<i8>,
    pub targets: Vec<[f64; 4]>,
    pub matched_gt: Vec<Option<usize>>,
}

pub fn assign_rpn_targets(anchors: &[Box], gts: &[Box], pos_iou: f64, neg_iou: f64) -> AnchorTargets {
    let n = anchors.len();
    let mut labels = vec![0i8; n];
    let mut targets = vec![[0.0; 4]; n];
    let mut matched_gt = vec![None; n];
    if gts.is_empty() {
        return AnchorTargets {
            labels,
            targets,
            matched_gt,
        };
    }
    let mut best_iou = vec![0.0; n];
    let mut best_gt = vec![0usize; n];
    let mut gt_best = vec![0.0f64; gts.len()];
    let table: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| iou(a, g)).collect())
        .collect();
    for (i, row) in table.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            if v > best_iou[i] {
                best_iou[i] = v;
                best_gt[i] = k;
            }
            gt_best[k] = gt_best[k].max(v);
        }
    }
    for i in 0..n {
        labels[i] = if best_iou[i] >= pos_iou {
            1
        } else if best_iou[i] < neg_iou {
            0
        } else {
            -1
        };
    }
    // every GT keeps its best anchor(s), even below the positive threshold
    for (i, row) in table.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            if gt_best[k] > 0.0 && v == gt_best[k] {
                labels[i] = 1;
                if best_iou[i] <= v {
                    best_gt[i] = k;
                }
            }
        }
    }
    for i in 0..n {
        if labels[i] == 1 {
            let k = best_gt[i];
            matched_gt[i] = Some(k);
            targets[i] = encode_box(&gts[k], &anchors[i]).expect("valid boxes");
        }
    }
    AnchorTargets {
        labels,
        targets,
        matched_gt,
    }
}

/// Greedy suppression in descending score order (ties by lower index);
/// returns kept indices in that order.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<usize> {
    let boxes: Vec<Box> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms_boxes(&boxes, &scores, iou_thresh)
}

pub fn nms_boxes(boxes: &[Box], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let order = sort_by_score(scores);
    let mut kept: Vec<usize> = Vec::new();
    let mut suppressed = vec![false; boxes.len()];
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// Indices sorted by descending score, stable for ties.
pub fn sort_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalConfig {
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub nms_thresh: f64,
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            pre_nms_top_n: 2000,
            post_nms_top_n: 300,
            nms_thresh: 0.7,
            min_size: 4.0,
        }
    }
}

/// Proposals with their objectness scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposals {
    pub boxes: Vec<Box>,
    pub scores: Vec<f64>,
    /// Anchor each proposal was decoded from.
    pub anchor_index: Vec<usize>,
}

/// Decode, clip, drop small boxes, keep the top scores, suppress, keep the
/// top survivors.
pub fn generate_proposals(
    objectness: &[f64],
    deltas: &[[f64; 4]],
    anchors: &[Box],
    image_size: (usize, usize),
    cfg: &ProposalConfig,
) -> Result<Proposals> {
    if objectness.len() != anchors.len() || deltas.len() != anchors.len() {
        return Err(Error::Shape(format!(
            "{} scores / {} deltas for {} anchors",
            objectness.len(),
            deltas.len(),
            anchors.len()
        )));
    }
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let mut cand = Vec::new();
    for (i, a) in anchors.iter().enumerate() {
        let b = decode_box_clamped(&deltas[i], a).clip(w, h);
        if b.width() >= cfg.min_size && b.height() >= cfg.min_size && objectness[i].is_finite() {
            cand.push((i, b));
        }
    }
    let scores: Vec<f64> = cand.iter().map(|(i, _)| objectness[*i]).collect();
    let mut order = sort_by_score(&scores);
    order.truncate(cfg.pre_nms_top_n);
    let boxes: Vec<Box> = order.iter().map(|&k| cand[k].1).collect();
    let top_scores: Vec<f64> = order.iter().map(|&k| scores[k]).collect();
    let mut keep = nms_boxes(&boxes, &top_scores, cfg.nms_thresh);
    keep.truncate(cfg.post_nms_top_n);
    Ok(Proposals {
        boxes: keep.iter().map(|&k| boxes[k]).collect(),
        scores: keep.iter().map(|&k| top_scores[k]).collect(),
        anchor_index: keep.iter().map(|&k| cand[order[k]].0).collect(),
    })
}

/// Max RoI pooling of a C×H×W feature tensor into `N×C×out×out`.
pub fn roi_pool(features: &Tensor, stride: usize, rois: &[Box], out: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let y = g.roi_pool(x, rois, stride, out)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub rpn_channels: usize,
    pub fc_width: usize,
    pub roi_size: usize,
    pub rpn_pos_iou: f64,
    pub rpn_neg_iou: f64,
    pub rpn_batch: usize,
    pub rpn_fg_fraction: f64,
    pub roi_batch: usize,
    pub roi_fg_fraction: f64,
    pub roi_fg_iou: f64,
    /// Scale applied to FRCNN regression targets.
    pub bbox_stds: [f64; 4],
    pub train_proposals: ProposalConfig,
    pub test_proposals: ProposalConfig,
    pub score_floor: f64,
    pub detection_nms: f64,
    pub max_detections: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            rpn_channels: 128,
            fc_width: 256,
            roi_size: 7,
            rpn_pos_iou: 0.7,
            rpn_neg_iou: 0.3,
            rpn_batch: 128,
            rpn_fg_fraction: 0.5,
            roi_batch: 64,
            roi_fg_fraction: 0.25,
            roi_fg_iou: 0.5,
            bbox_stds: [0.1, 0.1, 0.2, 0.2],
            train_proposals: ProposalConfig::default(),
            test_proposals: ProposalConfig::default(),
            score_floor: 0.05,
            detection_nms: 0.5,
            max_detections: 100,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.rpn_channels, self.fc_width, self.roi_size, self.rpn_batch, self.roi_batch];
        if positive.contains(&0) {
            return Err(Error::Config("head sizes and batch sizes must be ≥ 1".into()));
        }
        if !(self.rpn_neg_iou <= self.rpn_pos_iou) {
            return Err(Error::Config("rpn_neg_iou must not exceed rpn_pos_iou".into()));
        }
        for f in [self.rpn_fg_fraction, self.roi_fg_fraction, self.score_floor] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config("fractions and score floor must lie in [0,1]".into()));
            }
        }
        if self.bbox_stds.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("bbox_stds must be positive".into()));
        }
        Ok(())
    }
}

pub fn init_rpn(store: &mut ParamStore, cfg: &HeadConfig, in_channels: usize, anchors_per_cell: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    new_conv(store, "rpn.conv", in_channels, cfg.rpn_channels, 3, LayerInit::default(), rng)?;
    new_conv(store, "rpn.cls", cfg.rpn_channels, anchors_per_cell, 1, LayerInit::default(), rng)?;
    new_conv(store, "rpn.bbox", cfg.rpn_channels, 4 * anchors_per_cell, 1, LayerInit::default(), rng)
}

fn linear_params(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    store.init(&format!("{}.w", prefix), &[dout, din], Init::Gaussian(sigma), din, rng)?;
    store.init(&format!("{}.b", prefix), &[dout], Init::Zeros, 0, rng)
}

pub fn init_frcnn(store: &mut ParamStore, cfg: &HeadConfig, in_channels: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let din = in_channels * cfg.roi_size * cfg.roi_size;
    linear_params(store, "frcnn.fc1", din, cfg.fc_width, NEW_LAYER_SIGMA, rng)?;
    linear_params(store, "frcnn.fc2", cfg.fc_width, cfg.fc_width, NEW_LAYER_SIGMA, rng)?;
    linear_params(store, "frcnn.cls", cfg.fc_width, CLASS_COUNT, NEW_LAYER_SIGMA, rng)?;
    linear_params(store, "frcnn.bbox", cfg.fc_width, 4 * CLASS_COUNT, NEW_LAYER_SIGMA, rng)
}

/// Per-anchor objectness logits (`A×1`) and deltas (`A×4`) in the order of
/// [`generate_anchors`].
#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    pub logits: Var,
    pub deltas: Var,
}

pub fn rpn_forward(g: &mut Graph, b: &Bindings, fused: ActivationMap) -> Result<RpnOutput> {
    let hidden = conv(g, b, "rpn.conv", fused.var, true)?;
    let cls = conv(g, b, "rpn.cls", hidden, false)?;
    let bbox = conv(g, b, "rpn.bbox", hidden, false)?;
    let (k, h, w) = g.value(cls).dims3()?;
    let cls = g.to_hwc(cls)?;
    let logits = g.reshape(cls, &[h * w * k, 1])?;
    let bbox = g.to_hwc(bbox)?;
    let deltas = g.reshape(bbox, &[h * w * k, 4])?;
    Ok(RpnOutput { logits, deltas })
}

/// Class logits (`N×3`) and per-class deltas (`N×12`).
#[derive(Clone, Copy, Debug)]
pub struct FrcnnOutput {
    pub logits: Var,
    pub deltas: Var,
}

/// Fully connected head over pooled `N×C×s×s` blocks.
pub fn frcnn_forward(g: &mut Graph, b: &Bindings, pooled: Var) -> Result<FrcnnOutput> {
    let shape = g.value(pooled).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("pooled blocks must be rank 4, got {:?}", shape)));
    }
    let flat = g.reshape(pooled, &[shape[0], shape[1] * shape[2] * shape[3]])?;
    let fc = |g: &mut Graph, name: &str, x: Var, relu: bool| -> Result<Var> {
        let w = b.get(&format!("{}.w", name))?;
        let bias = b.get(&format!("{}.b", name))?;
        let y = g.linear(x, w, Some(bias))?;
        Ok(if relu { g.relu(y) } else { y })
    };
    let h = fc(g, "frcnn.fc1", flat, true)?;
    let h = fc(g, "frcnn.fc2", h, true)?;
    let logits = fc(g, "frcnn.cls", h, false)?;
    let deltas = fc(g, "frcnn.bbox", h, false)?;
    Ok(FrcnnOutput { logits, deltas })
}

/// Row-wise softmax of an `N×K` tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = *logits.shape().last().expect("rank ≥ 1");
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// Sample at most `batch` labelled indices with at most `fg_fraction` of
/// them positive; returns `(positives, negatives)`.
pub fn sample_labels(labels: &[i8], batch: usize, fg_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let max_pos = (batch as f64 * fg_fraction).round() as usize;
    pos.shuffle(rng);
    pos.truncate(max_pos);
    neg.shuffle(rng);
    neg.truncate(batch - pos.len());
    pos.sort_unstable();
    neg.sort_unstable();
    (pos, neg)
}

/// Ground truth for RoI sampling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub bbox: Box,
    pub class_id: usize,
}

/// Sampled RoIs with class labels and, for foreground, the matched GT.
#[derive(Clone, Debug, PartialEq)]
pub struct RoiSample {
    pub rois: Vec<Box>,
    pub labels: Vec<usize>,
    pub matched: Vec<Option<usize>>,
    /// Index into the proposal list (`None` for appended GT boxes).
    pub source: Vec<Option<usize>>,
}

/// Foreground: IoU ≥ `fg_iou` with a GT; background: the rest. GT boxes are
/// appended to the candidates.
pub fn sample_rois(proposals: &[Box], gts: &[GtBox], cfg: &HeadConfig, rng: &mut ChaCha8Rng) -> RoiSample {
    let mut cand: Vec<(Box, Option<usize>)> = proposals.iter().enumerate().map(|(i, b)| (*b, Some(i))).collect();
    cand.extend(gts.iter().map(|g| (g.bbox, None)));
    let mut labels = vec![0i8; cand.len()];
    let mut matched = vec![None; cand.len()];
    for (i, (b, _)) in cand.iter().enumerate() {
        let mut best = (0.0, None);
        for (k, g) in gts.iter().enumerate() {
            let v = iou(b, &g.bbox);
            if v > best.0 {
                best = (v, Some(k));
            }
        }
        if best.0 >= cfg.roi_fg_iou {
            labels[i] = 1;
            matched[i] = best.1;
        }
    }
    let (pos, neg) = sample_labels(&labels, cfg.roi_batch, cfg.roi_fg_fraction, rng);
    let mut out = RoiSample {
        rois: Vec::new(),
        labels: Vec::new(),
        matched: Vec::new(),
        source: Vec::new(),
    };
    for &i in pos.iter().chain(&neg) {
        out.rois.push(cand[i].0);
        let m = if labels[i] == 1 { matched[i] } else { None };
        out.labels.push(m.map(|k| gts[k].class_id).unwrap_or(0));
        out.matched.push(m);
        out.source.push(cand[i].1);
    }
    out
}

/// Turn FRCNN outputs on `rois` into per-class detections.
pub fn postprocess(
    rois: &[Box],
    probs: &Tensor,
    deltas: &Tensor,
    image_size: (usize, usize),
    cfg: &HeadConfig,
) -> Vec<Detection> {
    let (h, w) = (image_size.0 as f64, image_size.1 as f64);
    let p = probs.data();
    let d = deltas.data();
    let mut all = Vec::new();
    for class in 1..CLASS_COUNT {
        let mut dets = Vec::new();
        for (i, roi) in rois.iter().enumerate() {
            let score = p[i * CLASS_COUNT + class];
            if !(score >= cfg.score_floor) {
                continue;
            }
            let o = i * 4 * CLASS_COUNT + 4 * class;
            let t = [
                d[o] * cfg.bbox_stds[0],
                d[o + 1] * cfg.bbox_stds[1],
                d[o + 2] * cfg.bbox_stds[2],
                d[o + 3] * cfg.bbox_stds[3],
            ];
            let b = decode_box_clamped(&t, roi).clip(w, h);
            if b.width() > 0.0 && b.height() > 0.0 {
                dets.push(Detection {
                    bbox: b,
                    score: score.clamp(0.0, 1.0),
                    class_id: class,
                });
            }
        }
        for k in nms(&dets, cfg.detection_nms) {
            all.push(dets[k]);
        }
    }
    let scores: Vec<f64> = all.iter().map(|d| d.score).collect();
    let mut order = sort_by_score(&scores);
    order.truncate(cfg.max_detections);
    order.into_iter().map(|k| all[k]).collect()
}
