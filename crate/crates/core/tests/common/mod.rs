//! Shared fixtures and independent reference implementations.
#![allow(dead_code)]

use hyperlearner::autograd::{Graph, Var};
use hyperlearner::backbone::BackboneConfig;
use hyperlearner::boxes::Box;
use hyperlearner::channels::ChannelName;
use hyperlearner::dataset::generate_records;
use hyperlearner::evalkit::{GroundTruth, GtClass};
use hyperlearner::heads::{Detection, GtBox};
use hyperlearner::model::{Mode, ModelConfig, Sample};
use hyperlearner::params::{Bindings, Group, GroupSet, ParamStore};
use hyperlearner::synthworld::{CountRange, SceneConfig};
use hyperlearner::trainer::TrainOptions;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn all_groups() -> GroupSet {
    Group::ALL.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Gradient checking over named parameters

pub struct ParamGradReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub max_abs_grad: f64,
    pub worst: String,
}

/// Central differences on up to `per_tensor` coordinates of every parameter
/// whose name starts with one of `prefixes`, against tape gradients of
/// `f`. Relative error uses a floor of 1e-3 on the denominator.
pub fn check_param_gradients<F>(store: &ParamStore, prefixes: &[&str], per_tensor: usize, f: F) -> ParamGradReport
where
    F: Fn(&mut Graph, &Bindings) -> Var,
{
    const STEP: f64 = 1e-6;
    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let b = s.bind(&mut g, &GroupSet::new());
        let out = f(&mut g, &b);
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let b = store.bind(&mut g, &all_groups());
    let out = f(&mut g, &b);
    let grads = g.backward(out);
    let mut report = ParamGradReport {
        max_rel_error: 0.0,
        checked: 0,
        max_abs_grad: 0.0,
        worst: String::new(),
    };
    let mut work = store.clone();
    let mut pick = rng(99);
    for (name, var) in b.iter() {
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let len = store.get(name).unwrap().len();
        let analytic = grads.get(var).cloned();
        let coords: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| pick.random_range(0..len)).collect()
        };
        for i in coords {
            let orig = store.get(name).unwrap().data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + STEP;
            let plus = eval(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig - STEP;
            let minus = eval(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic.as_ref().map(|t| t.data()[i]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{}[{}]: analytic {:.6e} numeric {:.6e}", name, i, a, numeric);
            }
            report.max_abs_grad = report.max_abs_grad.max(a.abs());
            report.checked += 1;
        }
    }
    report
}

// ---------------------------------------------------------------------------
// Scalar loss references

pub fn ref_balanced_bce(c: &[f64], s: &[f64]) -> f64 {
    let n = s.len() as f64;
    let pos = s.iter().filter(|&&v| v > 0.5).count() as f64;
    let mut acc = 0.0;
    for (&q, &p) in c.iter().zip(s) {
        let beta = if p > 0.5 { 1.0 - pos / n } else { pos / n };
        let q = q.max(1e-7).min(1.0 - 1e-7);
        acc += beta * (-(p * q.ln()) - (1.0 - p) * (1.0 - q).ln());
    }
    acc / n
}

/// `c` holds `k` planes of `n` pixels each.
pub fn ref_pixel_ce(c: &[f64], labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    assert_eq!(c.len(), n * k);
    let mut acc = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        acc += -(c[l * n + i].max(1e-7)).ln();
    }
    acc / n as f64
}

pub fn ref_mse(c: &[f64], s: &[f64]) -> f64 {
    c.iter().zip(s).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / c.len() as f64
}

// ---------------------------------------------------------------------------
// Evaluation references

pub fn ref_iou(a: &Box, b: &Box) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Indices ordered by descending score, ties by ascending index.
pub fn ref_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx
}

/// Quadratic greedy suppression: repeatedly take the best remaining box and
/// drop everything overlapping it by more than `thresh`.
pub fn ref_nms(boxes: &[Box], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut alive = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        for i in 0..boxes.len() {
            if alive[i] && ref_iou(&boxes[b], &boxes[i]) > thresh {
                alive[i] = false;
            }
        }
    }
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefOutcome {
    Tp(usize),
    Fp,
    Ignored(usize),
    Unannotated(usize),
}

/// Reference matcher: GT roles are recomputed from raw attributes and all
/// IoUs are tabulated up front.
pub fn ref_match(dets: &[Detection], gts: &[GroundTruth], min_h: f64, max_occ: u8, max_trunc: f64, thr: f64) -> Vec<RefOutcome> {
    #[derive(PartialEq)]
    enum R {
        Eligible,
        Ignore,
        Hidden,
        Other,
    }
    let roles: Vec<R> = gts
        .iter()
        .map(|g| match g.class {
            GtClass::DontCare => R::Ignore,
            GtClass::Cyclist => R::Other,
            GtClass::Pedestrian => {
                if !g.annotated {
                    R::Hidden
                } else if g.bbox.y2 - g.bbox.y1 >= min_h && g.occlusion_level <= max_occ && g.truncation <= max_trunc {
                    R::Eligible
                } else {
                    R::Ignore
                }
            }
        })
        .collect();
    let table: Vec<Vec<f64>> = dets.iter().map(|d| gts.iter().map(|g| ref_iou(&d.bbox, &g.bbox)).collect()).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut taken = vec![false; gts.len()];
    let mut out = vec![RefOutcome::Fp; dets.len()];
    for i in ref_order(&scores) {
        let eligible: Vec<usize> = (0..gts.len())
            .filter(|&k| roles[k] == R::Eligible && !taken[k] && table[i][k] >= thr)
            .collect();
        if let Some(&k) = eligible.iter().fold(None, |best: Option<&usize>, k| match best {
            Some(b) if table[i][*b] >= table[i][*k] => Some(b),
            _ => Some(k),
        }) {
            taken[k] = true;
            out[i] = RefOutcome::Tp(k);
            continue;
        }
        let absorbing: Vec<usize> = (0..gts.len())
            .filter(|&k| matches!(roles[k], R::Ignore | R::Hidden) && table[i][k] >= thr)
            .collect();
        if let Some(&k) = absorbing.iter().fold(None, |best: Option<&usize>, k| match best {
            Some(b) if table[i][*b] >= table[i][*k] => Some(b),
            _ => Some(k),
        }) {
            out[i] = if roles[k] == R::Hidden {
                RefOutcome::Unannotated(k)
            } else {
                RefOutcome::Ignored(k)
            };
        }
    }
    out
}

/// Direct 41-point interpolated AP from a list of (score, is_tp) over all
/// images and the number of eligible GTs: for each recall level r the best
/// precision over every score cut whose recall reaches r.
pub fn ref_ap41(points: &[(f64, bool)], gt_count: usize) -> f64 {
    let mut cuts: Vec<f64> = points.iter().map(|p| p.0).collect();
    cuts.sort_by(|a, b| b.partial_cmp(a).unwrap());
    cuts.dedup();
    let pr: Vec<(f64, f64)> = cuts
        .iter()
        .map(|&t| {
            let tp = points.iter().filter(|p| p.0 >= t && p.1).count() as f64;
            let all = points.iter().filter(|p| p.0 >= t).count() as f64;
            (tp / gt_count as f64, tp / all)
        })
        .collect();
    let mut sum = 0.0;
    for j in 0..=40 {
        let r = j as f64 / 40.0;
        let best = pr
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 41.0
}

// ---------------------------------------------------------------------------
// Random fixtures

pub fn random_box(r: &mut ChaCha8Rng, extent: f64) -> Box {
    let x = r.random_range(0.0..extent);
    let y = r.random_range(0.0..extent);
    let w = r.random_range(2.0..extent * 0.5);
    let h = r.random_range(2.0..extent * 0.8);
    Box::new(x, y, x + w, y + h)
}

/// A box overlapping `b` by a random jitter.
pub fn jitter(r: &mut ChaCha8Rng, b: &Box, amount: f64) -> Box {
    let d = |r: &mut ChaCha8Rng| r.random_range(-amount..amount);
    let x1 = b.x1 + d(r);
    let y1 = b.y1 + d(r);
    let x2 = (b.x2 + d(r)).max(x1 + 1.0);
    let y2 = (b.y2 + d(r)).max(y1 + 1.0);
    Box::new(x1, y1, x2, y2)
}

pub fn random_gt(r: &mut ChaCha8Rng) -> GroundTruth {
    let class = match r.random_range(0..10) {
        0 => GtClass::DontCare,
        1 | 2 => GtClass::Cyclist,
        _ => GtClass::Pedestrian,
    };
    GroundTruth {
        bbox: random_box(r, 100.0),
        class,
        truncation: [0.0, 0.1, 0.4, 0.6][r.random_range(0..4)],
        occlusion_level: r.random_range(0..3),
        annotated: r.random_range(0..6) != 0,
    }
}

/// Detections clustered around the GTs so that matches, ties and
/// competition for the same GT all occur.
pub fn random_dets(r: &mut ChaCha8Rng, gts: &[GroundTruth], n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let bbox = if !gts.is_empty() && r.random_range(0..4) != 0 {
                let g = &gts[r.random_range(0..gts.len())];
                jitter(r, &g.bbox, 6.0)
            } else {
                random_box(r, 100.0)
            };
            // coarse scores so ties happen
            let score = r.random_range(1..=10) as f64 / 10.0;
            Detection { bbox, score, class_id: 1 }
        })
        .collect()
}

pub fn det(b: Box, score: f64) -> Detection {
    Detection { bbox: b, score, class_id: 1 }
}

// ---------------------------------------------------------------------------
// Small models and data

/// Backbone small enough for finite-difference checks.
pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        stage_channels: vec![3, 4, 4, 5],
        convs_per_stage: vec![1, 1, 1, 1],
        branch_channels: 2,
        ..BackboneConfig::default()
    }
}

pub fn toy_scene() -> SceneConfig {
    SceneConfig {
        image_height: 64,
        image_width: 64,
        object_height_range: (18.0, 40.0),
        pedestrian_count_range: CountRange::new(1, 2),
        seed: 5,
        ..SceneConfig::default()
    }
}

pub fn toy_model(mode: Mode) -> ModelConfig {
    let mut cfg = ModelConfig {
        mode,
        channel: mode.needs_channel().then_some(ChannelName::Segmentation),
        backbone: BackboneConfig {
            stage_channels: vec![4, 6, 8, 8],
            convs_per_stage: vec![1, 1, 1, 1],
            branch_channels: 4,
            aggregation_target_level: 2,
            ..BackboneConfig::default()
        },
        ..ModelConfig::default()
    };
    cfg.side_branch.hidden_channels = 8;
    cfg.side_branch.output_channels = 8;
    cfg.cfn.width = 8;
    cfg.heads.rpn_channels = 16;
    cfg.heads.fc_width = 16;
    cfg.heads.roi_size = 3;
    cfg
}

pub fn toy_samples(count: usize, channel: Option<ChannelName>) -> Vec<Sample> {
    let channels: Vec<ChannelName> = channel.into_iter().collect();
    generate_records(&toy_scene(), count, &channels)
        .unwrap()
        .iter()
        .map(|r| r.sample(channel))
        .collect::<Result<_, _>>()
        .unwrap()
}

pub fn toy_options(iterations: [usize; 4]) -> TrainOptions {
    TrainOptions {
        seed: 17,
        iterations,
        ..TrainOptions::default()
    }
}

pub fn gt_box(b: Box) -> GtBox {
    GtBox { bbox: b, class_id: 1 }
}

/// Zero biases put ReLU inputs exactly on the kink wherever the incoming
/// activations are all zero; small random biases move them off it.
pub fn jitter_biases(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.iter().filter(|p| p.name.ends_with(".b")).map(|p| p.name.clone()).collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v = r.random_range(0.02..0.1) * if r.random_bool(0.5) { 1.0 } else { -1.0 };
        }
    }
}
