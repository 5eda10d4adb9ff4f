//! Detection evaluation: PASCAL-style matching under difficulty filters,
//! interpolated average precision, recall at a fixed precision per height
//! bucket, false-positive categories and log-average miss rate.

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, Box};
use crate::error::{Error, Result};
use crate::heads::{sort_by_score, Detection};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultySpec {
    pub name: String,
    pub min_height: f64,
    pub max_occlusion_level: u8,
    pub max_truncation: f64,
}

impl DifficultySpec {
    pub fn easy() -> Self {
        DifficultySpec {
            name: "easy".into(),
            min_height: 40.0,
            max_occlusion_level: 0,
            max_truncation: 0.15,
        }
    }

    pub fn moderate() -> Self {
        DifficultySpec {
            name: "moderate".into(),
            min_height: 25.0,
            max_occlusion_level: 1,
            max_truncation: 0.3,
        }
    }

    pub fn hard() -> Self {
        DifficultySpec {
            name: "hard".into(),
            min_height: 25.0,
            max_occlusion_level: 2,
            max_truncation: 0.5,
        }
    }

    /// Report order: moderate, easy, hard.
    pub fn standard() -> [DifficultySpec; 3] {
        [Self::moderate(), Self::easy(), Self::hard()]
    }

    pub fn by_name(name: &str) -> Option<Self> {
        Self::standard().into_iter().find(|d| d.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_height > 0.0) || !(0.0..=1.0).contains(&self.max_truncation) {
            return Err(Error::Config(format!("invalid difficulty `{}`", self.name)));
        }
        Ok(())
    }

    pub fn admits(&self, gt: &GroundTruth) -> bool {
        gt.bbox.height() >= self.min_height
            && gt.occlusion_level <= self.max_occlusion_level
            && gt.truncation <= self.max_truncation
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GtClass {
    Pedestrian,
    Cyclist,
    DontCare,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub bbox: Box,
    pub class: GtClass,
    pub truncation: f64,
    pub occlusion_level: u8,
    /// `false` for objects present in the scene but missing from labels.
    pub annotated: bool,
}

impl GroundTruth {
    pub fn pedestrian(bbox: Box) -> Self {
        GroundTruth {
            bbox,
            class: GtClass::Pedestrian,
            truncation: 0.0,
            occlusion_level: 0,
            annotated: true,
        }
    }

    pub fn cyclist(bbox: Box) -> Self {
        GroundTruth {
            class: GtClass::Cyclist,
            ..Self::pedestrian(bbox)
        }
    }

    pub fn unannotated(bbox: Box) -> Self {
        GroundTruth {
            annotated: false,
            ..Self::pedestrian(bbox)
        }
    }
}

/// Role of a GT under a difficulty filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GtRole {
    /// Counted in recall.
    Eligible,
    /// Absorbs matches without counting (difficulty-filtered pedestrians,
    /// don't-care regions).
    Ignore,
    /// Present in the scene, absent from labels.
    Unannotated,
    /// Other class; never matched.
    Other,
}

pub fn gt_role(gt: &GroundTruth, difficulty: &DifficultySpec) -> GtRole {
    match gt.class {
        GtClass::DontCare => GtRole::Ignore,
        GtClass::Cyclist => GtRole::Other,
        GtClass::Pedestrian if !gt.annotated => GtRole::Unannotated,
        GtClass::Pedestrian if difficulty.admits(gt) => GtRole::Eligible,
        GtClass::Pedestrian => GtRole::Ignore,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    TruePositive { gt: usize },
    FalsePositive,
    /// Matched an ignore GT: neither TP nor FP.
    Ignored { gt: usize },
    /// Matched an unannotated GT: neither TP nor FP for AP.
    Unannotated { gt: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Outcome per detection, in input order.
    pub outcomes: Vec<Outcome>,
    pub gt_matched: Vec<bool>,
    pub roles: Vec<GtRole>,
}

/// Greedy matching in descending score order (ties by lower index). Each
/// eligible GT is matched at most once, to the detection with the highest
/// IoU ≥ `iou_thresh` among unmatched eligible GTs; otherwise a detection
/// may fall on an ignore or unannotated GT, which can absorb any number.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruth],
    difficulty: &DifficultySpec,
    iou_thresh: f64,
) -> MatchResult {
    let roles: Vec<GtRole> = gts.iter().map(|g| gt_role(g, difficulty)).collect();
    let mut gt_matched = vec![false; gts.len()];
    let mut outcomes = vec![Outcome::FalsePositive; dets.len()];
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    for i in sort_by_score(&scores) {
        let d = &dets[i].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (k, g) in gts.iter().enumerate() {
            if roles[k] != GtRole::Eligible || gt_matched[k] {
                continue;
            }
            let v = iou(d, &g.bbox);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((k, v));
            }
        }
        if let Some((k, _)) = best {
            gt_matched[k] = true;
            outcomes[i] = Outcome::TruePositive { gt: k };
            continue;
        }
        let mut fallback: Option<(usize, f64)> = None;
        for (k, g) in gts.iter().enumerate() {
            if !matches!(roles[k], GtRole::Ignore | GtRole::Unannotated) {
                continue;
            }
            let v = iou(d, &g.bbox);
            if v >= iou_thresh && fallback.is_none_or(|(_, b)| v > b) {
                fallback = Some((k, v));
            }
        }
        if let Some((k, _)) = fallback {
            outcomes[i] = match roles[k] {
                GtRole::Unannotated => Outcome::Unannotated { gt: k },
                _ => Outcome::Ignored { gt: k },
            };
        }
    }
    MatchResult {
        outcomes,
        gt_matched,
        roles,
    }
}

/// One counted detection on a curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub score: f64,
    pub tp: bool,
    /// Height of the matched GT for true positives.
    pub gt_height: Option<f64>,
}

/// Cumulative counts at one score threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
}

/// Counted detections of an evaluation, sorted by descending score, with
/// the eligible GT population.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalCurve {
    pub points: Vec<CurvePoint>,
    pub gt_heights: Vec<f64>,
    pub image_count: usize,
}

impl EvalCurve {
    pub fn gt_count(&self) -> usize {
        self.gt_heights.len()
    }

    /// Add one image's detections and matching result.
    pub fn add_image(&mut self, dets: &[Detection], gts: &[GroundTruth], m: &MatchResult) {
        self.image_count += 1;
        for (k, g) in gts.iter().enumerate() {
            if m.roles[k] == GtRole::Eligible {
                self.gt_heights.push(g.bbox.height());
            }
        }
        for (d, o) in dets.iter().zip(&m.outcomes) {
            match *o {
                Outcome::TruePositive { gt } => self.points.push(CurvePoint {
                    score: d.score,
                    tp: true,
                    gt_height: Some(gts[gt].bbox.height()),
                }),
                Outcome::FalsePositive => self.points.push(CurvePoint {
                    score: d.score,
                    tp: false,
                    gt_height: None,
                }),
                _ => {}
            }
        }
        self.sort();
    }

    fn sort(&mut self) {
        let scores: Vec<f64> = self.points.iter().map(|p| p.score).collect();
        let order = sort_by_score(&scores);
        self.points = order.into_iter().map(|i| self.points[i]).collect();
    }

    /// Cumulative TP/FP at every distinct score, highest first.
    pub fn operating_points(&self) -> Vec<OperatingPoint> {
        let mut out: Vec<OperatingPoint> = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        for (i, p) in self.points.iter().enumerate() {
            if p.tp {
                tp += 1;
            } else {
                fp += 1;
            }
            let last_of_group = self
                .points
                .get(i + 1)
                .is_none_or(|n| n.score != p.score);
            if last_of_group {
                out.push(OperatingPoint {
                    threshold: p.score,
                    tp,
                    fp,
                });
            }
        }
        out
    }

    /// (recall, precision) per operating point.
    pub fn pr_curve(&self) -> Vec<(f64, f64)> {
        let n = self.gt_count().max(1) as f64;
        self.operating_points()
            .iter()
            .map(|o| (o.tp as f64 / n, o.tp as f64 / (o.tp + o.fp) as f64))
            .collect()
    }
}

/// Match every image and collect the curve.
pub fn evaluate(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    difficulty: &DifficultySpec,
    iou_thresh: f64,
) -> Result<(EvalCurve, Vec<MatchResult>)> {
    if dets.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let mut curve = EvalCurve::default();
    let mut matches = Vec::with_capacity(dets.len());
    for (d, g) in dets.iter().zip(gts) {
        let m = match_detections(d, g, difficulty, iou_thresh);
        curve.add_image(d, g, &m);
        matches.push(m);
    }
    Ok((curve, matches))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ApSampling {
    Points41,
    Points11,
}

/// Interpolated AP with 41 recall samples.
pub fn average_precision(curve: &EvalCurve) -> Result<f64> {
    average_precision_sampled(curve, ApSampling::Points41)
}

/// Mean over equally spaced recall levels r of the best precision among
/// operating points with recall ≥ r.
pub fn average_precision_sampled(curve: &EvalCurve, sampling: ApSampling) -> Result<f64> {
    if curve.gt_count() == 0 {
        return Err(Error::Undefined("average precision with no ground truth".into()));
    }
    let samples = match sampling {
        ApSampling::Points41 => 41,
        ApSampling::Points11 => 11,
    };
    let pr = curve.pr_curve();
    // precision envelope from the right
    let mut envelope = vec![0.0; pr.len()];
    let mut best = 0.0f64;
    for i in (0..pr.len()).rev() {
        best = best.max(pr[i].1);
        envelope[i] = best;
    }
    let mut sum = 0.0;
    for s in 0..samples {
        let r = s as f64 / (samples - 1) as f64;
        if let Some(i) = pr.iter().position(|&(rec, _)| rec >= r - 1e-12) {
            sum += envelope[i];
        }
    }
    Ok(sum / samples as f64)
}

/// Half-open height interval `(lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeightBucket {
    pub lo: f64,
    pub hi: f64,
}

impl HeightBucket {
    pub fn contains(&self, h: f64) -> bool {
        h > self.lo && h <= self.hi
    }

    pub fn label(&self) -> String {
        if self.hi.is_infinite() {
            format!("({},inf]", self.lo)
        } else {
            format!("({},{}]", self.lo, self.hi)
        }
    }
}

pub fn default_height_buckets() -> Vec<HeightBucket> {
    vec![
        HeightBucket { lo: 0.0, hi: 80.0 },
        HeightBucket { lo: 80.0, hi: 160.0 },
        HeightBucket {
            lo: 160.0,
            hi: f64::INFINITY,
        },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct BucketRecall {
    pub bucket: HeightBucket,
    pub gt_count: usize,
    /// `None` when the bucket is empty or the precision target is never met.
    pub recall: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallAtPrecision {
    pub target_precision: f64,
    /// Lowest score threshold meeting the target; `None` if never met.
    pub threshold: Option<f64>,
    pub max_precision: f64,
    pub overall: Option<f64>,
    pub buckets: Vec<BucketRecall>,
}

/// Recall per height bucket at the lowest threshold whose overall precision
/// reaches `precision`.
pub fn recall_at_precision(curve: &EvalCurve, precision: f64, buckets: &[HeightBucket]) -> RecallAtPrecision {
    let ops = curve.operating_points();
    let mut max_precision = 0.0f64;
    let mut chosen: Option<OperatingPoint> = None;
    for o in &ops {
        let p = o.tp as f64 / (o.tp + o.fp) as f64;
        max_precision = max_precision.max(p);
        if p >= precision {
            chosen = Some(*o);
        }
    }
    let threshold = chosen.map(|o| o.threshold);
    let counted: Vec<&CurvePoint> = match threshold {
        Some(t) => curve.points.iter().filter(|p| p.score >= t).collect(),
        None => Vec::new(),
    };
    let overall = match (threshold, curve.gt_count()) {
        (Some(_), n) if n > 0 => Some(counted.iter().filter(|p| p.tp).count() as f64 / n as f64),
        _ => None,
    };
    let buckets = buckets
        .iter()
        .map(|b| {
            let gt_count = curve.gt_heights.iter().filter(|&&h| b.contains(h)).count();
            let recall = (threshold.is_some() && gt_count > 0).then(|| {
                let hits = counted
                    .iter()
                    .filter(|p| p.gt_height.is_some_and(|h| b.contains(h)))
                    .count();
                hits as f64 / gt_count as f64
            });
            BucketRecall {
                bucket: *b,
                gt_count,
                recall,
            }
        })
        .collect();
    RecallAtPrecision {
        target_precision: precision,
        threshold,
        max_precision,
        overall,
        buckets,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FpCategory {
    Localization,
    Background,
    Cyclist,
    Annotation,
}

impl FpCategory {
    pub const ALL: [FpCategory; 4] = [
        FpCategory::Localization,
        FpCategory::Background,
        FpCategory::Cyclist,
        FpCategory::Annotation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FpCategory::Localization => "localization",
            FpCategory::Background => "background",
            FpCategory::Cyclist => "cyclist",
            FpCategory::Annotation => "annotation",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FpBreakdown {
    pub localization: usize,
    pub background: usize,
    pub cyclist: usize,
    pub annotation: usize,
}

impl FpBreakdown {
    pub fn total(&self) -> usize {
        self.localization + self.background + self.cyclist + self.annotation
    }

    pub fn get(&self, c: FpCategory) -> usize {
        match c {
            FpCategory::Localization => self.localization,
            FpCategory::Background => self.background,
            FpCategory::Cyclist => self.cyclist,
            FpCategory::Annotation => self.annotation,
        }
    }

    fn add(&mut self, c: FpCategory) {
        match c {
            FpCategory::Localization => self.localization += 1,
            FpCategory::Background => self.background += 1,
            FpCategory::Cyclist => self.cyclist += 1,
            FpCategory::Annotation => self.annotation += 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum FpSelection {
    /// The N highest-scoring false positives.
    TopN(usize),
    /// False positives scoring at or above the first threshold whose recall
    /// reaches the given value.
    AtRecall(f64),
}

/// Category of an unmatched detection; precedence annotation > cyclist >
/// localization > background.
pub fn categorize(det: &Box, gts: &[GroundTruth], iou_thresh: f64) -> FpCategory {
    let hits = |pred: &dyn Fn(&GroundTruth) -> bool| {
        gts.iter()
            .filter(|g| pred(g))
            .map(|g| iou(det, &g.bbox))
            .fold(0.0f64, f64::max)
    };
    if hits(&|g| g.class == GtClass::Pedestrian && !g.annotated) >= iou_thresh {
        FpCategory::Annotation
    } else if hits(&|g| g.class == GtClass::Cyclist) >= iou_thresh {
        FpCategory::Cyclist
    } else if hits(&|_| true) > 0.0 {
        FpCategory::Localization
    } else {
        FpCategory::Background
    }
}

/// Categorize the selected false positives (detections counted as FP plus
/// those that hit unannotated objects) across all images.
pub fn categorize_false_positives(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    difficulty: &DifficultySpec,
    selection: FpSelection,
    iou_thresh: f64,
) -> Result<FpBreakdown> {
    let (curve, matches) = evaluate(dets, gts, difficulty, iou_thresh)?;
    let mut fps: Vec<(f64, usize, usize)> = Vec::new();
    for (img, m) in matches.iter().enumerate() {
        for (i, o) in m.outcomes.iter().enumerate() {
            if matches!(o, Outcome::FalsePositive | Outcome::Unannotated { .. }) {
                fps.push((dets[img][i].score, img, i));
            }
        }
    }
    let scores: Vec<f64> = fps.iter().map(|f| f.0).collect();
    let order = sort_by_score(&scores);
    let selected: Vec<usize> = match selection {
        FpSelection::TopN(n) => order.into_iter().take(n).collect(),
        FpSelection::AtRecall(r) => {
            let n = curve.gt_count().max(1) as f64;
            let threshold = curve
                .operating_points()
                .iter()
                .find(|o| o.tp as f64 / n >= r)
                .map(|o| o.threshold)
                .unwrap_or(f64::NEG_INFINITY);
            order.into_iter().filter(|&k| fps[k].0 >= threshold).collect()
        }
    };
    let mut out = FpBreakdown::default();
    for k in selected {
        let (_, img, i) = fps[k];
        out.add(categorize(&dets[img][i].bbox, &gts[img], iou_thresh));
    }
    Ok(out)
}

/// Log-average miss rate over 9 log-spaced FPPI samples in
/// `[10^exponent, 1]`.
pub fn log_average_miss_rate(curve: &EvalCurve, image_count: usize, exponent: f64) -> Result<f64> {
    if image_count == 0 {
        return Err(Error::Undefined("miss rate needs at least one image".into()));
    }
    let n = curve.gt_count();
    if n == 0 {
        return Err(Error::Undefined("miss rate with no ground truth".into()));
    }
    let pts: Vec<(f64, f64)> = curve
        .operating_points()
        .iter()
        .map(|o| (o.fp as f64 / image_count as f64, 1.0 - o.tp as f64 / n as f64))
        .collect();
    if pts.is_empty() {
        return Ok(1.0);
    }
    let mrs: Vec<f64> = (0..9)
        .map(|i| {
            let f = 10f64.powf(exponent * (1.0 - i as f64 / 8.0));
            pts.iter()
                .rev()
                .find(|(fppi, _)| *fppi <= f)
                .map(|p| p.1)
                .unwrap_or(pts[0].1)
        })
        .collect();
    if mrs.iter().any(|&m| m == 0.0) {
        return Ok(0.0);
    }
    if mrs.iter().all(|&m| m == mrs[0]) {
        return Ok(mrs[0]);
    }
    Ok((mrs.iter().map(|m| m.ln()).sum::<f64>() / 9.0).exp())
}
