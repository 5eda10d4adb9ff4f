//! Detector assembly for every integration mode, the training forward pass
//! and inference.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{
    aggregate_maps, forward_body, fuse_for_heads, init_aggregation, init_body, init_side_branch, side_branch,
    ActivationMap, AggregatedActivationMap, BackboneConfig, SideBranchConfig, SideBranchInit,
};
use crate::boxes::Box;
use crate::cfn::{cfn_forward, init_cfn, output_channels, CfnConfig};
use crate::channels::{ChannelKind, ChannelMap, ChannelName};
use crate::error::{Error, Result};
use crate::heads::{
    assign_rpn_targets, frcnn_forward, generate_anchors, generate_proposals, init_frcnn, init_rpn, postprocess,
    rpn_forward, sample_labels, sample_rois, softmax_rows, AnchorConfig, Detection, GtBox, HeadConfig,
    ProposalConfig, Proposals, RpnOutput,
};
use crate::loss::{
    frcnn_bbox_var, frcnn_cls_var, pixel_loss_var, rpn_bbox_var, rpn_cls_var, LossTerms, LossWeights,
};
use crate::params::{init_rng, Bindings, Group, GroupSet, ParamStore};
use crate::synthworld::SEGMENTATION_CLASSES;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Plain two-stage detector on the last body map.
    Baseline,
    /// Channel map embedded by a side branch and concatenated onto the
    /// last body map.
    SideBranch,
    /// Aggregated multi-level map, supervised by a channel feature network.
    HyperLearner,
    /// Aggregated map without channel supervision.
    HypernetControl,
    /// Heads fed by the side branch alone; used to pretrain side branches.
    SideOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::SideBranch => "side_branch",
            Mode::HyperLearner => "hyperlearner",
            Mode::HypernetControl => "hypernet_control",
            Mode::SideOnly => "side_only",
        }
    }

    pub fn uses_aggregation(self) -> bool {
        matches!(self, Mode::HyperLearner | Mode::HypernetControl)
    }

    pub fn uses_side_branch(self) -> bool {
        matches!(self, Mode::SideBranch | Mode::SideOnly)
    }

    pub fn uses_cfn(self) -> bool {
        self == Mode::HyperLearner
    }

    pub fn uses_body(self) -> bool {
        self != Mode::SideOnly
    }

    pub fn needs_channel(self) -> bool {
        self.uses_side_branch() || self.uses_cfn()
    }
}

/// Kind and plane count of a channel used as side-branch input or CFN
/// supervisor.
pub fn channel_layout(name: ChannelName) -> Result<(ChannelKind, usize)> {
    Ok(match name {
        ChannelName::Edge | ChannelName::Heatmap => (ChannelKind::Binary, 1),
        ChannelName::Segmentation => (
            ChannelKind::Multiclass {
                class_count: SEGMENTATION_CLASSES,
            },
            1,
        ),
        ChannelName::Disparity => (ChannelKind::Regression, 1),
        ChannelName::Flow => (ChannelKind::Regression, 2),
        ChannelName::Icf => (ChannelKind::Regression, 10),
        ChannelName::RawImage => {
            return Err(Error::Config("the raw image is not an auxiliary channel".into()));
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub mode: Mode,
    pub channel: Option<ChannelName>,
    pub backbone: BackboneConfig,
    pub side_branch: SideBranchConfig,
    pub cfn: CfnConfig,
    pub anchors: AnchorConfig,
    pub heads: HeadConfig,
    pub loss_weights: LossWeights,
    /// Stop gradients through proposal coordinates into the RPN.
    pub stop_proposal_gradient: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Baseline,
            channel: None,
            backbone: BackboneConfig::default(),
            side_branch: SideBranchConfig::default(),
            cfn: CfnConfig::default(),
            anchors: AnchorConfig::default(),
            heads: HeadConfig::default(),
            loss_weights: LossWeights::default(),
            stop_proposal_gradient: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.side_branch.validate()?;
        self.cfn.validate()?;
        self.anchors.validate()?;
        self.heads.validate()?;
        self.loss_weights.validate()?;
        match (self.mode.needs_channel(), self.channel) {
            (true, None) => {
                return Err(Error::Config(format!("mode {} requires a channel", self.mode.as_str())));
            }
            (false, Some(_)) => {
                return Err(Error::Config(format!(
                    "mode {} does not take a channel",
                    self.mode.as_str()
                )));
            }
            (_, Some(c)) => {
                channel_layout(c)?;
            }
            _ => {}
        }
        if self.anchors.stride != self.head_stride() {
            return Err(Error::Config(format!(
                "anchor stride {} differs from the detection map stride {}",
                self.anchors.stride,
                self.head_stride()
            )));
        }
        Ok(())
    }

    pub fn head_stride(&self) -> usize {
        if self.mode.uses_body() {
            self.backbone.max_stride()
        } else {
            8
        }
    }

    /// Supervisor kind and input planes of the configured channel.
    pub fn channel_layout(&self) -> Option<(ChannelKind, usize)> {
        self.channel.and_then(|c| channel_layout(c).ok())
    }

    pub fn fused_channels(&self) -> usize {
        let body = if self.mode.uses_body() {
            self.backbone.last_channels()
        } else {
            0
        };
        let extra = if self.mode.uses_aggregation() {
            self.backbone.aggregated_channels()
        } else if self.mode.uses_side_branch() {
            self.side_branch.output_channels
        } else {
            0
        };
        body + extra
    }

    /// Channels fed into the side branch for the configured channel.
    pub fn side_input_channels(&self) -> usize {
        match self.channel_layout() {
            Some((ChannelKind::Multiclass { class_count }, _)) => class_count,
            Some((_, planes)) => planes,
            None => 0,
        }
    }
}

/// One training or evaluation image.
#[derive(Clone, Debug)]
pub struct Sample {
    /// 3×H×W in [0,1].
    pub image: Tensor,
    /// Annotated pedestrians (class 1) and cyclists (class 2).
    pub gts: Vec<GtBox>,
    /// Side-branch input / CFN supervisor when the mode uses a channel.
    pub channel: Option<ChannelMap>,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Parameter-initialization streams; one per component so that shared
/// components start identically across modes for the same seed.
const STREAM_BODY: u64 = 1;
const STREAM_AGG: u64 = 2;
const STREAM_SIDE: u64 = 3;
const STREAM_CFN: u64 = 4;
const STREAM_RPN: u64 = 5;
const STREAM_FRCNN: u64 = 6;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_side_branch(config, seed, None)
    }

    /// Build a model, taking `side.*` weights from `pretrained` when the
    /// configuration asks for a pretrained side branch.
    pub fn with_side_branch(config: ModelConfig, seed: u64, pretrained: Option<&ParamStore>) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        if config.mode.uses_body() {
            init_body(&mut p, &config.backbone, &mut init_rng(seed, STREAM_BODY))?;
        }
        if config.mode.uses_aggregation() {
            init_aggregation(&mut p, &config.backbone, &mut init_rng(seed, STREAM_AGG))?;
        }
        if config.mode.uses_side_branch() {
            init_side_branch(
                &mut p,
                &config.side_branch,
                config.side_input_channels(),
                &mut init_rng(seed, STREAM_SIDE),
            )?;
            if config.side_branch.init == SideBranchInit::Pretrained {
                let src = pretrained.ok_or_else(|| {
                    Error::Config("pretrained side branch requested without weights".into())
                })?;
                load_group(&mut p, src, Group::SideBranch)?;
            }
        }
        if config.mode.uses_cfn() {
            let (kind, planes) = config.channel_layout().expect("validated");
            init_cfn(
                &mut p,
                &config.cfn,
                config.backbone.aggregated_channels(),
                output_channels(kind, planes),
                &mut init_rng(seed, STREAM_CFN),
            )?;
        }
        let fused = config.fused_channels();
        init_rpn(&mut p, &config.heads, fused, config.anchors.per_cell(), &mut init_rng(seed, STREAM_RPN))?;
        init_frcnn(&mut p, &config.heads, fused, &mut init_rng(seed, STREAM_FRCNN))?;
        Ok(Model { config, params: p })
    }

    pub fn groups(&self) -> GroupSet {
        self.params.groups()
    }

    fn check_sample(&self, s: &Sample, need_channel: bool) -> Result<()> {
        let (c, h, w) = s.image.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("image must have 3 channels, got {}", c)));
        }
        if need_channel {
            let ch = s
                .channel
                .as_ref()
                .ok_or_else(|| Error::Config("sample is missing its channel map".into()))?;
            if Some(ch.name) != self.config.channel {
                return Err(Error::Config(format!(
                    "sample carries a {} map, model expects {}",
                    ch.name.as_str(),
                    self.config.channel.map_or("none", |c| c.as_str())
                )));
            }
            if (ch.height(), ch.width()) != (h, w) {
                return Err(Error::Shape("channel map and image sizes differ".into()));
            }
        }
        Ok(())
    }

    /// Build the shared trunk: body, aggregation / side branch and fusion.
    fn trunk(&self, g: &mut Graph, b: &Bindings, s: &Sample, need_heads: bool, need_cfn: bool) -> Result<Trunk> {
        let cfg = &self.config;
        let mut trunk = Trunk::default();
        let body_last = if cfg.mode.uses_body() {
            let x = g.constant(s.image.map(|v| v - 0.5));
            let maps = forward_body(g, b, &cfg.backbone, x)?;
            if cfg.mode.uses_aggregation() && (need_heads || need_cfn) {
                trunk.agg = Some(aggregate_maps(g, b, &cfg.backbone, &maps)?);
            }
            Some(*maps.last().expect("≥ 2 levels"))
        } else {
            None
        };
        if need_cfn && cfg.mode.uses_cfn() {
            let (kind, _) = cfg.channel_layout().expect("validated");
            let agg = trunk.agg.as_ref().expect("aggregation built");
            trunk.cfn = Some(cfn_forward(g, b, &cfg.cfn, agg, s.size(), kind)?);
        }
        if need_heads {
            let extra = if let Some(agg) = trunk.agg {
                Some(agg.into())
            } else if cfg.mode.uses_side_branch() {
                let input = s.channel.as_ref().expect("checked").network_input();
                let x = g.constant(input);
                Some(side_branch(g, b, &cfg.side_branch, x)?)
            } else {
                None
            };
            trunk.fused = Some(match (body_last, extra) {
                (Some(body), extra) => fuse_for_heads(g, body, extra)?,
                (None, Some(side)) => side,
                (None, None) => unreachable!("a model without body has a side branch"),
            });
        }
        Ok(trunk)
    }

    /// Record the forward pass for the `active` losses on `g`.
    pub fn training_forward(
        &self,
        g: &mut Graph,
        b: &Bindings,
        s: &Sample,
        active: &LossSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<ForwardRecord> {
        let cfg = &self.config;
        self.check_sample(s, cfg.mode.uses_side_branch() || (active.cfn && cfg.mode.uses_cfn()))?;
        let need_rpn = active.rpn_cls || active.rpn_bbox;
        let need_frcnn = active.frcnn_cls || active.frcnn_bbox;
        let need_cfn = active.cfn && cfg.mode.uses_cfn();
        let trunk = self.trunk(g, b, s, need_rpn || need_frcnn, need_cfn)?;
        let mut rec = ForwardRecord::default();
        if need_cfn {
            let sup = s.channel.as_ref().expect("checked");
            rec.terms.cfn = Some(pixel_loss_var(g, trunk.cfn.expect("built"), sup)?);
            rec.cfn_output = trunk.cfn;
        }
        let Some(fused) = trunk.fused else {
            return Ok(rec);
        };
        let (h, w) = s.size();
        let rpn = rpn_forward(g, b, fused)?;
        let (_, fh, fw) = g.value(fused.var).dims3()?;
        let anchors = generate_anchors(&cfg.anchors, fh, fw);
        let gt_boxes: Vec<Box> = s.gts.iter().map(|g| g.bbox).collect();

        if need_rpn {
            let inside: Vec<usize> = (0..anchors.len())
                .filter(|&i| anchors[i].is_inside(w as f64, h as f64))
                .collect();
            let inside_boxes: Vec<Box> = inside.iter().map(|&i| anchors[i]).collect();
            let t = assign_rpn_targets(&inside_boxes, &gt_boxes, cfg.heads.rpn_pos_iou, cfg.heads.rpn_neg_iou);
            let (pos, neg) = sample_labels(&t.labels, cfg.heads.rpn_batch, cfg.heads.rpn_fg_fraction, rng);
            let pos_targets: Vec<[f64; 4]> = pos.iter().map(|&k| t.targets[k]).collect();
            let pos_idx: Vec<usize> = pos.iter().map(|&k| inside[k]).collect();
            let neg_idx: Vec<usize> = neg.iter().map(|&k| inside[k]).collect();
            if active.rpn_cls {
                rec.terms.rpn_cls = Some(rpn_cls_var(g, rpn.logits, &pos_idx, &neg_idx)?);
            }
            if active.rpn_bbox {
                let sampled = pos_idx.len() + neg_idx.len();
                rec.terms.rpn_bbox = Some(rpn_bbox_var(g, rpn.deltas, &pos_idx, &pos_targets, sampled)?);
            }
        }

        if need_frcnn {
            let proposals = self.proposals(g, &rpn, &anchors, (h, w), &cfg.heads.train_proposals)?;
            let sample = sample_rois(&proposals.boxes, &s.gts, &cfg.heads, rng);
            let n = sample.rois.len();
            rec.roi_count = n;
            if n > 0 {
                // RoI coordinates as a function of the RPN outputs.
                let mut rows = Vec::new();
                let from_rpn: Vec<usize> = sample.source.iter().filter_map(|s| *s).collect();
                if !from_rpn.is_empty() {
                    let anchor_rows: Vec<usize> = from_rpn.iter().map(|&p| proposals.anchor_index[p]).collect();
                    let picked = g.gather_rows(rpn.deltas, &anchor_rows)?;
                    let picked_anchors: Vec<Box> = anchor_rows.iter().map(|&a| anchors[a]).collect();
                    let decoded = g.decode_boxes(picked, &picked_anchors, [1.0; 4])?;
                    let clipped = g.clip_boxes(decoded, w as f64, h as f64)?;
                    let coords = if cfg.stop_proposal_gradient {
                        g.stop_gradient(clipped)
                    } else {
                        clipped
                    };
                    rec.proposal_coords = Some(coords);
                    rows.push(g.reshape(coords, &[from_rpn.len(), 4, 1])?);
                }
                let gt_rows: Vec<f64> = sample
                    .rois
                    .iter()
                    .zip(&sample.source)
                    .filter(|(_, s)| s.is_none())
                    .flat_map(|(r, _)| r.to_array())
                    .collect();
                if !gt_rows.is_empty() {
                    let m = gt_rows.len() / 4;
                    rows.push(g.constant(Tensor::new(&[m, 4, 1], gt_rows)?));
                }
                let stacked = g.concat(&rows)?;
                let roi_var = g.reshape(stacked, &[n, 4])?;
                // sample.rois lists positives then negatives; reorder labels
                // to match the stacked order (proposal rows first, then GT rows).
                let order: Vec<usize> = (0..n)
                    .filter(|&i| sample.source[i].is_some())
                    .chain((0..n).filter(|&i| sample.source[i].is_none()))
                    .collect();
                let rois: Vec<Box> = (0..n)
                    .map(|i| Box::from_slice(&g.value(roi_var).data()[4 * i..4 * i + 4]))
                    .collect();
                let labels: Vec<usize> = order.iter().map(|&i| sample.labels[i]).collect();
                let match_boxes: Vec<Box> = order
                    .iter()
                    .enumerate()
                    .map(|(row, &i)| sample.matched[i].map(|k| s.gts[k].bbox).unwrap_or(rois[row]))
                    .collect();
                let pooled = g.roi_pool(fused.var, &rois, fused.stride, cfg.heads.roi_size)?;
                let out = frcnn_forward(g, b, pooled)?;
                if active.frcnn_cls {
                    rec.terms.frcnn_cls = Some(frcnn_cls_var(g, out.logits, &labels)?);
                }
                if active.frcnn_bbox {
                    let targets = g.encode_targets(roi_var, &match_boxes, cfg.heads.bbox_stds)?;
                    rec.terms.frcnn_bbox = Some(frcnn_bbox_var(g, out.deltas, targets, &labels)?);
                }
            } else {
                let zero = g.constant(Tensor::scalar(0.0));
                if active.frcnn_cls {
                    rec.terms.frcnn_cls = Some(zero);
                }
                if active.frcnn_bbox {
                    rec.terms.frcnn_bbox = Some(zero);
                }
            }
        }
        Ok(rec)
    }

    fn proposals(
        &self,
        g: &Graph,
        rpn: &RpnOutput,
        anchors: &[Box],
        size: (usize, usize),
        cfg: &ProposalConfig,
    ) -> Result<Proposals> {
        let logits = g.value(rpn.logits).data();
        let deltas: Vec<[f64; 4]> = g
            .value(rpn.deltas)
            .data()
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        generate_proposals(logits, &deltas, anchors, size, cfg)
    }

    /// Detections (and the channel prediction when the model has a CFN).
    /// Channel input is needed only by side-branch models; the CFN
    /// prediction of a HyperLearner needs none.
    pub fn infer(&self, s: &Sample) -> Result<Inference> {
        self.check_sample(s, self.config.mode.uses_side_branch())?;
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, &GroupSet::new());
        let trunk = self.trunk(&mut g, &b, s, true, self.config.mode.uses_cfn())?;
        let fused = trunk.fused.expect("heads requested");
        let rpn = rpn_forward(&mut g, &b, fused)?;
        let (_, fh, fw) = g.value(fused.var).dims3()?;
        let anchors = generate_anchors(&self.config.anchors, fh, fw);
        let proposals = self.proposals(&g, &rpn, &anchors, s.size(), &self.config.heads.test_proposals)?;
        let detections = if proposals.boxes.is_empty() {
            Vec::new()
        } else {
            let pooled = g.roi_pool(fused.var, &proposals.boxes, fused.stride, self.config.heads.roi_size)?;
            let out = frcnn_forward(&mut g, &b, pooled)?;
            let probs = softmax_rows(g.value(out.logits));
            postprocess(&proposals.boxes, &probs, g.value(out.deltas), s.size(), &self.config.heads)
        };
        let channel = trunk.cfn.map(|v| g.value(v).clone());
        Ok(Inference {
            detections,
            proposals,
            channel,
        })
    }

    /// Side-branch activations for a channel map, without the heads.
    pub fn side_branch_activation(&self, channel: &ChannelMap) -> Result<Tensor> {
        if !self.config.mode.uses_side_branch() {
            return Err(Error::Config("model has no side branch".into()));
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, &GroupSet::new());
        let x = g.constant(channel.network_input());
        let m = side_branch(&mut g, &b, &self.config.side_branch, x)?;
        Ok(g.value(m.var).clone())
    }
}

/// Copy every parameter of `group` from `src` into `dst` (shapes must agree).
pub fn load_group(dst: &mut ParamStore, src: &ParamStore, group: Group) -> Result<()> {
    let names: Vec<String> = dst.iter().filter(|p| p.group == group).map(|p| p.name.clone()).collect();
    for name in names {
        let v = src
            .get(&name)
            .ok_or_else(|| Error::Config(format!("pretrained weights lack `{}`", name)))?;
        dst.set(&name, v.clone())?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default)]
struct Trunk {
    agg: Option<AggregatedActivationMap>,
    cfn: Option<Var>,
    fused: Option<ActivationMap>,
}

/// Which loss terms a pass computes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSet {
    pub cfn: bool,
    pub rpn_cls: bool,
    pub rpn_bbox: bool,
    pub frcnn_cls: bool,
    pub frcnn_bbox: bool,
}

impl LossSet {
    pub fn all() -> Self {
        LossSet {
            cfn: true,
            rpn_cls: true,
            rpn_bbox: true,
            frcnn_cls: true,
            frcnn_bbox: true,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.cfn || self.rpn_cls || self.rpn_bbox || self.frcnn_cls || self.frcnn_bbox)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        for (on, n) in [
            (self.cfn, "cfn"),
            (self.rpn_cls, "rpn_cls"),
            (self.rpn_bbox, "rpn_bbox"),
            (self.frcnn_cls, "frcnn_cls"),
            (self.frcnn_bbox, "frcnn_bbox"),
        ] {
            if on {
                v.push(n);
            }
        }
        v
    }
}

/// Loss terms and intermediate handles from one training pass.
#[derive(Clone, Debug, Default)]
pub struct ForwardRecord {
    pub terms: LossTerms,
    pub cfn_output: Option<Var>,
    /// RoI coordinates decoded from RPN outputs (after the optional stop).
    pub proposal_coords: Option<Var>,
    pub roi_count: usize,
}

impl ForwardRecord {
    /// `(name, var)` for each computed term.
    pub fn named_terms(&self) -> Vec<(&'static str, Var)> {
        let t = &self.terms;
        [
            ("cfn", t.cfn),
            ("rpn_cls", t.rpn_cls),
            ("rpn_bbox", t.rpn_bbox),
            ("frcnn_cls", t.frcnn_cls),
            ("frcnn_bbox", t.frcnn_bbox),
        ]
        .into_iter()
        .filter_map(|(n, v)| v.map(|v| (n, v)))
        .collect()
    }

    pub fn total(&self, g: &mut Graph, w: &LossWeights) -> Option<Var> {
        self.terms.total_var(g, w)
    }
}

#[derive(Clone, Debug)]
pub struct Inference {
    pub detections: Vec<Detection>,
    pub proposals: Proposals,
    /// CFN prediction (probabilities for binary/multiclass kinds).
    pub channel: Option<Tensor>,
}

/// Fraction of pixels whose predicted class (multiclass argmax, or binary
/// threshold at 0.5) equals the supervisor's.
pub fn pixel_accuracy(pred: &Tensor, truth: &ChannelMap) -> Result<f64> {
    let (_, h, w) = truth.data.dims3()?;
    let n = h * w;
    let (pc, ph, pw) = pred.dims3()?;
    if (ph, pw) != (h, w) {
        return Err(Error::Shape("prediction and supervisor sizes differ".into()));
    }
    let p = pred.data();
    let t = truth.data.data();
    let correct = match truth.kind {
        ChannelKind::Binary => (0..n).filter(|&i| (p[i] > 0.5) == (t[i] > 0.5)).count(),
        ChannelKind::Multiclass { .. } => (0..n)
            .filter(|&i| {
                let best = (0..pc)
                    .max_by(|&a, &b| p[a * n + i].total_cmp(&p[b * n + i]).then(b.cmp(&a)))
                    .expect("≥ 1 class");
                best as f64 == t[i]
            })
            .count(),
        ChannelKind::Regression => {
            return Err(Error::Config("pixel accuracy is undefined for regression maps".into()));
        }
    };
    Ok(correct as f64 / n as f64)
}
