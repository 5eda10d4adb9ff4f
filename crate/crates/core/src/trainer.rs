//! Multi-stage training with per-stage parameter freezing, SGD with momentum
//! and resumable checkpoints.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Graph;
use crate::backbone::SideBranchInit;
use crate::error::{Error, Result};
use crate::model::{LossSet, Mode, Model, ModelConfig, Sample};
use crate::params::{Group, GroupSet, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Cfn,
    Rpn,
    Frcnn,
    Joint,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Cfn => "cfn",
            StageName::Rpn => "rpn",
            StageName::Frcnn => "frcnn",
            StageName::Joint => "joint",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: StageName,
    pub trainable_groups: GroupSet,
    pub active_losses: LossSet,
    pub iterations: usize,
    pub learning_rate: f64,
}

impl StageSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trainable_groups.is_empty() {
            return Err(Error::Config(format!("stage {} trains no group", self.name)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("stage {} needs a positive learning rate", self.name)));
        }
        if self.active_losses.is_empty() {
            return Err(Error::Config(format!("stage {} has no active loss", self.name)));
        }
        let l = &self.active_losses;
        for (group, active) in [
            (Group::Cfn, l.cfn),
            (Group::Rpn, l.rpn_cls || l.rpn_bbox),
            (Group::Frcnn, l.frcnn_cls || l.frcnn_bbox),
        ] {
            if self.trainable_groups.contains(&group) && !active {
                return Err(Error::Config(format!(
                    "stage {} trains {} without its loss",
                    self.name, group
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub seed: u64,
    /// Iterations of the cfn, rpn, frcnn and joint stages.
    pub iterations: [usize; 4],
    pub learning_rates: [f64; 4],
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescale the gradient when its global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            seed: 0,
            iterations: [1000; 4],
            learning_rates: [1e-2, 1e-2, 1e-2, 1e-3],
            momentum: 0.9,
            weight_decay: 0.0,
            clip_norm: None,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be finite and ≥ 0".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config("clip norm must be positive".into()));
            }
        }
        Ok(())
    }
}

fn losses(cfn: bool, rpn: bool, frcnn: bool) -> LossSet {
    LossSet {
        cfn,
        rpn_cls: rpn,
        rpn_bbox: rpn,
        frcnn_cls: frcnn,
        frcnn_bbox: frcnn,
    }
}

/// Stage schedule for `mode`. Models with a CFN get the four stages
/// cfn → rpn → frcnn → joint; the others skip the cfn stage. Randomly
/// initialised feature groups (side branch, uncovered aggregation branches)
/// train alongside the heads so they never stay at their initial values.
pub fn build_stage_plan(mode: Mode, opts: &TrainOptions) -> Vec<StageSpec> {
    let set = |gs: &[Group]| gs.iter().copied().collect::<GroupSet>();
    let stage = |name: StageName, groups: GroupSet, active: LossSet| {
        let i = name.index() as usize;
        StageSpec {
            name,
            trainable_groups: groups,
            active_losses: active,
            iterations: opts.iterations[i],
            learning_rate: opts.learning_rates[i],
        }
    };
    let feature_extra: Vec<Group> = match mode {
        Mode::SideBranch | Mode::SideOnly => vec![Group::SideBranch],
        Mode::HypernetControl => vec![Group::AggregationBranches],
        _ => Vec::new(),
    };
    let with = |head: Group, extra: &[Group]| {
        let mut g = set(extra);
        g.insert(head);
        g
    };
    let mut plan = Vec::new();
    if mode.uses_cfn() {
        plan.push(stage(
            StageName::Cfn,
            set(&[Group::AggregationBranches, Group::Cfn]),
            losses(true, false, false),
        ));
    }
    plan.push(stage(
        StageName::Rpn,
        with(Group::Rpn, &feature_extra),
        losses(false, true, false),
    ));
    let frcnn_extra: Vec<Group> = feature_extra
        .iter()
        .copied()
        .filter(|&g| g == Group::SideBranch)
        .collect();
    plan.push(stage(
        StageName::Frcnn,
        with(Group::Frcnn, &frcnn_extra),
        losses(false, false, true),
    ));
    let mut joint: GroupSet = Group::ALL.into_iter().collect();
    if !mode.uses_body() {
        joint.remove(&Group::BodyPretrained);
    }
    if !mode.uses_aggregation() {
        joint.remove(&Group::AggregationBranches);
    }
    if !mode.uses_side_branch() {
        joint.remove(&Group::SideBranch);
    }
    if !mode.uses_cfn() {
        joint.remove(&Group::Cfn);
    }
    plan.push(stage(StageName::Joint, joint, losses(mode.uses_cfn(), true, true)));
    plan
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: StageName,
    pub iteration: usize,
    pub sample: usize,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

/// Position in the stage plan.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub stage: usize,
    pub iteration: usize,
}

/// Serializable state of a [`ChaCha8Rng`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue a run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub options: TrainOptions,
    pub plan: Vec<StageSpec>,
    pub fingerprint: String,
    pub params: ParamStore,
    pub velocity: BTreeMap<String, Tensor>,
    pub rng: RngState,
    pub cursor: Cursor,
    pub log: Vec<LogEntry>,
}

/// SHA-256 of the model configuration, options, plan and a caller-supplied
/// salt (typically a dataset digest).
pub fn fingerprint(config: &ModelConfig, opts: &TrainOptions, plan: &[StageSpec], salt: &str) -> String {
    let json = serde_json::to_string(&(config, opts, plan, salt)).expect("plain data serializes");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{:02x}", b))
        .collect()
}

const STREAM_TRAIN: u64 = 0x7472;
const STREAM_ORDER: u64 = 0x6f72;

pub struct Trainer {
    model: Model,
    opts: TrainOptions,
    plan: Vec<StageSpec>,
    fingerprint: String,
    velocity: BTreeMap<String, Tensor>,
    rng: ChaCha8Rng,
    cursor: Cursor,
    log: Vec<LogEntry>,
}

impl Trainer {
    pub fn new(model: Model, plan: Vec<StageSpec>, opts: TrainOptions, salt: &str) -> Result<Self> {
        opts.validate()?;
        let groups = model.groups();
        for spec in &plan {
            spec.validate()?;
            if let Some(g) = spec.trainable_groups.iter().find(|g| !groups.contains(g)) {
                return Err(Error::Config(format!("stage {} trains {}, absent from the model", spec.name, g)));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(STREAM_TRAIN);
        Ok(Trainer {
            fingerprint: fingerprint(&model.config, &opts, &plan, salt),
            model,
            opts,
            plan,
            velocity: BTreeMap::new(),
            rng,
            cursor: Cursor::default(),
            log: Vec::new(),
        })
    }

    /// Continue from `ckpt`; the fingerprint of the supplied configuration
    /// must match the stored one.
    pub fn resume(ckpt: Checkpoint, config: &ModelConfig, opts: &TrainOptions, salt: &str) -> Result<Self> {
        let plan = ckpt.plan;
        let expected = fingerprint(config, opts, &plan, salt);
        if expected != ckpt.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected,
                found: ckpt.fingerprint,
            });
        }
        let model = Model {
            config: ckpt.config,
            params: ckpt.params,
        };
        let mut t = Trainer::new(model, plan, ckpt.options, salt)?;
        t.velocity = ckpt.velocity;
        t.rng = ckpt.rng.restore();
        t.cursor = ckpt.cursor;
        t.log = ckpt.log;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.config.clone(),
            options: self.opts.clone(),
            plan: self.plan.clone(),
            fingerprint: self.fingerprint.clone(),
            params: self.model.params.clone(),
            velocity: self.velocity.clone(),
            rng: RngState::capture(&self.rng),
            cursor: self.cursor,
            log: self.log.clone(),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn plan(&self) -> &[StageSpec] {
        &self.plan
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn cursor(&self) -> Cursor {
        self.cursor
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn is_finished(&self) -> bool {
        self.cursor.stage >= self.plan.len()
    }

    pub fn into_parts(self) -> (Model, Vec<LogEntry>) {
        (self.model, self.log)
    }

    fn normalize_cursor(&mut self) {
        while self.cursor.stage < self.plan.len() && self.cursor.iteration >= self.plan[self.cursor.stage].iterations {
            self.cursor.stage += 1;
            self.cursor.iteration = 0;
            self.velocity.clear();
        }
    }

    /// Sample index for the current iteration: a fresh permutation of the
    /// dataset per (stage, epoch).
    fn sample_index(&self, n: usize) -> usize {
        let epoch = self.cursor.iteration / n;
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed);
        rng.set_stream(STREAM_ORDER ^ (self.plan[self.cursor.stage].name.index() << 32) ^ ((epoch as u64) << 40));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        perm[self.cursor.iteration % n]
    }

    /// Run at most `max_steps` iterations (all remaining when `None`).
    /// Returns whether the plan is complete.
    pub fn run(&mut self, data: &[Sample], max_steps: Option<usize>) -> Result<bool> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut steps = 0;
        loop {
            self.normalize_cursor();
            if self.is_finished() {
                return Ok(true);
            }
            if max_steps.is_some_and(|m| steps >= m) {
                return Ok(false);
            }
            self.step(data)?;
            steps += 1;
        }
    }

    fn step(&mut self, data: &[Sample]) -> Result<()> {
        let spec = self.plan[self.cursor.stage].clone();
        let idx = self.sample_index(data.len());
        let mut g = Graph::new();
        let b = self.model.params.bind(&mut g, &spec.trainable_groups);
        let rec = self
            .model
            .training_forward(&mut g, &b, &data[idx], &spec.active_losses, &mut self.rng)?;
        let mut terms = BTreeMap::new();
        for (name, v) in rec.named_terms() {
            let value = g.value(v).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    term: name.to_string(),
                    stage: spec.name.to_string(),
                    iteration: self.cursor.iteration,
                });
            }
            terms.insert(name.to_string(), value);
        }
        let total_var = rec
            .total(&mut g, &self.model.config.loss_weights)
            .ok_or_else(|| Error::Config(format!("stage {} computed no loss", spec.name)))?;
        let total = g.value(total_var).data()[0];
        let mut grads = g.backward(total_var);

        let mut updates: Vec<(String, Tensor)> = Vec::new();
        for (name, var) in b.iter() {
            let group = Group::of(name).expect("stored names carry a group");
            if !spec.trainable_groups.contains(&group) {
                continue;
            }
            if let Some(grad) = grads.take(var) {
                updates.push((name.to_string(), grad));
            }
        }
        let scale = match self.opts.clip_norm {
            Some(c) => {
                let norm = updates.iter().map(|(_, t)| t.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (mu, wd, lr) = (self.opts.momentum, self.opts.weight_decay, spec.learning_rate);
        for (name, grad) in updates {
            let w = self.model.params.get_mut(&name).expect("bound parameter exists");
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| Tensor::zeros(w.shape()));
            for ((vi, wi), gi) in v.data_mut().iter_mut().zip(w.data_mut().iter_mut()).zip(grad.data()) {
                *vi = mu * *vi + scale * gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
        self.log.push(LogEntry {
            stage: spec.name,
            iteration: self.cursor.iteration,
            sample: idx,
            total,
            terms,
        });
        self.cursor.iteration += 1;
        Ok(())
    }
}

/// Train a single stage starting from `model`; returns the stage log.
pub fn train_stage(model: &mut Model, data: &[Sample], spec: &StageSpec, opts: &TrainOptions) -> Result<Vec<LogEntry>> {
    let mut t = Trainer::new(model.clone(), vec![spec.clone()], opts.clone(), "")?;
    t.run(data, None)?;
    let (m, log) = t.into_parts();
    *model = m;
    Ok(log)
}

/// Train every stage of the plan for `model.config.mode`.
pub fn train(model: Model, data: &[Sample], opts: &TrainOptions) -> Result<(Model, Vec<LogEntry>)> {
    let plan = build_stage_plan(model.config.mode, opts);
    let mut t = Trainer::new(model, plan, opts.clone(), "")?;
    t.run(data, None)?;
    Ok(t.into_parts())
}

/// Train a detector whose heads see only the side-branch embedding of the
/// configured channel and return its `side.*` weights.
pub fn pretrain_side_branch(config: &ModelConfig, data: &[Sample], opts: &TrainOptions) -> Result<ParamStore> {
    let mut cfg = config.clone();
    cfg.mode = Mode::SideOnly;
    cfg.side_branch.init = SideBranchInit::Random;
    cfg.anchors.stride = 8;
    let model = Model::new(cfg, opts.seed)?;
    let (model, _) = train(model, data, opts)?;
    let mut side = ParamStore::new();
    for p in model.params.iter().filter(|p| p.group == Group::SideBranch) {
        side.insert(&p.name, p.value.clone())?;
    }
    Ok(side)
}

/// Largest absolute gradient reaching RPN parameters from the non-RPN terms
/// of `losses`. The FRCNN losses depend on RPN weights only through the
/// proposal coordinates, so this measures that path alone.
pub fn proposal_path_gradient(model: &Model, sample: &Sample, losses: &LossSet, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut active = *losses;
    active.rpn_cls = false;
    active.rpn_bbox = false;
    if active.is_empty() {
        return Ok(0.0);
    }
    let all: GroupSet = Group::ALL.into_iter().collect();
    let mut g = Graph::new();
    let b = model.params.bind(&mut g, &all);
    let rec = model.training_forward(&mut g, &b, sample, &active, rng)?;
    let Some(total) = rec.total(&mut g, &model.config.loss_weights) else {
        return Ok(0.0);
    };
    let grads = g.backward(total);
    let mut worst = 0.0f64;
    for (name, var) in b.iter() {
        if Group::of(name) == Some(Group::Rpn) {
            if let Some(t) = grads.get(var) {
                worst = t.data().iter().fold(worst, |m, v| m.max(v.abs()));
            }
        }
    }
    Ok(worst)
}
