mod common;

use common::*;
use hyperlearner::autograd::Graph;
use hyperlearner::backbone::SideBranchInit;
use hyperlearner::channels::ChannelName;
use hyperlearner::error::Error;
use hyperlearner::model::{LossSet, Mode, Model};
use hyperlearner::params::{Group, GroupSet};
use hyperlearner::tensor::Tensor;
use hyperlearner::trainer::*;

fn set(gs: &[Group]) -> GroupSet {
    gs.iter().copied().collect()
}

#[test]
fn hyperlearner_plan_has_four_stages() {
    let plan = build_stage_plan(Mode::HyperLearner, &TrainOptions::default());
    let names: Vec<StageName> = plan.iter().map(|s| s.name).collect();
    assert_eq!(names, vec![StageName::Cfn, StageName::Rpn, StageName::Frcnn, StageName::Joint]);
    assert_eq!(plan[0].trainable_groups, set(&[Group::AggregationBranches, Group::Cfn]));
    assert_eq!(plan[1].trainable_groups, set(&[Group::Rpn]));
    assert_eq!(plan[2].trainable_groups, set(&[Group::Frcnn]));
    assert_eq!(plan[3].active_losses, LossSet::all());
    assert!(plan[0].active_losses.cfn && !plan[0].active_losses.rpn_cls);
}

#[test]
fn baseline_builds_no_channel_components() {
    let m = Model::new(toy_model(Mode::Baseline), 1).unwrap();
    let groups = m.groups();
    assert!(!groups.contains(&Group::Cfn));
    assert!(!groups.contains(&Group::SideBranch));
    assert!(!groups.contains(&Group::AggregationBranches));
    assert!(m.params.iter().all(|p| !p.name.starts_with("cfn.") && !p.name.starts_with("side.")));
    let plan = build_stage_plan(Mode::Baseline, &TrainOptions::default());
    assert!(plan.iter().all(|s| !s.active_losses.cfn));
}

#[test]
fn zero_iterations_leave_the_model_unchanged() {
    let data = toy_samples(2, Some(ChannelName::Segmentation));
    let mut m = Model::new(toy_model(Mode::HyperLearner), 2).unwrap();
    let before = m.params.clone();
    let opts = toy_options([0, 0, 0, 0]);
    let plan = build_stage_plan(Mode::HyperLearner, &opts);
    let log = train_stage(&mut m, &data, &plan[0], &opts).unwrap();
    assert!(log.is_empty());
    assert_eq!(m.params, before);
}

#[test]
fn rpn_stage_freezes_body_and_cfn() {
    let data = toy_samples(3, Some(ChannelName::Segmentation));
    let mut m = Model::new(toy_model(Mode::HyperLearner), 3).unwrap();
    let frozen = set(&[Group::BodyPretrained, Group::Cfn, Group::AggregationBranches, Group::Frcnn]);
    let before = m.params.hash(&frozen);
    let rpn = m.params.hash(&set(&[Group::Rpn]));
    let opts = toy_options([0, 5, 0, 0]);
    let plan = build_stage_plan(Mode::HyperLearner, &opts);
    train_stage(&mut m, &data, &plan[1], &opts).unwrap();
    assert_eq!(m.params.hash(&frozen), before);
    assert_ne!(m.params.hash(&set(&[Group::Rpn])), rpn);
}

#[test]
fn cfn_stage_reduces_the_channel_loss() {
    let data = toy_samples(50, Some(ChannelName::Segmentation));
    let mut cfg = toy_model(Mode::HyperLearner);
    cfg.backbone.branch_init = hyperlearner::params::LayerInit::He;
    cfg.cfn.init = hyperlearner::params::LayerInit::He;
    let mut m = Model::new(cfg, 4).unwrap();
    let opts = TrainOptions {
        learning_rates: [0.05, 0.0, 0.0, 0.0],
        clip_norm: Some(10.0),
        ..toy_options([300, 0, 0, 0])
    };
    let plan = build_stage_plan(Mode::HyperLearner, &opts);
    let log = train_stage(&mut m, &data, &plan[0], &opts).unwrap();
    assert_eq!(log.len(), 300);
    let mean = |es: &[LogEntry]| es.iter().map(|e| e.terms["cfn"]).sum::<f64>() / es.len() as f64;
    let (first, last) = (mean(&log[..25]), mean(&log[275..]));
    assert!(last < first, "L_cfn {} → {}", first, last);
}

#[test]
fn non_finite_loss_names_the_term() {
    let data = toy_samples(1, Some(ChannelName::Segmentation));
    let mut m = Model::new(toy_model(Mode::HyperLearner), 5).unwrap();
    let shape = m.params.get("cfn.head.b").unwrap().shape().to_vec();
    m.params.set("cfn.head.b", Tensor::full(&shape, f64::NAN)).unwrap();
    let opts = toy_options([2, 0, 0, 0]);
    let plan = build_stage_plan(Mode::HyperLearner, &opts);
    match train_stage(&mut m, &data, &plan[0], &opts) {
        Err(Error::NonFiniteLoss { term, stage, iteration }) => {
            assert_eq!(term, "cfn");
            assert_eq!(stage, "cfn");
            assert_eq!(iteration, 0);
        }
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|l| l.len())),
    }
}

#[test]
fn proposal_gradient_flows_only_when_unstopped() {
    let data = toy_samples(2, Some(ChannelName::Segmentation));
    let mut cfg = toy_model(Mode::HyperLearner);
    let stopped = Model::new(cfg.clone(), 6).unwrap();
    cfg.stop_proposal_gradient = false;
    let open = Model::new(cfg, 6).unwrap();
    let losses = LossSet {
        frcnn_bbox: true,
        ..LossSet::default()
    };
    let mut any_open = 0.0f64;
    for s in &data {
        assert_eq!(proposal_path_gradient(&stopped, s, &losses, &mut rng(1)).unwrap(), 0.0);
        any_open = any_open.max(proposal_path_gradient(&open, s, &losses, &mut rng(1)).unwrap());
    }
    assert!(any_open > 0.0);
}

#[test]
fn shared_features_still_receive_detection_gradients() {
    let data = toy_samples(2, Some(ChannelName::Segmentation));
    let m = Model::new(toy_model(Mode::HyperLearner), 7).unwrap();
    let losses = LossSet {
        frcnn_cls: true,
        frcnn_bbox: true,
        ..LossSet::default()
    };
    let mut body = 0.0f64;
    let mut agg = 0.0f64;
    for s in &data {
        let mut g = Graph::new();
        let b = m.params.bind(&mut g, &all_groups());
        let rec = m.training_forward(&mut g, &b, s, &losses, &mut rng(2)).unwrap();
        let total = rec.total(&mut g, &m.config.loss_weights).unwrap();
        let grads = g.backward(total);
        for (name, var) in b.iter() {
            let worst = grads.get(var).map_or(0.0, |t| t.data().iter().fold(0.0f64, |a, v| a.max(v.abs())));
            if name.starts_with("body.") {
                body = body.max(worst);
            } else if name.starts_with("agg.") {
                agg = agg.max(worst);
            }
        }
    }
    assert!(body > 0.0 && agg > 0.0);
}

#[test]
fn pretrained_side_branch_changes_activations() {
    let data = toy_samples(4, Some(ChannelName::Segmentation));
    let mut cfg = toy_model(Mode::SideBranch);
    let opts = toy_options([0, 4, 4, 0]);
    let side = pretrain_side_branch(&cfg, &data, &opts).unwrap();
    assert!(side.iter().all(|p| p.group == Group::SideBranch));

    let random = Model::new(cfg.clone(), 8).unwrap();
    cfg.side_branch.init = SideBranchInit::Pretrained;
    let pre = Model::with_side_branch(cfg, 8, Some(&side)).unwrap();
    let channel = data[0].channel.as_ref().unwrap();
    let norm = |t: Tensor| t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let a = norm(random.side_branch_activation(channel).unwrap());
    let b = norm(pre.side_branch_activation(channel).unwrap());
    assert_ne!(a, b);

    let dets = pre.infer(&data[0]).unwrap().detections;
    assert!(dets.iter().all(|d| d.score.is_finite()));
}

#[test]
fn training_is_reproducible() {
    let data = toy_samples(3, Some(ChannelName::Segmentation));
    let opts = toy_options([2, 2, 2, 2]);
    let run = || train(Model::new(toy_model(Mode::HyperLearner), 9).unwrap(), &data, &opts).unwrap();
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a.params.hash_all(), b.params.hash_all());
    assert_eq!(la, lb);
}
