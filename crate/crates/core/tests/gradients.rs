mod common;

use common::*;
use hyperlearner::backbone::*;
use hyperlearner::cfn::{cfn_forward, init_cfn, CfnConfig};
use hyperlearner::channels::ChannelKind;
use hyperlearner::gradcheck::{assert_gradients, check_gradients, random_tensor, weighted_reduce};
use hyperlearner::heads::*;
use hyperlearner::loss::*;
use hyperlearner::params::{init_rng, LayerInit, ParamStore};
use hyperlearner::tensor::Tensor;

const TOL: f64 = 1e-4;

fn assert_report(r: &ParamGradReport) {
    assert!(r.checked > 0, "nothing checked");
    assert!(r.max_abs_grad > 1e-8, "vacuous check: gradients vanish");
    assert!(r.max_rel_error < TOL, "relative error {:.3e} at {}", r.max_rel_error, r.worst);
}

fn backbone_cfg() -> BackboneConfig {
    BackboneConfig {
        aggregation_target_level: 1,
        branch_init: LayerInit::He,
        ..tiny_backbone()
    }
}

fn backbone_store(cfg: &BackboneConfig) -> ParamStore {
    let mut s = ParamStore::new();
    let mut r = init_rng(8, 0);
    init_body(&mut s, cfg, &mut r).unwrap();
    init_aggregation(&mut s, cfg, &mut r).unwrap();
    jitter_biases(&mut s, 1);
    s
}

#[test]
fn body_gradients() {
    let cfg = backbone_cfg();
    let s = backbone_store(&cfg);
    let x = random_tensor(&[3, 16, 16], 1, 1.0);
    let r = check_param_gradients(&s, &["body."], 8, |g, b| {
        let xv = g.constant(x.clone());
        let maps = forward_body(g, b, &cfg, xv).unwrap();
        weighted_reduce(g, maps.last().unwrap().var, 2)
    });
    assert_report(&r);
}

#[test]
fn aggregation_gradients() {
    let cfg = backbone_cfg();
    let s = backbone_store(&cfg);
    let x = random_tensor(&[3, 16, 16], 3, 1.0);
    let r = check_param_gradients(&s, &["body.", "agg."], 6, |g, b| {
        let xv = g.constant(x.clone());
        let maps = forward_body(g, b, &cfg, xv).unwrap();
        let agg = aggregate_maps(g, b, &cfg, &maps).unwrap();
        weighted_reduce(g, agg.var, 4)
    });
    assert_report(&r);
}

#[test]
fn aggregation_input_gradients() {
    let cfg = backbone_cfg();
    let s = backbone_store(&cfg);
    let report = check_gradients(&[random_tensor(&[3, 8, 8], 5, 1.0)], |g, v| {
        let b = s.bind(g, &Default::default());
        let maps = forward_body(g, &b, &cfg, v[0]).unwrap();
        let agg = aggregate_maps(g, &b, &cfg, &maps).unwrap();
        weighted_reduce(g, agg.var, 6)
    });
    assert_gradients(&report, TOL);
}

#[test]
fn side_branch_gradients() {
    let cfg = SideBranchConfig {
        hidden_channels: 3,
        output_channels: 4,
        ..SideBranchConfig::default()
    };
    let mut s = ParamStore::new();
    init_side_branch(&mut s, &cfg, 2, &mut init_rng(9, 0)).unwrap();
    jitter_biases(&mut s, 2);
    let x = random_tensor(&[2, 16, 16], 7, 1.0);
    let r = check_param_gradients(&s, &["side."], 10, |g, b| {
        let xv = g.constant(x.clone());
        let y = side_branch(g, b, &cfg, xv).unwrap();
        weighted_reduce(g, y.var, 8)
    });
    assert_report(&r);

    let report = check_gradients(&[x.clone()], |g, v| {
        let b = s.bind(g, &Default::default());
        let y = side_branch(g, &b, &cfg, v[0]).unwrap();
        weighted_reduce(g, y.var, 8)
    });
    assert_gradients(&report, TOL);
}

fn cfn_case(kind: ChannelKind, out: usize, supervisor: Tensor) {
    let bcfg = backbone_cfg();
    let ccfg = CfnConfig {
        width: 3,
        init: LayerInit::He,
        ..CfnConfig::default()
    };
    let mut s = backbone_store(&bcfg);
    init_cfn(&mut s, &ccfg, bcfg.aggregated_channels(), out, &mut init_rng(10, 0)).unwrap();
    jitter_biases(&mut s, 3);
    let x = random_tensor(&[3, 16, 16], 11, 1.0);
    let r = check_param_gradients(&s, &["cfn.", "agg."], 8, |g, b| {
        let xv = g.constant(x.clone());
        let maps = forward_body(g, b, &bcfg, xv).unwrap();
        let agg = aggregate_maps(g, b, &bcfg, &maps).unwrap();
        let c = cfn_forward(g, b, &ccfg, &agg, (16, 16), kind).unwrap();
        match kind {
            ChannelKind::Binary => balanced_bce_var(g, c, &supervisor).unwrap(),
            ChannelKind::Multiclass { .. } => pixel_ce_var(g, c, &supervisor).unwrap(),
            ChannelKind::Regression => pixel_mse_var(g, c, &supervisor).unwrap(),
        }
    });
    assert_report(&r);
}

#[test]
fn cfn_gradients_binary() {
    let s = Tensor::from_fn(&[1, 16, 16], |i| ((i / 5) % 2) as f64);
    cfn_case(ChannelKind::Binary, 1, s);
}

#[test]
fn cfn_gradients_multiclass() {
    let s = Tensor::from_fn(&[1, 16, 16], |i| ((i / 7) % 4) as f64);
    cfn_case(ChannelKind::Multiclass { class_count: 4 }, 4, s);
}

#[test]
fn cfn_gradients_regression() {
    cfn_case(ChannelKind::Regression, 2, random_tensor(&[2, 16, 16], 12, 2.0));
}

#[test]
fn rpn_head_gradients() {
    let cfg = HeadConfig {
        rpn_channels: 4,
        ..HeadConfig::default()
    };
    let mut s = ParamStore::new();
    init_rpn(&mut s, &cfg, 3, 2, &mut init_rng(13, 0)).unwrap();
    // scale the small default init up so gradients are well above the floor
    for name in ["rpn.conv.w", "rpn.cls.w", "rpn.bbox.w"] {
        let t = s.get(name).unwrap().map(|v| v * 30.0);
        s.set(name, t).unwrap();
    }
    let x = random_tensor(&[3, 4, 4], 14, 1.0);
    let r = check_param_gradients(&s, &["rpn."], 12, |g, b| {
        let fused = ActivationMap {
            var: g.constant(x.clone()),
            stride: 8,
        };
        let out = rpn_forward(g, b, fused).unwrap();
        let cls = rpn_cls_var(g, out.logits, &[0, 5, 9], &[1, 2, 20, 31]).unwrap();
        let targets = [[0.3, -0.2, 0.5, 0.1], [-0.4, 0.2, 0.0, 0.7], [0.05, 0.05, -0.3, 0.2]];
        let bbox = rpn_bbox_var(g, out.deltas, &[0, 5, 9], &targets, 7).unwrap();
        g.weighted_sum(&[(cls, 1.0), (bbox, 1.0)])
    });
    assert_report(&r);
}

#[test]
fn frcnn_head_gradients() {
    let cfg = HeadConfig {
        fc_width: 5,
        roi_size: 2,
        ..HeadConfig::default()
    };
    let mut s = ParamStore::new();
    init_frcnn(&mut s, &cfg, 2, &mut init_rng(15, 0)).unwrap();
    for p in s.clone().iter() {
        s.set(&p.name, p.value.map(|v| v * 40.0)).unwrap();
    }
    let feats = random_tensor(&[2, 6, 6], 16, 1.0);
    let rois = [
        hyperlearner::boxes::Box::new(2.0, 3.0, 30.0, 40.0),
        hyperlearner::boxes::Box::new(10.0, 0.0, 44.0, 20.0),
        hyperlearner::boxes::Box::new(0.0, 0.0, 47.0, 47.0),
    ];
    let targets = random_tensor(&[3, 4], 17, 0.5);
    let r = check_param_gradients(&s, &["frcnn."], 12, |g, b| {
        let f = g.constant(feats.clone());
        let pooled = g.roi_pool(f, &rois, 8, 2).unwrap();
        let out = frcnn_forward(g, b, pooled).unwrap();
        let labels = [1, 0, 2];
        let cls = frcnn_cls_var(g, out.logits, &labels).unwrap();
        let t = g.constant(targets.clone());
        let bbox = frcnn_bbox_var(g, out.deltas, t, &labels).unwrap();
        g.weighted_sum(&[(cls, 1.0), (bbox, 1.0)])
    });
    assert_report(&r);

    // the pooled features feed back into the body
    let report = check_gradients(&[feats.clone()], |g, v| {
        let b = s.bind(g, &Default::default());
        let pooled = g.roi_pool(v[0], &rois, 8, 2).unwrap();
        let out = frcnn_forward(g, &b, pooled).unwrap();
        let cls = frcnn_cls_var(g, out.logits, &[1, 0, 2]).unwrap();
        let d = weighted_reduce(g, out.deltas, 18);
        g.weighted_sum(&[(cls, 1.0), (d, 1.0)])
    });
    assert_gradients(&report, TOL);
}

#[test]
fn pixel_loss_input_gradients() {
    let s = Tensor::from_fn(&[1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
    let c = random_tensor(&[1, 4, 4], 19, 0.4).map(|v| v + 0.5);
    assert_gradients(&check_gradients(&[c], |g, v| balanced_bce_var(g, v[0], &s).unwrap()), TOL);

    let labels = Tensor::from_fn(&[1, 3, 3], |i| (i % 3) as f64);
    let logits = random_tensor(&[3, 3, 3], 20, 2.0);
    assert_gradients(
        &check_gradients(&[logits], |g, v| {
            let p = g.softmax_channels(v[0]);
            pixel_ce_var(g, p, &labels).unwrap()
        }),
        TOL,
    );

    let target = random_tensor(&[2, 3, 3], 21, 1.0);
    assert_gradients(
        &check_gradients(&[random_tensor(&[2, 3, 3], 22, 1.0)], |g, v| pixel_mse_var(g, v[0], &target).unwrap()),
        TOL,
    );
}

#[test]
fn head_loss_input_gradients() {
    let logits = random_tensor(&[12, 1], 23, 3.0);
    assert_gradients(&check_gradients(&[logits], |g, v| rpn_cls_var(g, v[0], &[1, 4], &[0, 2, 7, 11]).unwrap()), TOL);

    let deltas = random_tensor(&[6, 4], 24, 1.0);
    let t = [[0.5, 0.5, 0.5, 0.5], [-1.0, 0.3, 0.2, -0.1]];
    assert_gradients(&check_gradients(&[deltas], |g, v| rpn_bbox_var(g, v[0], &[1, 3], &t, 5).unwrap()), TOL);

    let cls = random_tensor(&[4, 3], 25, 2.0);
    assert_gradients(&check_gradients(&[cls], |g, v| frcnn_cls_var(g, v[0], &[0, 1, 2, 1]).unwrap()), TOL);

    let d = random_tensor(&[4, 12], 26, 2.0);
    let tg = random_tensor(&[4, 4], 27, 2.0);
    assert_gradients(
        &check_gradients(&[d, tg], |g, v| frcnn_bbox_var(g, v[0], v[1], &[2, 0, 1, 1]).unwrap()),
        TOL,
    );
}

#[test]
fn smooth_l1_derivative_matches_differences() {
    for &beta in &[1.0 / 9.0, 1.0] {
        for &x in &[-2.0, -0.05, 0.03, 0.5, 3.0] {
            let h = 1e-6;
            let numeric = (smooth_l1(x + h, beta).0 - smooth_l1(x - h, beta).0) / (2.0 * h);
            assert!((smooth_l1(x, beta).1 - numeric).abs() < 1e-6);
        }
    }
}
