mod common;

use common::*;
use hyperlearner::autograd::Graph;
use hyperlearner::backbone::ActivationMap;
use hyperlearner::boxes::{decode_box_clamped, Box};
use hyperlearner::gradcheck::random_tensor;
use hyperlearner::heads::*;
use hyperlearner::params::{init_rng, GroupSet, ParamStore};
use hyperlearner::tensor::Tensor;

#[test]
fn anchors_form_a_stride_lattice() {
    let cfg = AnchorConfig {
        stride: 16,
        ..AnchorConfig::default()
    };
    let per = cfg.scales.len() * cfg.ratios.len();
    let a = generate_anchors(&cfg, 3, 5);
    assert_eq!(a.len(), 3 * 5 * per);
    for i in 0..3 {
        for j in 0..5 {
            for k in 0..per {
                let (cx, cy) = a[(i * 5 + j) * per + k].center();
                assert!((cx - (8.0 + 16.0 * j as f64)).abs() < 1e-9);
                assert!((cy - (8.0 + 16.0 * i as f64)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn best_anchor_is_positive_even_below_threshold() {
    let gt = Box::new(0.0, 0.0, 10.0, 10.0);
    let anchors = [
        Box::new(0.0, 0.0, 10.0, 20.0),  // IoU 0.5
        Box::new(5.0, 0.0, 15.0, 10.0),  // 1/3
        Box::new(20.0, 20.0, 30.0, 30.0), // 0
        Box::new(0.0, 5.0, 10.0, 15.0),  // 1/3
        Box::new(2.0, 2.0, 12.0, 22.0),  // 64/236
    ];
    // brute-force table of IoUs, argmax per GT
    let table: Vec<f64> = anchors.iter().map(|a| ref_iou(a, &gt)).collect();
    let best = (0..5).fold(0, |b, i| if table[i] > table[b] { i } else { b });
    assert_eq!(best, 0);
    assert!((table[0] - 0.5).abs() < 1e-12);

    let t = assign_rpn_targets(&anchors, &[gt], 0.7, 0.3);
    assert_eq!(t.labels[0], 1);
    assert_eq!(t.matched_gt[0], Some(0));
    for i in 1..5 {
        let want = if table[i] < 0.3 { 0 } else { -1 };
        assert_eq!(t.labels[i], want, "anchor {}", i);
    }

    let exact = assign_rpn_targets(&[gt], &[gt], 0.7, 0.3);
    assert_eq!(exact.labels, vec![1]);
    assert_eq!(exact.targets[0], [0.0; 4]);
}

#[test]
fn nms_chain_keeps_the_ends() {
    // A–B and B–C overlap 0.6, A–C only 1/3
    let a = Box::new(0.0, 0.0, 100.0, 10.0);
    let b = Box::new(25.0, 0.0, 125.0, 10.0);
    let c = Box::new(50.0, 0.0, 150.0, 10.0);
    assert!((ref_iou(&a, &b) - 0.6).abs() < 1e-12);
    assert!((ref_iou(&b, &c) - 0.6).abs() < 1e-12);
    assert!((ref_iou(&a, &c) - 1.0 / 3.0).abs() < 1e-12);
    let kept = nms_boxes(&[a, b, c], &[0.9, 0.8, 0.7], 0.5);
    assert_eq!(kept, vec![0, 2]);
    assert_eq!(kept, ref_nms(&[a, b, c], &[0.9, 0.8, 0.7], 0.5));
}

#[test]
fn disjoint_boxes_all_survive() {
    let boxes: Vec<Box> = (0..6).map(|i| Box::new(20.0 * i as f64, 0.0, 20.0 * i as f64 + 10.0, 10.0)).collect();
    let scores = [0.1, 0.5, 0.3, 0.9, 0.2, 0.4];
    assert_eq!(nms_boxes(&boxes, &scores, 0.3).len(), 6);
}

#[test]
fn proposals_with_identity_deltas_are_clipped_anchors() {
    let anchors = generate_anchors(&AnchorConfig::default(), 4, 4);
    let n = anchors.len();
    let cfg = ProposalConfig {
        nms_thresh: 1.0,
        post_nms_top_n: 10_000,
        pre_nms_top_n: 10_000,
        min_size: 4.0,
    };
    let p = generate_proposals(&vec![0.5; n], &vec![[0.0; 4]; n], &anchors, (32, 32), &cfg).unwrap();
    assert!(!p.boxes.is_empty());
    for (b, &i) in p.boxes.iter().zip(&p.anchor_index) {
        let want = anchors[i].clip(32.0, 32.0);
        for (u, v) in [(b.x1, want.x1), (b.y1, want.y1), (b.x2, want.x2), (b.y2, want.y2)] {
            assert!((u - v).abs() < 1e-9);
        }
        assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 32.0 && b.y2 <= 32.0);
        assert!(b.width() >= 4.0 && b.height() >= 4.0);
    }
}

#[test]
fn proposals_respect_limits() {
    let anchors = generate_anchors(&AnchorConfig::default(), 4, 4);
    let n = anchors.len();
    let obj = random_tensor(&[n], 1, 3.0);
    let deltas: Vec<[f64; 4]> = random_tensor(&[n, 4], 2, 0.5).data().chunks(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
    for top in [1, 5, 40] {
        let cfg = ProposalConfig {
            post_nms_top_n: top,
            ..ProposalConfig::default()
        };
        let p = generate_proposals(obj.data(), &deltas, &anchors, (32, 32), &cfg).unwrap();
        assert!(p.boxes.len() <= top);
        for b in &p.boxes {
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 32.0 && b.y2 <= 32.0);
            assert!(b.width() >= cfg.min_size && b.height() >= cfg.min_size);
        }
        if top == 1 {
            // the single survivor is the best-scoring valid candidate
            let best = (0..n)
                .filter(|&i| {
                    let b = decode_box_clamped(&deltas[i], &anchors[i]).clip(32.0, 32.0);
                    b.width() >= cfg.min_size && b.height() >= cfg.min_size
                })
                .max_by(|&a, &b| obj.data()[a].total_cmp(&obj.data()[b]).then(b.cmp(&a)))
                .unwrap();
            assert_eq!(p.anchor_index, vec![best]);
        }
    }
}

#[test]
fn roi_pool_examples() {
    let flat = roi_pool(&Tensor::full(&[2, 6, 6], 0.7), 8, &[Box::new(3.0, 5.0, 40.0, 30.0)], 7).unwrap();
    assert_eq!(flat.shape(), &[1, 2, 7, 7]);
    assert!(flat.data().iter().all(|&v| v == 0.7));

    let feats = random_tensor(&[1, 6, 6], 3, 1.0);
    let one = roi_pool(&feats, 8, &[Box::new(16.5, 8.5, 23.5, 15.5)], 7).unwrap();
    let cell = feats.data()[6 + 2];
    assert!(one.data().iter().all(|&v| v == cell));
}

#[test]
fn roi_pool_stays_within_region_bounds() {
    let feats = random_tensor(&[3, 8, 8], 4, 2.0);
    let mut r = rng(5);
    for _ in 0..50 {
        let b = random_box(&mut r, 60.0).clip(64.0, 64.0);
        if b.width() < 1.0 || b.height() < 1.0 {
            continue;
        }
        let out = roi_pool(&feats, 8, &[b], 4).unwrap();
        // every cell the box touches, by brute force
        let (x0, x1) = ((b.x1 / 8.0).floor() as usize, ((b.x2 / 8.0).ceil() as usize).min(8));
        let (y0, y1) = ((b.y1 / 8.0).floor() as usize, ((b.y2 / 8.0).ceil() as usize).min(8));
        for c in 0..3 {
            let mut lo = f64::MAX;
            let mut hi = f64::MIN;
            for y in y0..y1.max(y0 + 1) {
                for x in x0..x1.max(x0 + 1) {
                    let v = feats.data()[c * 64 + y.min(7) * 8 + x.min(7)];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            for &v in &out.data()[c * 16..(c + 1) * 16] {
                assert!(v >= lo && v <= hi, "{} outside [{}, {}] for {:?}", v, lo, hi, b);
            }
        }
    }
}

#[test]
fn head_output_shapes_and_zero_weights() {
    let cfg = HeadConfig {
        rpn_channels: 6,
        fc_width: 8,
        roi_size: 2,
        ..HeadConfig::default()
    };
    let mut s = ParamStore::new();
    init_rpn(&mut s, &cfg, 4, 35, &mut init_rng(1, 0)).unwrap();
    init_frcnn(&mut s, &cfg, 4, &mut init_rng(1, 1)).unwrap();
    let mut g = Graph::new();
    let b = s.bind(&mut g, &GroupSet::new());
    let x = g.constant(random_tensor(&[4, 3, 5], 6, 1.0));
    let rpn = rpn_forward(&mut g, &b, ActivationMap { var: x, stride: 8 }).unwrap();
    assert_eq!(g.value(rpn.logits).shape(), &[35 * 15, 1]);
    assert_eq!(g.value(rpn.deltas).shape(), &[35 * 15, 4]);

    let pooled = g.constant(random_tensor(&[5, 4, 2, 2], 7, 1.0));
    let out = frcnn_forward(&mut g, &b, pooled).unwrap();
    let probs = softmax_rows(g.value(out.logits));
    assert_eq!(probs.shape(), &[5, 3]);
    for row in probs.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    let mut zero = s.clone();
    for p in s.iter().filter(|p| p.name.starts_with("frcnn.")) {
        zero.set(&p.name, Tensor::zeros(p.value.shape())).unwrap();
    }
    let mut g = Graph::new();
    let b = zero.bind(&mut g, &GroupSet::new());
    let pooled = g.constant(random_tensor(&[3, 4, 2, 2], 8, 1.0));
    let out = frcnn_forward(&mut g, &b, pooled).unwrap();
    let probs = softmax_rows(g.value(out.logits));
    assert!(probs.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
}
