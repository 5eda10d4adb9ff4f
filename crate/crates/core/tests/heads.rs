use hyperlearner::boxes::Box;
use hyperlearner::heads::*;
use hyperlearner::params::init_rng;

#[test]
fn anchor_count_and_shape() {
    let cfg = AnchorConfig::default();
    let a = generate_anchors(&cfg, 16, 16);
    assert_eq!(a.len(), 16 * 16 * 35);
    // scale 48 (index 2), ratio 0.5 (index 3)
    let b = a[2 * 7 + 3];
    assert_eq!((b.width(), b.height()), (24.0, 48.0));
    assert_eq!(b.center(), (4.0, 4.0));
    assert_eq!(a[35].center(), (12.0, 4.0));
    assert_eq!(a[16 * 35].center(), (4.0, 12.0));
}

#[test]
fn identical_boxes_keep_the_higher_score() {
    let b = Box::new(0.0, 0.0, 10.0, 10.0);
    let dets = [
        Detection { bbox: b, score: 0.8, class_id: 1 },
        Detection { bbox: b, score: 0.9, class_id: 1 },
    ];
    assert_eq!(nms(&dets, 0.5), vec![1]);
}

#[test]
fn no_gts_means_all_negative() {
    let anchors = generate_anchors(&AnchorConfig::default(), 2, 2);
    let t = assign_rpn_targets(&anchors, &[], 0.7, 0.3);
    assert!(t.labels.iter().all(|&l| l == 0));
}

#[test]
fn sampling_respects_budget() {
    let mut labels = vec![0i8; 500];
    labels[..100].iter_mut().for_each(|l| *l = 1);
    labels[100..150].iter_mut().for_each(|l| *l = -1);
    let mut rng = init_rng(0, 0);
    let (p, n) = sample_labels(&labels, 128, 0.5, &mut rng);
    assert_eq!(p.len(), 64);
    assert_eq!(n.len(), 64);
    assert!(p.iter().all(|&i| labels[i] == 1));
    assert!(n.iter().all(|&i| labels[i] == 0));
}

#[test]
fn roi_sampling_appends_ground_truth() {
    let gts = [GtBox { bbox: Box::new(10.0, 10.0, 20.0, 40.0), class_id: 1 }];
    let mut rng = init_rng(0, 0);
    let s = sample_rois(&[Box::new(60.0, 60.0, 70.0, 70.0)], &gts, &HeadConfig::default(), &mut rng);
    assert_eq!(s.rois.len(), 2);
    assert_eq!(s.labels, vec![1, 0]);
    assert_eq!(s.source, vec![None, Some(0)]);
}
