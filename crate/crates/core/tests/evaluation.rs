mod common;

use common::*;
use hyperlearner::boxes::Box;
use hyperlearner::evalkit::*;
use hyperlearner::heads::Detection;

fn ped(x: f64, h: f64) -> GroundTruth {
    GroundTruth::pedestrian(Box::new(x, 0.0, x + h * 0.4, h))
}

#[test]
fn single_match_rule() {
    let gts = [ped(0.0, 50.0)];
    let d = det(gts[0].bbox, 0.9);
    let m = match_detections(&[d], &gts, &DifficultySpec::moderate(), 0.5);
    assert_eq!(m.outcomes, vec![Outcome::TruePositive { gt: 0 }]);

    let m = match_detections(&[det(gts[0].bbox, 0.4), det(gts[0].bbox, 0.8)], &gts, &DifficultySpec::moderate(), 0.5);
    assert_eq!(m.outcomes, vec![Outcome::FalsePositive, Outcome::TruePositive { gt: 0 }]);
}

#[test]
fn worked_ap_example() {
    // 2 GTs; TP at 0.9, FP at 0.8, TP at 0.7
    let gts = vec![vec![ped(0.0, 50.0), ped(100.0, 50.0)]];
    let dets = vec![vec![det(gts[0][0].bbox, 0.9), det(Box::new(200.0, 0.0, 220.0, 50.0), 0.8), det(gts[0][1].bbox, 0.7)]];
    let (curve, _) = evaluate(&dets, &gts, &DifficultySpec::moderate(), 0.5).unwrap();
    let ap = average_precision(&curve).unwrap();
    let reference = ref_ap41(&[(0.9, true), (0.8, false), (0.7, true)], 2);
    // 21 recall levels up to 0.5 at precision 1, 20 above at precision 2/3
    let hand = (21.0 + 20.0 * 2.0 / 3.0) / 41.0;
    assert!((reference - hand).abs() < 1e-12);
    assert!((ap - reference).abs() < 1e-6, "ap {} reference {}", ap, reference);
}

#[test]
fn ap_ignores_monotone_score_transforms() {
    let mut r = rng(11);
    for _ in 0..30 {
        let gts: Vec<Vec<GroundTruth>> = (0..3).map(|_| (0..4).map(|_| random_gt(&mut r)).collect()).collect();
        let dets: Vec<Vec<Detection>> = gts.iter().map(|g| random_dets(&mut r, g, 6)).collect();
        let warped: Vec<Vec<Detection>> = dets
            .iter()
            .map(|ds| ds.iter().map(|d| Detection { score: (3.0 * d.score).exp() - 7.0, ..*d }).collect())
            .collect();
        let diff = DifficultySpec::hard();
        let (a, _) = evaluate(&dets, &gts, &diff, 0.5).unwrap();
        let (b, _) = evaluate(&warped, &gts, &diff, 0.5).unwrap();
        match (average_precision(&a), average_precision(&b)) {
            (Ok(x), Ok(y)) => assert_eq!(x, y),
            (Err(_), Err(_)) => {}
            other => panic!("mismatch {:?}", other),
        }
    }
}

#[test]
fn ignore_regions_never_create_tps_or_fps() {
    let mut r = rng(12);
    for _ in 0..200 {
        let gts: Vec<GroundTruth> = (0..4).map(|_| random_gt(&mut r)).collect();
        let dets = random_dets(&mut r, &gts, 6);
        let diff = DifficultySpec::moderate();
        let base = match_detections(&dets, &gts, &diff, 0.5);
        let mut more = gts.clone();
        let k = more.len();
        more.push(GroundTruth {
            class: GtClass::DontCare,
            ..random_gt(&mut r)
        });
        let with = match_detections(&dets, &more, &diff, 0.5);
        let tp = |m: &MatchResult| m.outcomes.iter().filter(|o| matches!(o, Outcome::TruePositive { .. })).count();
        let fp = |m: &MatchResult| m.outcomes.iter().filter(|o| **o == Outcome::FalsePositive).count();
        assert_eq!(tp(&base), tp(&with));
        assert!(fp(&with) <= fp(&base));
        assert!(!with.gt_matched[k]);
    }
}

#[test]
fn recall_at_precision_edge_cases() {
    let gts = vec![vec![ped(0.0, 50.0), ped(100.0, 120.0)]];
    let dets = vec![gts[0].iter().map(|g| det(g.bbox, 0.9)).collect::<Vec<_>>()];
    let (curve, _) = evaluate(&dets, &gts, &DifficultySpec::hard(), 0.5).unwrap();
    let r = recall_at_precision(&curve, 0.7, &default_height_buckets());
    assert_eq!(r.overall, Some(1.0));
    for b in &r.buckets {
        if b.gt_count == 0 {
            assert_eq!(b.recall, None);
        } else {
            assert_eq!(b.recall, Some(1.0));
        }
    }
    assert!(r.buckets.iter().any(|b| b.gt_count == 0));
}

#[test]
fn difficulty_roles() {
    let small = ped(0.0, 20.0);
    let occluded = GroundTruth {
        occlusion_level: 2,
        ..ped(0.0, 60.0)
    };
    let truncated = GroundTruth {
        truncation: 0.4,
        ..ped(0.0, 60.0)
    };
    let m = DifficultySpec::moderate();
    let h = DifficultySpec::hard();
    assert_eq!(gt_role(&small, &h), GtRole::Ignore);
    assert_eq!(gt_role(&occluded, &m), GtRole::Ignore);
    assert_eq!(gt_role(&occluded, &h), GtRole::Eligible);
    assert_eq!(gt_role(&truncated, &m), GtRole::Ignore);
    assert_eq!(gt_role(&truncated, &h), GtRole::Eligible);
    assert_eq!(gt_role(&GroundTruth::cyclist(small.bbox), &h), GtRole::Other);
    assert_eq!(gt_role(&GroundTruth::unannotated(small.bbox), &h), GtRole::Unannotated);
}

#[test]
fn miss_rate_ranges_agree_on_constant_curves() {
    // 4 GTs, 2 found, no false positives: miss rate 0.5 at every FPPI
    let gts = vec![(0..4).map(|i| ped(100.0 * i as f64, 60.0)).collect::<Vec<_>>()];
    let dets = vec![vec![det(gts[0][0].bbox, 0.9), det(gts[0][2].bbox, 0.6)]];
    let (curve, _) = evaluate(&dets, &gts, &DifficultySpec::moderate(), 0.5).unwrap();
    assert_eq!(log_average_miss_rate(&curve, 1, -2.0).unwrap(), 0.5);
    assert_eq!(log_average_miss_rate(&curve, 1, -4.0).unwrap(), 0.5);
    assert!(log_average_miss_rate(&curve, 0, -2.0).is_err());
}
