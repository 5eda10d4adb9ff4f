use hyperlearner::boxes::Box;
use hyperlearner::boxes::*;
use proptest::prelude::*;

#[test]
fn iou_examples() {
    let a = Box::new(0.0, 0.0, 10.0, 10.0);
    assert_eq!(iou(&a, &a), 1.0);
    assert_eq!(iou(&a, &Box::new(20.0, 20.0, 30.0, 30.0)), 0.0);
    let b = Box::new(5.0, 0.0, 15.0, 10.0);
    assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn encode_identity_and_worked_example() {
    let a = Box::new(0.0, 0.0, 10.0, 10.0);
    assert_eq!(encode_box(&a, &a).unwrap(), [0.0, 0.0, 0.0, 0.0]);
    // centers (10,10) vs (5,5), equal sizes: (5/10, 5/10, ln 1, ln 1).
    let t = encode_box(&Box::new(5.0, 5.0, 15.0, 15.0), &a).unwrap();
    assert_eq!(t, [0.5, 0.5, 0.0, 0.0]);
}

#[test]
fn degenerate_boxes_are_rejected() {
    let a = Box::new(0.0, 0.0, 10.0, 10.0);
    assert!(encode_box(&Box::new(3.0, 0.0, 3.0, 5.0), &a).is_err());
    assert!(decode_box(&[0.0; 4], &Box::new(0.0, 0.0, -1.0, 4.0)).is_err());
}

fn arb_box() -> impl Strategy<Value = Box> {
    (-500.0..500.0f64, -500.0..500.0f64, 0.5..300.0f64, 0.5..300.0f64)
        .prop_map(|(x, y, w, h)| Box::new(x, y, x + w, y + h))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]
    #[test]
    fn decode_inverts_encode(g in arb_box(), a in arb_box()) {
        let t = encode_box(&g, &a).unwrap();
        let d = decode_box(&t, &a).unwrap();
        for (x, y) in d.to_array().iter().zip(g.to_array().iter()) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let ab = iou(&a, &b);
        prop_assert_eq!(ab, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&ab));
        if ab == 1.0 { prop_assert_eq!(a, b); }
    }
}
