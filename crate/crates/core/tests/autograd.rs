use hyperlearner::boxes::Box;
use hyperlearner::Tensor;
use hyperlearner::autograd::*;
use hyperlearner::gradcheck::{assert_gradients, check_gradients};

fn rnd(shape: &[usize], seed: u64) -> Tensor {
    hyperlearner::gradcheck::random_tensor(shape, seed, 1.0)
}

#[test]
fn conv_relu_pool_chain_gradients() {
    let inputs = vec![rnd(&[2, 6, 6], 1), rnd(&[3, 2, 3, 3], 2), rnd(&[3], 3)];
    let report = check_gradients(&inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1).unwrap();
        let y = g.relu(y);
        let y = g.max_pool2(y).unwrap();
        hyperlearner::gradcheck::weighted_reduce(g, y, 11)
    });
    assert_gradients(&report, 1e-6);
}

#[test]
fn pointwise_conv_and_resize_gradients() {
    let inputs = vec![rnd(&[3, 4, 4], 4), rnd(&[2, 3, 1, 1], 5)];
    let report = check_gradients(&inputs, |g, v| {
        let y = g.conv2d(v[0], v[1], None, 0).unwrap();
        let y = g.resize(y, 7, 9).unwrap();
        let y = g.avg_pool(y, 1).unwrap();
        hyperlearner::gradcheck::weighted_reduce(g, y, 12)
    });
    assert_gradients(&report, 1e-6);
}

#[test]
fn concat_hwc_softmax_sigmoid_gradients() {
    let inputs = vec![rnd(&[2, 4, 4], 6), rnd(&[3, 4, 4], 7)];
    let report = check_gradients(&inputs, |g, v| {
        let a = g.sigmoid(v[0]);
        let y = g.concat(&[a, v[1]]).unwrap();
        let y = g.avg_pool(y, 2).unwrap();
        let s = g.softmax_channels(y);
        let t = g.to_hwc(s).unwrap();
        let t = g.reshape(t, &[4, 5]).unwrap();
        hyperlearner::gradcheck::weighted_reduce(g, t, 13)
    });
    assert_gradients(&report, 1e-6);
}

#[test]
fn linear_gather_roi_gradients() {
    let inputs = vec![rnd(&[2, 8, 8], 8), rnd(&[3, 2 * 2 * 2], 9), rnd(&[3], 10)];
    let rois = [Box::new(0.0, 0.0, 16.0, 16.0), Box::new(6.0, 2.0, 30.0, 20.0)];
    let report = check_gradients(&inputs, |g, v| {
        let p = g.roi_pool(v[0], &rois, 4, 2).unwrap();
        let p = g.reshape(p, &[2, 8]).unwrap();
        let y = g.linear(p, v[1], Some(v[2])).unwrap();
        let y = g.gather_rows(y, &[1, 0, 1]).unwrap();
        hyperlearner::gradcheck::weighted_reduce(g, y, 14)
    });
    assert_gradients(&report, 1e-6);
}

#[test]
fn box_decode_clip_encode_gradients() {
    let deltas = rnd(&[2, 4], 15).map(|v| 0.3 * v);
    let anchors = [Box::new(10.0, 10.0, 30.0, 50.0), Box::new(40.0, 5.0, 52.0, 40.0)];
    let gts = [Box::new(12.0, 8.0, 34.0, 55.0), Box::new(38.0, 6.0, 50.0, 35.0)];
    let stds = [0.1, 0.1, 0.2, 0.2];
    let report = check_gradients(&[deltas], |g, v| {
        let b = g.decode_boxes(v[0], &anchors, stds).unwrap();
        let b = g.clip_boxes(b, 100.0, 100.0).unwrap();
        let t = g.encode_targets(b, &gts, stds).unwrap();
        hyperlearner::gradcheck::weighted_reduce(g, t, 16)
    });
    assert_gradients(&report, 1e-6);
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut g = Graph::new();
    let x = g.param(Tensor::full(&[1, 2, 2], 2.0));
    let s = g.stop_gradient(x);
    let y = g.weighted_sum(&[]);
    assert!(!g.requires_grad(s));
    assert!(!g.requires_grad(y));
    assert_eq!(g.value(s), g.value(x));
}

#[test]
fn roi_on_single_cell_replicates_it() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_fn(&[1, 4, 4], |i| i as f64));
    // pixels [8,12)×[4,8) at stride 4 → cell (y=1, x=2)
    let p = g.roi_pool(x, &[Box::new(8.0, 4.0, 12.0, 8.0)], 4, 7).unwrap();
    assert!(g.value(p).data().iter().all(|&v| v == 6.0));
}
