use hyperlearner::error::Error;
use hyperlearner::Tensor;
use hyperlearner::channels::*;
use hyperlearner::gradcheck::random_tensor;

#[test]
fn reflect_indexing() {
    let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
    assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
    assert_eq!(reflect(-5, 1), 0);
}

#[test]
fn hog_bins_at_centres_and_wrap() {
    // orientation 3π/4 with 6 bins sits at 4.5 bin widths: split 50/50
    let t = Tensor::from_fn(&[1, 5, 5], |i| {
        let (y, x) = ((i / 5) as f64, (i % 5) as f64);
        -x + y
    });
    let hist = hog_pixel_histograms(&t, 6).unwrap();
    let n = 25;
    let c = 12;
    let m = 2.0f64.sqrt();
    assert!((hist.data()[4 * n + c] - 0.5 * m).abs() < 1e-12);
    assert!((hist.data()[5 * n + c] - 0.5 * m).abs() < 1e-12);
}

#[test]
fn hog_cells_are_constant() {
    let img = random_tensor(&[3, 10, 9], 4, 1.0).map(|v| v.abs());
    let hog = hog_channels(&img, 6).unwrap();
    for k in 0..6 {
        let p = hog.data.plane(k);
        assert_eq!(p[0], p[3 * 9 + 3]);
        assert_eq!(p[8 * 9 + 8], p[9 * 9 + 8]);
    }
}

#[test]
fn network_input_expands_class_codes() {
    let data = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 1.0]).unwrap();
    let m = ChannelMap::new(
        data,
        ChannelKind::Multiclass { class_count: 3 },
        ChannelName::Segmentation,
    )
    .unwrap();
    let x = m.network_input();
    assert_eq!(x.shape(), &[3, 2, 2]);
    assert_eq!(m.input_channels(), 3);
}

#[test]
fn channel_map_validation() {
    let bad = Tensor::full(&[1, 2, 2], 1.5);
    assert!(ChannelMap::new(bad, ChannelKind::Binary, ChannelName::Edge).is_err());
    let codes = Tensor::full(&[1, 2, 2], 4.0);
    assert!(matches!(
        ChannelMap::new(codes, ChannelKind::Multiclass { class_count: 4 }, ChannelName::Segmentation),
        Err(Error::LabelOutOfRange { .. })
    ));
    let probs = Tensor::full(&[2, 2, 2], 0.5);
    assert!(ChannelMap::new(probs, ChannelKind::Multiclass { class_count: 2 }, ChannelName::Segmentation).is_ok());
}
