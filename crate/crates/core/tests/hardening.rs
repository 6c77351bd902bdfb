use faultscope::appfi::corrupt_in_place;
use faultscope::hardening::{
    apply_adaptive_clipper, apply_ranger, apply_swap_relu6, manifest, profile_ranges, range_sites, HardeningError,
    HardeningKind,
};
use faultscope::nn::{arch, ops, Dataset, Layer, LayerKind, Model, Split, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn calib(model: &Model, n: usize, seed: u64) -> Dataset {
    Dataset::new(arch::random_inputs(model, n, seed), vec![0; n], Split::Calibration).unwrap()
}

fn params(model: &Model) -> Vec<Vec<u32>> {
    model
        .layers()
        .iter()
        .flat_map(|l| l.kind.params())
        .map(|t| t.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn zero_calibration_bounds_are_the_propagated_constants() {
    let model = arch::lenet_small(4);
    let zeros = Dataset::new(Tensor::zeros(vec![3, 1, 28, 28]), vec![0; 3], Split::Calibration).unwrap();
    let prof = profile_ranges(&model, &zeros).unwrap();
    let outs = model.forward_sample_all(&vec![0.0; 784]);
    assert_eq!(prof.sites.len(), range_sites(&model).len());
    for s in &prof.sites {
        let lo = outs[s.layer].iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = outs[s.layer].iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!((s.lo, s.hi), (lo, hi), "layer {}", s.layer);
        assert!(s.lo >= 0.0, "ReLU sites are non-negative");
    }
}

#[test]
fn single_sample_profile_is_that_sample() {
    let model = arch::resnet_tiny(2);
    let one = calib(&model, 1, 8);
    let prof = profile_ranges(&model, &one).unwrap();
    let outs = model.forward_sample_all(one.images.sample(0));
    for s in &prof.sites {
        assert!(outs[s.layer].iter().any(|&v| v == s.lo));
        assert!(outs[s.layer].iter().any(|&v| v == s.hi));
        assert!(outs[s.layer].iter().all(|&v| s.lo <= v && v <= s.hi));
    }
}

#[test]
fn empty_calibration_is_an_error() {
    let model = arch::lenet_small(1);
    let empty = Dataset::new(Tensor::zeros(vec![0, 1, 28, 28]), vec![], Split::Calibration).unwrap();
    assert!(matches!(profile_ranges(&model, &empty), Err(HardeningError::EmptyCalibration)));
    assert!(matches!(apply_adaptive_clipper(&model, &empty, 99.9, None), Err(HardeningError::EmptyCalibration)));
}

#[test]
fn range_restrict_saturates() {
    assert_eq!(ops::range_restrict(&[12.0, -3.0, 4.0], 0.0, 10.0), vec![10.0, 0.0, 4.0]);
    assert_eq!(ops::relu6(&[7.5, 3.0, -1.0]), vec![6.0, 3.0, 0.0]);
    assert_eq!(ops::clipped_relu(&[4.0], 2.0), vec![2.0]);
}

#[test]
fn ranger_is_identity_on_calibration_data() {
    for model in [arch::lenet_small(3), arch::resnet_tiny(3), arch::mobilenet_tiny(3)] {
        let c = calib(&model, 16, 1);
        let hardened = apply_ranger(&model, &profile_ranges(&model, &c).unwrap()).unwrap();
        assert_eq!(hardened.hardening, HardeningKind::Ranger);
        assert_eq!(params(&hardened), params(&model));
        let a = model.forward(&c.images).unwrap();
        let b = hardened.forward(&c.images).unwrap();
        assert!(a.logits.bit_eq(&b.logits), "{}", model.name);
    }
}

#[test]
fn profile_for_another_architecture_is_rejected() {
    let a = arch::lenet_small(1);
    let b = arch::lenet5(1);
    let prof = profile_ranges(&a, &calib(&a, 2, 1)).unwrap();
    assert!(matches!(apply_ranger(&b, &prof), Err(HardeningError::ProfileMismatch(_))));
}

#[test]
fn transforms_are_idempotent_by_rejection() {
    let model = arch::lenet_small(5);
    let c = calib(&model, 4, 2);
    let prof = profile_ranges(&model, &c).unwrap();
    let r = apply_ranger(&model, &prof).unwrap();
    assert!(matches!(apply_ranger(&r, &prof), Err(HardeningError::NotBaseline(HardeningKind::Ranger))));
    let s = apply_swap_relu6(&model, None).unwrap();
    assert!(matches!(apply_swap_relu6(&s, None), Err(HardeningError::NotBaseline(_))));
    let k = apply_adaptive_clipper(&model, &c, 99.9, None).unwrap();
    assert!(matches!(apply_adaptive_clipper(&k, &c, 99.9, None), Err(HardeningError::NotBaseline(_))));
    assert!(matches!(profile_ranges(&k, &c), Err(HardeningError::NotBaseline(_))));
}

#[test]
fn swap_relu6_replaces_every_relu() {
    let model = arch::lenet_small(2);
    let s = apply_swap_relu6(&model, None).unwrap();
    assert_eq!(s.hardening, HardeningKind::SwapRelu6);
    assert!(!s.layers().iter().any(|l| matches!(l.kind, LayerKind::Relu)));
    let n6 = s.layers().iter().filter(|l| matches!(l.kind, LayerKind::Relu6)).count();
    let n = model.layers().iter().filter(|l| matches!(l.kind, LayerKind::Relu)).count();
    assert_eq!(n6, n);
    assert_eq!(params(&s), params(&model));

    let no_relu = arch::mlp(&[3, 2], 1);
    assert!(matches!(apply_swap_relu6(&no_relu, None), Err(HardeningError::NoRelu)));
}

#[test]
fn clipper_thresholds_follow_the_percentile_rule() {
    // one ReLU site over a 1→100 identity-ish linear layer whose outputs on
    // a single input are exactly 0..99
    let w: Vec<f32> = (0..100).map(|i| i as f32).collect();
    let layers = vec![
        Layer::new("fc0", LayerKind::Linear { weight: Tensor::new(vec![100, 1], w).unwrap(), bias: Tensor::zeros(vec![100]) }),
        Layer::new("relu1", LayerKind::Relu),
        Layer::new("fc2", LayerKind::Linear { weight: Tensor::zeros(vec![2, 100]), bias: Tensor::zeros(vec![2]) }),
    ];
    let model = Model::new("ramp", vec![1], 2, layers).unwrap();
    let c = Dataset::new(Tensor::new(vec![1, 1], vec![1.0]).unwrap(), vec![0], Split::Calibration).unwrap();
    let k = apply_adaptive_clipper(&model, &c, 99.0, None).unwrap();
    assert_eq!(k.layers()[1].kind, LayerKind::ClippedRelu { tau: 99.0 });
    assert_eq!(k.metadata["clipper.percentile"], "99");
    assert!(matches!(apply_adaptive_clipper(&model, &c, 0.0, None), Err(HardeningError::Percentile(_))));
    assert!(matches!(apply_adaptive_clipper(&model, &c, 100.5, None), Err(HardeningError::Percentile(_))));
}

#[test]
fn dead_site_falls_back_and_is_recorded() {
    let layers = vec![
        Layer::new("fc0", LayerKind::Linear { weight: Tensor::new(vec![2, 1], vec![-1.0, -2.0]).unwrap(), bias: Tensor::zeros(vec![2]) }),
        Layer::new("relu1", LayerKind::Relu),
        Layer::new("fc2", LayerKind::Linear { weight: Tensor::zeros(vec![2, 2]), bias: Tensor::zeros(vec![2]) }),
    ];
    let model = Model::new("dead", vec![1], 2, layers).unwrap();
    let c = Dataset::new(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap(), vec![0, 1], Split::Calibration).unwrap();
    let k = apply_adaptive_clipper(&model, &c, 99.9, None).unwrap();
    assert_eq!(k.layers()[1].kind, LayerKind::ClippedRelu { tau: 1.0 });
    assert_eq!(k.metadata["clipper.fallback.1"], "1");
}

#[test]
fn clipper_at_p100_is_identity_on_calibration_data() {
    let model = arch::lenet_small(7);
    let c = calib(&model, 12, 3);
    let k = apply_adaptive_clipper(&model, &c, 100.0, None).unwrap();
    assert_eq!(params(&k), params(&model));
    assert!(model.forward(&c.images).unwrap().logits.bit_eq(&k.forward(&c.images).unwrap().logits));
    assert!(manifest(&k).contains("tau"));
}

fn restrict_bounds(model: &Model) -> Vec<(usize, f32, f32)> {
    model
        .layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l.kind {
            LayerKind::RangeRestrict { lo, hi } => Some((i, lo, hi)),
            _ => None,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Bounding holds for any input, including inputs far outside the
    /// calibration distribution and feature maps corrupted mid-network.
    #[test]
    fn ranger_bounds_every_restricted_output(seed in 0u64..500, scale in -1e6f32..1e6, bit in 0u8..32) {
        let model = arch::resnet_tiny(seed);
        let hardened = apply_ranger(&model, &profile_ranges(&model, &calib(&model, 4, seed)).unwrap()).unwrap();
        let bounds = restrict_bounds(&hardened);
        let mut x = arch::random_inputs(&model, 1, seed + 1).into_data();
        x.iter_mut().for_each(|v| *v *= scale);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let outs = hardened.forward_sample_with(&x, |i, y| {
            if !matches!(hardened.layers()[i].kind, LayerKind::RangeRestrict { .. }) {
                let blocks = hardened.layer_output_shape(i)[0];
                corrupt_in_place(y, blocks, 0.5, 0.2, bit, &mut rng);
            }
        });
        for (i, lo, hi) in bounds {
            prop_assert!(outs[i].iter().all(|&v| lo <= v && v <= hi), "layer {i} escaped [{lo}, {hi}]");
        }
    }

    #[test]
    fn relu6_and_clipper_outputs_stay_bounded(seed in 0u64..500, scale in -1e4f32..1e4) {
        let model = arch::lenet_small(seed);
        let c = calib(&model, 3, seed);
        let s = apply_swap_relu6(&model, None).unwrap();
        let k = apply_adaptive_clipper(&model, &c, 99.9, None).unwrap();
        let mut x = arch::random_inputs(&model, 1, seed + 2).into_data();
        x.iter_mut().for_each(|v| *v *= scale);
        for (i, y) in s.forward_sample_all(&x).iter().enumerate() {
            if matches!(s.layers()[i].kind, LayerKind::Relu6) {
                prop_assert!(y.iter().all(|&v| (0.0..=6.0).contains(&v)));
            }
        }
        for (i, y) in k.forward_sample_all(&x).iter().enumerate() {
            if let LayerKind::ClippedRelu { tau } = k.layers()[i].kind {
                prop_assert!(y.iter().all(|&v| v >= 0.0 && v <= tau));
            }
        }
    }

    #[test]
    fn adding_calibration_samples_only_widens(seed in 0u64..500) {
        let model = arch::lenet_small(seed % 7);
        let big = calib(&model, 6, seed);
        let small = big.head(3);
        let a = profile_ranges(&model, &small).unwrap();
        let b = profile_ranges(&model, &big).unwrap();
        for (s, t) in a.sites.iter().zip(&b.sites) {
            prop_assert!(t.lo <= s.lo && s.hi <= t.hi);
        }
    }
}
