use faultscope::appfi::{
    corrupt_feature_map, flip_weight_bits, mbf_flip_count, neuron_sites, plan_app_runs, run_app_campaign,
    stat_sample_size, weight_tensors, AppError, AppFault, AppFaultSpec, StatSizing,
};
use faultscope::evaluate::Label;
use faultscope::nn::io::encode_model;
use faultscope::nn::{arch, Dataset, Layer, LayerKind, Model, Split, Tensor};
use proptest::prelude::*;

/// Textbook sample size with the 95% quantile written out, no library calls.
fn sample_size_oracle(n: f64, e: f64, p: f64) -> u64 {
    let t: f64 = 1.959_963_984_540_054;
    (n / (1.0 + e * e * (n - 1.0) / (t * t * p * (1.0 - p)))).ceil() as u64
}

fn param_bits(model: &Model) -> Vec<u32> {
    model.layers().iter().flat_map(|l| l.kind.params()).flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

fn hamming(a: &[u32], b: &[u32]) -> u64 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones() as u64).sum()
}

#[test]
fn sample_size_examples() {
    assert_eq!(stat_sample_size(1_000_000, 0.95, 0.01, 0.5), 9513);
    assert_eq!(sample_size_oracle(1e6, 0.01, 0.5), 9513);
    assert_eq!(stat_sample_size(100, 0.95, 0.05, 0.5), 80);
    assert_eq!(sample_size_oracle(100.0, 0.05, 0.5), 80);
    assert_eq!(stat_sample_size(1_000_000, 0.95, 0.999_999, 0.5), 1);
}

proptest! {
    #[test]
    fn sample_size_matches_oracle_and_bounds(n in 1u64..5_000_000, e in 0.001f64..0.5, p in 0.05f64..0.95) {
        let got = stat_sample_size(n, 0.95, e, p);
        prop_assert!(got >= 1 && got <= n);
        let oracle = sample_size_oracle(n as f64, e, p).clamp(1, n);
        prop_assert!(got.abs_diff(oracle) <= 1, "n={n} e={e}: {got} vs {oracle}");
        prop_assert!(stat_sample_size(n, 0.95, e * 1.5_f64.min(0.99 / e), p) <= got);
    }

    #[test]
    fn mbf_hamming_distance_is_exact(seed in 0u64..10_000, log_ber in -4.0f64..-0.5) {
        let model = arch::mlp(&[8, 6, 3], seed);
        let ber = 10f64.powf(log_ber);
        let total_bits = model.param_count() as u64 * 32;
        prop_assume!((ber * total_bits as f64).round() >= 1.0);
        let spec = AppFaultSpec::weights_mbf(vec![ber], seed);
        let (faulty, sites) = flip_weight_bits(&model, &spec).unwrap();
        let k = (ber * total_bits as f64).round() as u64;
        prop_assert_eq!(hamming(&param_bits(&model), &param_bits(&faulty)), k);
        prop_assert_eq!(sites.len() as u64, k);
    }

    #[test]
    fn feature_map_flip_is_an_involution(seed in 0u64..10_000, bit in 0u8..32, bler in 0.01f64..1.0, ner in 0.01f64..1.0) {
        let fm = Tensor::new(vec![3, 4, 5], (0..60).map(|i| i as f32 * 0.37 - 9.0).collect()).unwrap();
        let (once, a) = corrupt_feature_map(&fm, bler, ner, bit, seed).unwrap();
        let (twice, b) = corrupt_feature_map(&once, bler, ner, bit, seed).unwrap();
        prop_assert_eq!(a, b);
        prop_assert!(twice.bit_eq(&fm));
    }
}

#[test]
fn ber_below_resolution_is_rejected() {
    let model = arch::mlp(&[4, 2], 1);
    assert!(matches!(mbf_flip_count(0.0, 1000), Err(AppError::BelowResolution { .. })));
    let err = flip_weight_bits(&model, &AppFaultSpec::weights_mbf(vec![1e-9], 1)).unwrap_err();
    assert!(matches!(err, AppError::BelowResolution { .. }) || matches!(err, AppError::Fraction { .. }));
}

#[test]
fn thirty_two_of_32000_bits() {
    // fc 999→1 has 999 weights + 1 bias = 1000 floats = 32000 bits
    let model = arch::mlp(&[999, 1], 2);
    assert_eq!(model.param_count() * 32, 32000);
    let (faulty, sites) = flip_weight_bits(&model, &AppFaultSpec::weights_mbf(vec![1e-3], 5)).unwrap();
    assert_eq!(sites.len(), 32);
    let mut distinct = sites.clone();
    distinct.dedup();
    assert_eq!(distinct.len(), 32);
    assert_eq!(hamming(&param_bits(&model), &param_bits(&faulty)), 32);
}

#[test]
fn sign_bit_flip_negates_one() {
    let layer = Layer::new("fc", LayerKind::Linear { weight: Tensor::from_vec(vec![1.0]).reshape(vec![1, 1]).unwrap(), bias: Tensor::zeros(vec![1]) });
    let model = Model::new("one", vec![1], 1, vec![layer]).unwrap();
    let mut spec = AppFaultSpec::weights_sbf(0);
    spec.bit = Some(31);
    spec.layer = Some(0);
    // two candidate elements (weight, bias); find a seed that lands on the weight
    let (faulty, sites) = (0..64)
        .map(|s| flip_weight_bits(&model, &AppFaultSpec { seed: s, ..spec.clone() }).unwrap())
        .find(|(_, sites)| sites[0].tensor == 0)
        .unwrap();
    assert_eq!(sites.len(), 1);
    assert_eq!(faulty.layers()[0].kind.params()[0].data(), &[-1.0]);
}

#[test]
fn injection_never_mutates_the_golden_model() {
    let model = arch::lenet_small(3);
    let before = encode_model(&model);
    flip_weight_bits(&model, &AppFaultSpec::weights_mbf(vec![1e-3], 9)).unwrap();
    flip_weight_bits(&model, &AppFaultSpec::weights_sbf(9)).unwrap();
    let eval = Dataset::new(arch::random_inputs(&model, 4, 1), vec![0, 1, 2, 3], Split::Test).unwrap();
    run_app_campaign(&model, &eval, &AppFaultSpec::neurons(0.5, 0.5, 30, 3, 2), &StatSizing::default(), 1).unwrap();
    assert_eq!(encode_model(&model), before);
}

#[test]
fn feature_map_examples() {
    let ones = Tensor::new(vec![2, 3, 3], vec![1.0; 18]).unwrap();
    let (neg, touched) = corrupt_feature_map(&ones, 1.0, 1.0, 31, 4).unwrap();
    assert!(neg.data().iter().all(|&v| v == -1.0));
    assert_eq!(touched.len(), 18);

    let fm = Tensor::new(vec![4, 2, 2], (0..16).map(|i| i as f32 + 1.0).collect()).unwrap();
    let (out, touched) = corrupt_feature_map(&fm, 0.5, 0.25, 3, 11).unwrap();
    assert_eq!(touched.len(), 2);
    let mut blocks: Vec<usize> = touched.iter().map(|i| i / 4).collect();
    blocks.dedup();
    assert_eq!(blocks.len(), 2, "one neuron in each of two blocks");
    let changed: Vec<usize> = (0..16).filter(|&i| out.data()[i].to_bits() != fm.data()[i].to_bits()).collect();
    assert_eq!(changed, touched);

    assert!(matches!(corrupt_feature_map(&fm, 0.5, 0.5, 32, 1), Err(AppError::Bit(32))));
}

#[test]
fn same_seed_same_sites() {
    let model = arch::lenet_small(1);
    let spec = AppFaultSpec::weights_sbf(77);
    let sizing = StatSizing { margin: 0.05, ..Default::default() };
    assert_eq!(plan_app_runs(&model, &spec, &sizing).unwrap(), plan_app_runs(&model, &spec, &sizing).unwrap());
    assert_eq!(neuron_sites(&model, 0, 0.3, 0.2, 30, 5), neuron_sites(&model, 0, 0.3, 0.2, 30, 5));
}

#[test]
fn sbf_campaign_has_sized_distinct_runs() {
    let model = arch::mlp(&[3, 2], 4);
    // 8 floats * 32 bits = 256-bit population
    let sizing = StatSizing { confidence: 0.95, margin: 0.5, p: 0.5 };
    let n = stat_sample_size(256, 0.95, 0.5, 0.5) as usize;
    let eval = Dataset::new(arch::random_inputs(&model, 5, 3), vec![0, 1, 0, 1, 0], Split::Test).unwrap();
    let out = run_app_campaign(&model, &eval, &AppFaultSpec::weights_sbf(8), &sizing, 0).unwrap();
    assert_eq!(out.len(), n);
    let mut sites: Vec<_> = out.iter().map(|o| o.as_ref().unwrap().weight_sites[0]).collect();
    sites.sort();
    sites.dedup();
    assert_eq!(sites.len(), n);
}

#[test]
fn mbf_sweep_gives_one_run_per_ber() {
    // lenet5 has 1.4M parameter bits, enough to resolve 1e-6
    let model = arch::lenet5(2);
    let bers = vec![1e-6, 1e-5, 1e-4, 6e-4];
    let eval = Dataset::new(arch::random_inputs(&model, 3, 3), vec![1, 2, 3], Split::Test).unwrap();
    let out = run_app_campaign(&model, &eval, &AppFaultSpec::weights_mbf(bers.clone(), 1), &StatSizing::default(), 1).unwrap();
    assert_eq!(out.len(), bers.len());
    for (o, ber) in out.iter().zip(&bers) {
        let o = o.as_ref().unwrap();
        assert!(matches!(o.fault, AppFault::WeightMbf { ber: b, .. } if b == *ber));
        assert!(o.evaluation.faulty_accuracy.is_some());
        assert_ne!(o.evaluation.label, Label::Due);
    }
}

/// fc 1→2 with logits (±200·x): softmax saturates to exactly (1, 0), so no
/// mantissa-LSB flip of any parameter can move a confidence bit.
#[test]
fn saturated_classifier_lsb_flips_are_all_masked() {
    let layer = Layer::new(
        "fc",
        LayerKind::Linear { weight: Tensor::new(vec![2, 1], vec![200.0, -200.0]).unwrap(), bias: Tensor::new(vec![2], vec![0.5, -0.5]).unwrap() },
    );
    let model = Model::new("saturated", vec![1], 2, vec![layer]).unwrap();
    let xs: Vec<f32> = (1..=20).map(|i| i as f32 * 0.25).collect();
    let eval = Dataset::new(Tensor::new(vec![20, 1], xs.clone()).unwrap(), vec![0; 20], Split::Test).unwrap();

    // brute-force oracle: every parameter, bit 0, every sample
    for (li, ti, len) in weight_tensors(&model, None) {
        for j in 0..len {
            let mut m = model.clone();
            let mut params = m.layers_mut()[li].kind.params_mut();
            let v = &mut params[ti].data_mut()[j];
            *v = f32::from_bits(v.to_bits() ^ 1);
            drop(params);
            for &x in &xs {
                let g = faultscope::nn::ops::softmax(&model.forward_sample(&[x]));
                let f = faultscope::nn::ops::softmax(&m.forward_sample(&[x]));
                assert_eq!(g.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), f.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
        }
    }

    let mut spec = AppFaultSpec::weights_sbf(3);
    spec.bit = Some(0);
    let sizing = StatSizing { margin: 0.01, ..Default::default() };
    let out = run_app_campaign(&model, &eval, &spec, &sizing, 1).unwrap();
    assert_eq!(out.len(), 4, "population is 4 bits, sample covers it");
    assert!(out.iter().all(|o| o.as_ref().unwrap().evaluation.label == Label::Masked));
}

#[test]
fn app_campaigns_never_produce_due() {
    let model = arch::lenet_small(6);
    let eval = Dataset::new(arch::random_inputs(&model, 4, 6), vec![0, 1, 2, 3], Split::Test).unwrap();
    let sizing = StatSizing { margin: 0.2, ..Default::default() };
    let specs = [
        AppFaultSpec::weights_sbf(1),
        AppFaultSpec::weights_mbf(vec![1e-3, 1e-2], 2),
        AppFaultSpec::neurons(0.5, 0.5, 30, 10, 3),
        AppFaultSpec::neurons(1.0, 1.0, 31, 5, 4),
    ];
    for spec in specs {
        for o in run_app_campaign(&model, &eval, &spec, &sizing, 0).unwrap() {
            assert_ne!(o.unwrap().evaluation.label, Label::Due);
        }
    }
}

#[test]
fn neuron_runs_touch_ceil_counts() {
    let model = arch::lenet_small(1);
    // conv0 output is 4x24x24: ceil(0.3*4)=2 blocks, ceil(0.1*576)=58 neurons
    let sites = neuron_sites(&model, 0, 0.3, 0.1, 30, 9);
    assert_eq!(sites.len(), 2 * 58);
    let mut planes: Vec<usize> = sites.iter().map(|i| i / 576).collect();
    planes.dedup();
    assert_eq!(planes.len(), 2);
}
