use faultscope::nn::train::{accumulate_gradients, Grads, Target};
use faultscope::nn::{arch, ops, Dataset, Layer, LayerKind, Model, Split, Tensor};
use proptest::prelude::*;

/// Cross-entropy from the f32 logits, evaluated in f64 (log-sum-exp).
fn loss(model: &Model, x: &[f32], class: usize) -> f64 {
    let z: Vec<f64> = model.forward_sample(x).iter().map(|&v| v as f64).collect();
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[class]
}

/// Which branch every piecewise-linear layer took: pass/clamp per ReLU-like
/// element and the winning tap per max-pool window (as the matching input
/// value's bits).
fn pattern(model: &Model, x: &[f32]) -> Vec<u64> {
    let outs = model.forward_sample_all(x);
    let mut p = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let input: &[f32] = if i == 0 { x } else { &outs[i - 1] };
        match layer.kind {
            LayerKind::Relu | LayerKind::Relu6 | LayerKind::ClippedRelu { .. } | LayerKind::RangeRestrict { .. } => {
                p.extend(input.iter().zip(&outs[i]).map(|(a, b)| (a == b) as u64));
            }
            LayerKind::MaxPool2d { .. } => {
                // a different winner changes which input the output equals
                p.extend(outs[i].iter().map(|v| input.iter().position(|u| u == v).unwrap_or(usize::MAX) as u64));
            }
            _ => {}
        }
    }
    p
}

struct GradCheck {
    checked: usize,
    kinks: usize,
    worst: f64,
}

/// Central differences against the analytic gradient. Every parameter is
/// visited when `stride` is 1. Entries where both values sit below `floor`
/// are not judged; entries whose perturbation flips a ReLU or max-pool
/// branch are counted as kinks and skipped.
fn check_gradients(model: &Model, x: &[f32], class: usize, eps: f32, floor: f64, stride: usize) -> GradCheck {
    let mut grads: Grads = model
        .layers()
        .iter()
        .map(|l| l.kind.params().iter().map(|t| vec![0.0; t.len()]).collect())
        .collect();
    accumulate_gradients(model, x, Target::Class(class), &mut grads);
    let base = pattern(model, x);
    let mut out = GradCheck { checked: 0, kinks: 0, worst: 0.0 };
    for li in 0..model.layers().len() {
        let n_params = model.layers()[li].kind.params().len();
        for pi in 0..n_params {
            let len = model.layers()[li].kind.params()[pi].len();
            for j in (0..len).step_by(stride.min(len).max(1)) {
                let bumped = |d: f32| {
                    let mut m = model.clone();
                    m.layers_mut()[li].kind.params_mut()[pi].data_mut()[j] += d;
                    m
                };
                let (up, down) = (bumped(eps), bumped(-eps));
                if pattern(&up, x) != base || pattern(&down, x) != base {
                    out.kinks += 1;
                    continue;
                }
                let numeric = (loss(&up, x, class) - loss(&down, x, class)) / (2.0 * eps as f64);
                let analytic = grads[li][pi][j] as f64;
                if numeric == 0.0 && analytic == 0.0 {
                    out.checked += 1;
                    continue;
                }
                let scale = numeric.abs().max(analytic.abs());
                if scale < floor {
                    continue;
                }
                let rel = (numeric - analytic).abs() / scale;
                out.worst = out.worst.max(rel);
                assert!(rel < 1e-2, "{} layer {li} param {pi}[{j}]: analytic {analytic} numeric {numeric}", model.name);
                out.checked += 1;
            }
        }
    }
    out
}

#[test]
fn gradients_match_finite_differences_on_micro_mlp() {
    // fc(6→8) → relu → fc(8→5) → relu → fc(5→4), every parameter, eps 1e-3
    for seed in 0..4 {
        let m = arch::mlp(&[6, 8, 5, 4], seed);
        let x = arch::random_inputs(&m, 1, seed + 50);
        let r = check_gradients(&m, x.sample(0), (seed % 4) as usize, 1e-3, 5e-3, 1);
        assert!(r.checked >= m.param_count() / 2, "seed {seed}: only {} of {} parameters judged", r.checked, m.param_count());
    }
}

#[test]
fn gradients_match_finite_differences_on_cnns() {
    // deeper f32 graphs put ~1e-3 of rounding noise on a 1e-3 difference
    // quotient, so these use eps 3e-3
    for model in [arch::lenet_small(3), arch::resnet_tiny(4), arch::mobilenet_tiny(5), arch::mnist_micro(6)] {
        let x = arch::random_inputs(&model, 1, 9);
        let r = check_gradients(&model, x.sample(0), 3, 3e-3, 2e-2, 97);
        assert!(r.checked >= 10, "{}: only {} measurable gradients", model.name, r.checked);
        assert!(r.kinks <= r.checked / 4, "{}: {} kinks against {} checks", model.name, r.kinks, r.checked);
    }
    let mut total = 0;
    for seed in 0..12 {
        let m = arch::random_micro(seed);
        if faultscope::nn::train::check_differentiable(&m).is_err() {
            continue;
        }
        let x = arch::random_inputs(&m, 1, seed + 100);
        total += check_gradients(&m, x.sample(0), (seed % 4) as usize, 3e-3, 2e-2, 7).checked;
    }
    assert!(total >= 50, "micro-nets: only {total} measurable gradients");
}

#[test]
fn identity_linear_passes_input_through() {
    let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let layer = Layer::new("fc", LayerKind::Linear { weight: eye, bias: Tensor::zeros(vec![3]) });
    let m = Model::new("id", vec![3], 3, vec![layer]).unwrap();
    let x = Tensor::new(vec![1, 3], vec![0.25, -7.5, 3.0]).unwrap();
    assert_eq!(m.forward(&x).unwrap().logits.data(), x.data());
}

#[test]
fn relu_example() {
    assert_eq!(ops::relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
}

#[test]
fn shape_mismatch_is_an_error() {
    let m = arch::lenet_small(1);
    assert!(m.forward(&Tensor::zeros(vec![1, 1, 27, 28])).is_err());
}

#[test]
fn empty_dataset_accuracy_is_an_error() {
    let m = arch::mlp(&[2, 2], 1);
    let ds = Dataset::new(Tensor::zeros(vec![0, 2]), vec![], Split::Test).unwrap();
    assert!(m.accuracy(&ds).is_err());
}

#[test]
fn constant_logits_predict_class_zero() {
    // zero weights and bias: every logit ties, the lowest index wins
    let layer = Layer::new(
        "fc",
        LayerKind::Linear { weight: Tensor::zeros(vec![10, 4]), bias: Tensor::zeros(vec![10]) },
    );
    let m = Model::new("const", vec![4], 10, vec![layer]).unwrap();
    let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
    let ds = Dataset::new(Tensor::zeros(vec![50, 4]), labels.clone(), Split::Test).unwrap();
    let expected = labels.iter().filter(|&&l| l == 0).count() as f64 / labels.len() as f64;
    assert_eq!(m.accuracy(&ds).unwrap(), expected);
    assert_eq!(expected, 0.1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_is_bit_deterministic(seed in 0u64..1000) {
        let m = arch::random_micro(seed);
        let x = arch::random_inputs(&m, 3, seed);
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        prop_assert!(a.logits.bit_eq(&b.logits));
        prop_assert!(a.confidences.bit_eq(&b.confidences));
    }

    #[test]
    fn confidences_are_a_distribution(seed in 0u64..1000, scale in 0.1f32..50.0) {
        let m = arch::random_micro(seed);
        let mut x = arch::random_inputs(&m, 2, seed ^ 7);
        x.data_mut().iter_mut().for_each(|v| *v *= scale);
        let f = m.forward(&x).unwrap();
        for i in 0..2 {
            let row = f.confidences.sample(i);
            let sum: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-5);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
