//! Model builders: the LeNet-class desk workload plus small stand-ins.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layer::Conv2d;
use super::{Layer, LayerKind, Model, Tensor};

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// He-uniform weights, PyTorch-style bias bound `1/sqrt(fan_in)`.
pub fn conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize, stride: usize, padding: usize, groups: usize) -> LayerKind {
    let fan_in = (cin / groups) * k * k;
    LayerKind::Conv2d(Conv2d {
        weight: uniform(rng, vec![cout, cin / groups, k, k], (6.0 / fan_in as f32).sqrt()),
        bias: uniform(rng, vec![cout], 1.0 / (fan_in as f32).sqrt()),
        stride,
        padding,
        groups,
    })
}

pub fn linear(rng: &mut ChaCha8Rng, nin: usize, nout: usize) -> LayerKind {
    LayerKind::Linear {
        weight: uniform(rng, vec![nout, nin], (6.0 / nin as f32).sqrt()),
        bias: uniform(rng, vec![nout], 1.0 / (nin as f32).sqrt()),
    }
}

fn named(kinds: Vec<LayerKind>) -> Vec<Layer> {
    kinds
        .into_iter()
        .enumerate()
        .map(|(i, k)| Layer::new(format!("{}{i}", k.tag()), k))
        .collect()
}

/// LeNet-class desk model for 1x28x28 inputs:
/// conv5x5(4) → relu → pool2 → conv5x5(8) → relu → pool2 → fc(32) → relu → fc(10).
pub fn lenet_small(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        conv(&mut rng, 1, 4, 5, 1, 0, 1),
        LayerKind::Relu,
        LayerKind::MaxPool2d { kernel: 2, stride: 2 },
        conv(&mut rng, 4, 8, 5, 1, 0, 1),
        LayerKind::Relu,
        LayerKind::MaxPool2d { kernel: 2, stride: 2 },
        LayerKind::Flatten,
        linear(&mut rng, 128, 32),
        LayerKind::Relu,
        linear(&mut rng, 32, 10),
    ];
    Model::new("lenet-small", vec![1, 28, 28], 10, named(layers)).expect("valid architecture")
}

/// Register-frugal MNIST net for exhaustive sweeps (8 registers once lowered):
/// maxpool4 → fc(16) → relu → fc(10).
pub fn mnist_micro(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        LayerKind::MaxPool2d { kernel: 4, stride: 4 },
        LayerKind::Flatten,
        linear(&mut rng, 49, 16),
        LayerKind::Relu,
        linear(&mut rng, 16, 10),
    ];
    Model::new("mnist-micro", vec![1, 28, 28], 10, named(layers)).expect("valid architecture")
}

/// Builder by name, for the command line.
pub fn by_name(name: &str, seed: u64) -> Option<Model> {
    Some(match name {
        "lenet-small" => lenet_small(seed),
        "lenet5" => lenet5(seed),
        "mnist-micro" => mnist_micro(seed),
        _ => return None,
    })
}

pub const ARCHITECTURES: [&str; 3] = ["lenet-small", "lenet5", "mnist-micro"];

/// Classic LeNet5 layout (6/16 channels, 120/84 hidden) without input padding.
pub fn lenet5(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        conv(&mut rng, 1, 6, 5, 1, 0, 1),
        LayerKind::Relu,
        LayerKind::MaxPool2d { kernel: 2, stride: 2 },
        conv(&mut rng, 6, 16, 5, 1, 0, 1),
        LayerKind::Relu,
        LayerKind::MaxPool2d { kernel: 2, stride: 2 },
        LayerKind::Flatten,
        linear(&mut rng, 256, 120),
        LayerKind::Relu,
        linear(&mut rng, 120, 84),
        LayerKind::Relu,
        linear(&mut rng, 84, 10),
    ];
    Model::new("lenet5", vec![1, 28, 28], 10, named(layers)).expect("valid architecture")
}

/// Reduced residual stand-in: one padded 3x3 basic block on a strided stem.
pub fn resnet_tiny(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        conv(&mut rng, 1, 4, 3, 2, 1, 1), // 0: 4x14x14
        LayerKind::Relu,                  // 1
        conv(&mut rng, 4, 4, 3, 1, 1, 1), // 2
        LayerKind::Relu,                  // 3
        conv(&mut rng, 4, 4, 3, 1, 1, 1), // 4
        LayerKind::ResidualAdd { src: 1 },
        LayerKind::Relu,
        LayerKind::AvgPool2d { kernel: 2, stride: 2 },
        LayerKind::Flatten,
        linear(&mut rng, 4 * 7 * 7, 10),
    ];
    Model::new("resnet-tiny", vec![1, 28, 28], 10, named(layers)).expect("valid architecture")
}

/// Reduced depthwise-separable stand-in with folded batch norm and ReLU6.
pub fn mobilenet_tiny(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bn = |rng: &mut ChaCha8Rng, c: usize| LayerKind::BatchNorm2dFolded {
        scale: Tensor::from_vec((0..c).map(|_| rng.random_range(0.8..1.2)).collect()),
        shift: Tensor::from_vec((0..c).map(|_| rng.random_range(-0.1..0.1)).collect()),
    };
    let layers = vec![
        conv(&mut rng, 1, 8, 3, 2, 1, 1),
        bn(&mut rng, 8),
        LayerKind::Relu6,
        conv(&mut rng, 8, 8, 3, 1, 1, 8),
        bn(&mut rng, 8),
        LayerKind::Relu6,
        conv(&mut rng, 8, 8, 1, 1, 0, 1),
        LayerKind::Relu6,
        LayerKind::AvgPool2d { kernel: 2, stride: 2 },
        LayerKind::Flatten,
        linear(&mut rng, 8 * 7 * 7, 10),
    ];
    Model::new("mobilenet-tiny", vec![1, 28, 28], 10, named(layers)).expect("valid architecture")
}

/// Fully connected net, `dims[0]` inputs, ReLU between layers.
pub fn mlp(dims: &[usize], seed: u64) -> Model {
    assert!(dims.len() >= 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kinds = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        if i > 0 {
            kinds.push(LayerKind::Relu);
        }
        kinds.push(linear(&mut rng, w[0], w[1]));
    }
    Model::new("mlp", vec![dims[0]], *dims.last().unwrap(), named(kinds)).expect("valid architecture")
}

/// Small random CNN exercising every layer kind the lowering supports.
/// Input `[2, 7, 7]`, 4 classes.
pub fn random_micro(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cin = 2;
    let mut kinds = Vec::new();
    let c1 = rng.random_range(2..=4);
    let pad = rng.random_range(0..=1);
    kinds.push(conv(&mut rng, cin, c1, 3, 1, pad, 1));
    let mut hw = 7 + 2 * pad - 2;
    if rng.random_bool(0.5) {
        let scale = (0..c1).map(|_| rng.random_range(0.5..1.5)).collect();
        let shift = (0..c1).map(|_| rng.random_range(-0.2..0.2)).collect();
        kinds.push(LayerKind::BatchNorm2dFolded { scale: Tensor::from_vec(scale), shift: Tensor::from_vec(shift) });
    }
    let act = match rng.random_range(0..4) {
        0 => LayerKind::Relu,
        1 => LayerKind::Relu6,
        2 => LayerKind::ClippedRelu { tau: rng.random_range(0.5..2.0) },
        _ => LayerKind::RangeRestrict { lo: -0.5, hi: rng.random_range(0.5..2.0) },
    };
    kinds.push(act);
    if rng.random_bool(0.5) {
        // residual over a padded, depthwise or dense 3x3
        let src = kinds.len() - 1;
        let groups = if rng.random_bool(0.5) { c1 } else { 1 };
        kinds.push(conv(&mut rng, c1, c1, 3, 1, 1, groups));
        kinds.push(LayerKind::ResidualAdd { src });
        kinds.push(LayerKind::Relu);
    }
    let stride = rng.random_range(1..=2);
    if rng.random_bool(0.5) {
        kinds.push(LayerKind::MaxPool2d { kernel: 2, stride });
    } else {
        kinds.push(LayerKind::AvgPool2d { kernel: 2, stride });
    }
    hw = (hw - 2) / stride + 1;
    kinds.push(LayerKind::Flatten);
    let hidden = rng.random_range(4..=8);
    kinds.push(linear(&mut rng, c1 * hw * hw, hidden));
    kinds.push(LayerKind::Relu);
    kinds.push(linear(&mut rng, hidden, 4));
    Model::new(format!("micro-{seed}"), vec![cin, 7, 7], 4, named(kinds)).expect("valid architecture")
}

/// Uniform `[0, 1)` inputs shaped for `model`.
pub fn random_inputs(model: &Model, n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![n];
    shape.extend_from_slice(model.input_shape());
    let len = n * model.input_len();
    Tensor::new(shape, (0..len).map(|_| rng.random::<f32>()).collect()).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builders_produce_valid_models() {
        for m in [lenet_small(1), lenet5(1), mnist_micro(1), resnet_tiny(1), mobilenet_tiny(1), mlp(&[5, 4, 3], 1)] {
            let x = random_inputs(&m, 2, 0);
            let f = m.forward(&x).unwrap();
            assert_eq!(f.logits.shape(), &[2, m.classes()]);
        }
        for s in 0..32 {
            let m = random_micro(s);
            m.forward(&random_inputs(&m, 1, s)).unwrap();
        }
    }

    #[test]
    fn builders_are_seed_deterministic() {
        assert_eq!(lenet_small(5), lenet_small(5));
        assert_ne!(lenet_small(5), lenet_small(6));
    }
}
