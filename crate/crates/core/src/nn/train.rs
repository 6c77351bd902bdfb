//! Plain minibatch SGD with hand-written backward passes.
//!
//! Training is single-threaded and fully determined by the seed: the only
//! randomness is the per-epoch shuffle. Gradients are summed over a minibatch
//! in sample order before the update.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{pad_chw, softmax};
use super::{Dataset, LayerKind, Model, NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.03, epochs: 3, batch_size: 32, seed: 1 }
    }
}

/// What a sample is trained against.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Class(usize),
    Values(&'a [f32]),
}

/// Per-layer parameter gradients, parallel to `LayerKind::params`.
pub type Grads = Vec<Vec<Vec<f32>>>;

fn zero_grads(model: &Model) -> Grads {
    model
        .layers()
        .iter()
        .map(|l| l.kind.params().iter().map(|t| vec![0.0; t.len()]).collect())
        .collect()
}

pub fn check_differentiable(model: &Model) -> Result<(), NnError> {
    match model
        .layers()
        .iter()
        .find(|l| matches!(l.kind, LayerKind::RangeRestrict { .. }))
    {
        Some(l) => Err(NnError::NotDifferentiable(l.name.clone())),
        None => Ok(()),
    }
}

fn sample_loss(logits: &[f32], target: Target) -> (f64, Vec<f32>) {
    match target {
        Target::Class(c) => {
            let p = softmax(logits);
            let loss = -(p[c].max(f32::MIN_POSITIVE) as f64).ln();
            let mut d = p;
            d[c] -= 1.0;
            (loss, d)
        }
        Target::Values(t) => {
            let n = logits.len() as f32;
            let mut loss = 0.0f64;
            let d = logits
                .iter()
                .zip(t)
                .map(|(&y, &t)| {
                    loss += ((y - t) as f64).powi(2);
                    2.0 * (y - t) / n
                })
                .collect();
            (loss / n as f64, d)
        }
    }
}

/// Loss of one sample and accumulation of its parameter gradients into `grads`.
pub fn accumulate_gradients(model: &Model, x: &[f32], target: Target, grads: &mut Grads) -> f64 {
    let outputs = model.forward_sample_all(x);
    let n = model.layers().len();
    let (loss, dlogits) = sample_loss(&outputs[n - 1], target);
    let mut grad_out: Vec<Vec<f32>> = outputs.iter().map(|o| vec![0.0; o.len()]).collect();
    grad_out[n - 1] = dlogits;
    for i in (0..n).rev() {
        let dy = std::mem::take(&mut grad_out[i]);
        let input: &[f32] = if i == 0 { x } else { &outputs[i - 1] };
        let dx = backward_layer(model, i, input, &outputs[i], &dy, &mut grads[i]);
        if let LayerKind::ResidualAdd { src } = model.layers()[i].kind {
            grad_out[src].iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
        }
        if i > 0 {
            grad_out[i - 1].iter_mut().zip(&dx).for_each(|(g, d)| *g += d);
        }
    }
    loss
}

fn backward_layer(
    model: &Model,
    i: usize,
    x: &[f32],
    y: &[f32],
    dy: &[f32],
    g: &mut [Vec<f32>],
) -> Vec<f32> {
    let in_shape = model.layer_input_shape(i);
    let out_shape = model.layer_output_shape(i);
    let gate = |pass: &dyn Fn(f32) -> bool| -> Vec<f32> {
        x.iter().zip(dy).map(|(&v, &d)| if pass(v) { d } else { 0.0 }).collect()
    };
    match &model.layers()[i].kind {
        LayerKind::Conv2d(c) => {
            let (cin, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let p = c.padding;
            let padded = pad_chw(x, cin, h, w, p);
            let (hp, wp) = (h + 2 * p, w + 2 * p);
            let (co_n, ho, wo) = (out_shape[0], out_shape[1], out_shape[2]);
            let (k, s, cig) = (c.kernel(), c.stride, c.in_per_group());
            let cog = co_n / c.groups;
            let taps = cig * k * k;
            let wt = c.weight.data();
            let mut dpad = vec![0.0f32; padded.len()];
            let (gw, rest) = g.split_at_mut(1);
            let (gw, gb) = (&mut gw[0], &mut rest[0]);
            for co in 0..co_n {
                let ci0 = (co / cog) * cig;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let d = dy[(co * ho + oy) * wo + ox];
                        if d == 0.0 {
                            continue;
                        }
                        gb[co] += d;
                        let mut t = co * taps;
                        for ci in 0..cig {
                            let plane = (ci0 + ci) * hp * wp;
                            for ky in 0..k {
                                let row = plane + (oy * s + ky) * wp + ox * s;
                                for kx in 0..k {
                                    gw[t] += d * padded[row + kx];
                                    dpad[row + kx] += d * wt[t];
                                    t += 1;
                                }
                            }
                        }
                    }
                }
            }
            if p == 0 {
                return dpad;
            }
            let mut dx = Vec::with_capacity(x.len());
            for ch in 0..cin {
                for yy in 0..h {
                    let start = (ch * hp + yy + p) * wp + p;
                    dx.extend_from_slice(&dpad[start..start + w]);
                }
            }
            dx
        }
        LayerKind::Linear { weight, .. } => {
            let nin = x.len();
            let wt = weight.data();
            let mut dx = vec![0.0f32; nin];
            for (o, &d) in dy.iter().enumerate() {
                g[1][o] += d;
                let row = &wt[o * nin..(o + 1) * nin];
                let grow = &mut g[0][o * nin..(o + 1) * nin];
                for j in 0..nin {
                    grow[j] += d * x[j];
                    dx[j] += d * row[j];
                }
            }
            dx
        }
        LayerKind::BatchNorm2dFolded { scale, .. } => {
            let sc = scale.data();
            let plane = x.len() / sc.len();
            x.iter()
                .zip(dy)
                .enumerate()
                .map(|(j, (&v, &d))| {
                    let c = j / plane;
                    g[0][c] += d * v;
                    g[1][c] += d;
                    d * sc[c]
                })
                .collect()
        }
        LayerKind::Relu => gate(&|v| v > 0.0),
        LayerKind::Relu6 => gate(&|v| v > 0.0 && v < 6.0),
        LayerKind::ClippedRelu { tau } => {
            let tau = *tau;
            gate(&move |v| v > 0.0 && v < tau)
        }
        LayerKind::RangeRestrict { .. } => unreachable!("rejected by check_differentiable"),
        LayerKind::MaxPool2d { kernel, stride } => {
            let (h, w) = (in_shape[1], in_shape[2]);
            let (c, ho, wo) = (out_shape[0], out_shape[1], out_shape[2]);
            let mut dx = vec![0.0f32; x.len()];
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let o = (ch * ho + oy) * wo + ox;
                        let base = ch * h * w + oy * stride * w + ox * stride;
                        // the first tap equal to the forward result received it
                        let hit = (0..kernel * kernel)
                            .map(|t| base + (t / kernel) * w + t % kernel)
                            .find(|&j| x[j].to_bits() == y[o].to_bits())
                            .unwrap_or(base);
                        dx[hit] += dy[o];
                    }
                }
            }
            dx
        }
        LayerKind::AvgPool2d { kernel, stride } => {
            let (h, w) = (in_shape[1], in_shape[2]);
            let (c, ho, wo) = (out_shape[0], out_shape[1], out_shape[2]);
            let inv = super::ops::avgpool_scale(*kernel);
            let mut dx = vec![0.0f32; x.len()];
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let d = dy[(ch * ho + oy) * wo + ox] * inv;
                        let base = ch * h * w + oy * stride * w + ox * stride;
                        for ky in 0..*kernel {
                            for kx in 0..*kernel {
                                dx[base + ky * w + kx] += d;
                            }
                        }
                    }
                }
            }
            dx
        }
        LayerKind::Flatten | LayerKind::ResidualAdd { .. } => dy.to_vec(),
    }
}

fn apply_update(model: &mut Model, grads: &Grads, step: f32) {
    for (layer, lg) in model.layers_mut().iter_mut().zip(grads) {
        for (t, g) in layer.kind.params_mut().into_iter().zip(lg) {
            t.data_mut().iter_mut().zip(g).for_each(|(p, &d)| *p -= step * d);
        }
    }
}

fn mean_loss<'a>(model: &Model, inputs: &Tensor, target: impl Fn(usize) -> Target<'a>) -> f64 {
    let n = inputs.batch_len();
    let total: f64 = (0..n)
        .map(|i| sample_loss(&model.forward_sample(inputs.sample(i)), target(i)).0)
        .sum();
    total / n as f64
}

/// Mean cross-entropy over a dataset.
pub fn dataset_loss(model: &Model, ds: &Dataset) -> f64 {
    mean_loss(model, &ds.images, |i| Target::Class(ds.labels[i]))
}

fn sgd<'a>(
    model: &Model,
    inputs: &Tensor,
    target: impl Fn(usize) -> Target<'a> + Copy,
    cfg: &TrainConfig,
) -> Result<Model, NnError> {
    check_differentiable(model)?;
    if inputs.batch_len() == 0 {
        return Err(NnError::EmptyDataset);
    }
    if cfg.epochs == 0 {
        return Ok(model.clone());
    }
    let n = inputs.batch_len();
    let bs = cfg.batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut current = model.clone();
    let mut best = (mean_loss(model, inputs, target), model.clone());
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let mut grads = zero_grads(&current);
            for &i in chunk {
                accumulate_gradients(&current, inputs.sample(i), target(i), &mut grads);
            }
            apply_update(&mut current, &grads, cfg.lr / chunk.len() as f32);
        }
        let loss = mean_loss(&current, inputs, target);
        // keep the lowest-loss checkpoint, never returning a worse model
        if loss <= best.0 {
            best = (loss, current.clone());
        }
    }
    Ok(best.1)
}

/// Classification training with softmax cross-entropy.
pub fn train(model: &Model, ds: &Dataset, cfg: &TrainConfig) -> Result<Model, NnError> {
    ds.check_classes(model.classes())?;
    sgd(model, &ds.images, |i| Target::Class(ds.labels[i]), cfg)
}

/// Regression training with mean squared error against `targets` (`[N, outputs]`).
pub fn train_regression(model: &Model, inputs: &Tensor, targets: &Tensor, cfg: &TrainConfig) -> Result<Model, NnError> {
    if targets.batch_len() != inputs.batch_len() {
        return Err(NnError::Dataset("input/target count mismatch".into()));
    }
    sgd(model, inputs, |i| Target::Values(targets.sample(i)), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{arch, Layer, Split};
    use rand::Rng;

    #[test]
    fn zero_epochs_is_identity() {
        let m = arch::mlp(&[4, 3], 2);
        let ds = Dataset::new(arch::random_inputs(&m, 6, 1), vec![0, 1, 2, 0, 1, 2], Split::Train).unwrap();
        let out = train(&m, &ds, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(crate::nn::io::encode_model(&out), crate::nn::io::encode_model(&m));
    }

    #[test]
    fn linear_regression_recovers_slope() {
        // y = 2x, closed-form least squares slope is exactly 2 with zero intercept
        let m = Model::new(
            "lin",
            vec![1],
            1,
            vec![Layer::new(
                "fc",
                LayerKind::Linear { weight: Tensor::new(vec![1, 1], vec![0.1]).unwrap(), bias: Tensor::from_vec(vec![0.0]) },
            )],
        )
        .unwrap();
        let xs: Vec<f32> = (0..20).map(|i| i as f32 / 10.0 - 1.0).collect();
        let ys: Vec<f32> = xs.iter().map(|x| 2.0 * x).collect();
        let inputs = Tensor::new(vec![20, 1], xs.clone()).unwrap();
        let targets = Tensor::new(vec![20, 1], ys).unwrap();
        let cfg = TrainConfig { lr: 0.1, epochs: 200, batch_size: 4, seed: 3 };
        let out = train_regression(&m, &inputs, &targets, &cfg).unwrap();
        let LayerKind::Linear { weight, bias } = &out.layers()[0].kind else { panic!() };
        // least-squares oracle: sum(xy)/sum(x²) with centered data
        let sxy: f64 = xs.iter().map(|&x| x as f64 * 2.0 * x as f64).sum();
        let sxx: f64 = xs.iter().map(|&x| (x as f64).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((weight.data()[0] as f64 - slope).abs() < 1e-3, "{}", weight.data()[0]);
        assert!(bias.data()[0].abs() < 1e-3);
    }

    #[test]
    fn range_restrict_is_not_trainable() {
        let m = Model::new(
            "rr",
            vec![2],
            2,
            vec![
                Layer::new("fc", arch::linear(&mut ChaCha8Rng::seed_from_u64(0), 2, 2)),
                Layer::new("rr", LayerKind::RangeRestrict { lo: -1.0, hi: 1.0 }),
            ],
        )
        .unwrap();
        let ds = Dataset::new(arch::random_inputs(&m, 2, 0), vec![0, 1], Split::Train).unwrap();
        assert!(matches!(train(&m, &ds, &TrainConfig::default()), Err(NnError::NotDifferentiable(_))));
    }

    #[test]
    fn loss_never_increases() {
        let m = arch::random_micro(4);
        let x = arch::random_inputs(&m, 24, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = (0..24).map(|_| rng.random_range(0..4)).collect();
        let ds = Dataset::new(x, labels, Split::Train).unwrap();
        let before = dataset_loss(&m, &ds);
        let out = train(&m, &ds, &TrainConfig { lr: 0.5, epochs: 3, batch_size: 8, seed: 1 }).unwrap();
        assert!(dataset_loss(&out, &ds) <= before);
        let again = train(&m, &ds, &TrainConfig { lr: 0.5, epochs: 3, batch_size: 8, seed: 1 }).unwrap();
        assert_eq!(out, again);
    }
}
