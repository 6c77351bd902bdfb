use std::collections::BTreeMap;

use super::ops;
use super::{Dataset, Layer, LayerKind, NnError, Tensor};
use crate::hardening::HardeningKind;
use crate::numeric::argmax;

/// Ordered layer graph with per-sample shape bookkeeping.
///
/// Construction validates every shape, so a built model never fails
/// mid-forward on a correctly shaped input.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
    pub hardening: HardeningKind,
    pub metadata: BTreeMap<String, String>,
}

/// Logits and their softmax, both `[N, classes]`.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Tensor,
    pub confidences: Tensor,
}

impl Model {
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        classes: usize,
        layers: Vec<Layer>,
    ) -> Result<Self, NnError> {
        let mut model = Self {
            name: name.into(),
            input_shape,
            classes,
            layers,
            shapes: Vec::new(),
            hardening: HardeningKind::Baseline,
            metadata: BTreeMap::new(),
        };
        model.shapes = model.infer_shapes()?;
        Ok(model)
    }

    fn infer_shapes(&self) -> Result<Vec<Vec<usize>>, NnError> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(NnError::Shape(format!("bad input shape {:?}", self.input_shape)));
        }
        if self.layers.is_empty() {
            return Err(NnError::Shape("model has no layers".into()));
        }
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { &self.input_shape } else { &shapes[i - 1] };
            let residual = match layer.kind {
                LayerKind::ResidualAdd { src } if src < i => {
                    Some(shapes[src].as_slice())
                }
                LayerKind::ResidualAdd { src } => {
                    return Err(NnError::Shape(format!(
                        "layer {i} '{}': residual source {src} is not an earlier layer",
                        layer.name
                    )))
                }
                _ => None,
            };
            shapes.push(layer.output_shape(input, residual)?);
        }
        let last = shapes.last().expect("non-empty");
        if last != &[self.classes] {
            return Err(NnError::Shape(format!(
                "final layer outputs {last:?}, expected [{}]",
                self.classes
            )));
        }
        Ok(shapes)
    }

    /// Rebuild cached shapes after deserialization or a layer edit.
    pub fn revalidate(&mut self) -> Result<(), NnError> {
        self.shapes = self.infer_shapes()?;
        Ok(())
    }

    /// Replace the layer list, re-checking shapes.
    pub fn with_layers(&self, layers: Vec<Layer>) -> Result<Self, NnError> {
        let mut m = self.clone();
        m.layers = layers;
        m.revalidate()?;
        Ok(m)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable layer access for in-place parameter edits (shapes must not change).
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn layer_output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn layer_input_shape(&self, i: usize) -> &[usize] {
        if i == 0 {
            &self.input_shape
        } else {
            &self.shapes[i - 1]
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Total scalar parameter count over all weighted layers.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.kind.params())
            .map(Tensor::len)
            .sum()
    }

    fn check_batch(&self, batch: &Tensor) -> Result<(), NnError> {
        if batch.shape().len() != self.input_shape.len() + 1
            || batch.shape()[1..] != self.input_shape[..]
        {
            return Err(NnError::Shape(format!(
                "batch shape {:?} does not match model input [N, {:?}]",
                batch.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Run one layer on `x`, given all earlier outputs (for residual sources).
    pub fn apply_layer(&self, i: usize, x: &[f32], outputs: &[Vec<f32>]) -> Vec<f32> {
        let in_shape = self.layer_input_shape(i);
        let out_shape = &self.shapes[i];
        match &self.layers[i].kind {
            LayerKind::Conv2d(c) => ops::conv2d(c, x, in_shape, out_shape),
            LayerKind::Linear { weight, bias } => ops::linear(weight.data(), bias.data(), x),
            LayerKind::BatchNorm2dFolded { scale, shift } => {
                ops::batchnorm_folded(scale.data(), shift.data(), x)
            }
            LayerKind::Relu => ops::relu(x),
            LayerKind::Relu6 => ops::relu6(x),
            LayerKind::ClippedRelu { tau } => ops::clipped_relu(x, *tau),
            LayerKind::RangeRestrict { lo, hi } => ops::range_restrict(x, *lo, *hi),
            LayerKind::MaxPool2d { kernel, stride } => {
                ops::maxpool2d(x, in_shape, out_shape, *kernel, *stride)
            }
            LayerKind::AvgPool2d { kernel, stride } => {
                ops::avgpool2d(x, in_shape, out_shape, *kernel, *stride)
            }
            LayerKind::Flatten => x.to_vec(),
            LayerKind::ResidualAdd { src } => ops::residual_add(x, &outputs[*src]),
        }
    }

    /// Forward one sample, calling `hook(layer, output)` after every layer.
    /// The hook may rewrite the output (feature-map fault injection).
    pub fn forward_sample_with<F>(&self, x: &[f32], mut hook: F) -> Vec<Vec<f32>>
    where
        F: FnMut(usize, &mut Vec<f32>),
    {
        let mut outputs: Vec<Vec<f32>> = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let input = if i == 0 { x } else { &outputs[i - 1] };
            let mut y = self.apply_layer(i, input, &outputs);
            hook(i, &mut y);
            outputs.push(y);
        }
        outputs
    }

    /// Every layer's output for one sample.
    pub fn forward_sample_all(&self, x: &[f32]) -> Vec<Vec<f32>> {
        self.forward_sample_with(x, |_, _| {})
    }

    /// Logits for one sample.
    pub fn forward_sample(&self, x: &[f32]) -> Vec<f32> {
        self.forward_sample_all(x).pop().expect("model has layers")
    }

    /// Resume a forward at layer `start` from cached golden outputs of layers
    /// `< start`. Used to skip recomputation ahead of an injected layer.
    pub fn forward_from(&self, start: usize, cached: &[Vec<f32>], input: &[f32]) -> Vec<f32> {
        self.resume(cached[..start].to_vec(), input)
    }

    /// Continue a forward whose first `outputs.len()` layer outputs are given.
    pub fn resume(&self, mut outputs: Vec<Vec<f32>>, input: &[f32]) -> Vec<f32> {
        for i in outputs.len()..self.layers.len() {
            let x = if i == 0 { input } else { &outputs[i - 1] };
            let y = self.apply_layer(i, x, &outputs);
            outputs.push(y);
        }
        outputs.pop().expect("model has layers")
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Forward, NnError> {
        self.check_batch(batch)?;
        let n = batch.batch_len();
        let mut logits = Vec::with_capacity(n * self.classes);
        let mut conf = Vec::with_capacity(n * self.classes);
        for i in 0..n {
            let l = self.forward_sample(batch.sample(i));
            conf.extend(ops::softmax(&l));
            logits.extend(l);
        }
        Ok(Forward {
            logits: Tensor::new(vec![n, self.classes], logits)?,
            confidences: Tensor::new(vec![n, self.classes], conf)?,
        })
    }

    /// Top-1 predictions (lowest index wins ties).
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>, NnError> {
        let f = self.forward(batch)?;
        Ok((0..batch.batch_len()).map(|i| argmax(f.confidences.sample(i))).collect())
    }

    pub fn accuracy(&self, ds: &Dataset) -> Result<f64, NnError> {
        if ds.is_empty() {
            return Err(NnError::EmptyDataset);
        }
        let preds = self.predict(&ds.images)?;
        Ok(accuracy_of(&preds, &ds.labels))
    }
}

pub fn accuracy_of(preds: &[usize], labels: &[usize]) -> f64 {
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len() as f64
}

/// Confidence rows (softmax of `logits`) for a batch of logit rows.
pub fn confidences_of(logits: &[f32], classes: usize) -> Vec<f32> {
    logits.chunks(classes).flat_map(ops::softmax).collect()
}
