use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

/// 2-D convolution over `[C, H, W]` samples.
///
/// Weight layout is `[out, in / groups, k, k]`. Padding is materialized as an
/// explicit zero border before the valid convolution runs, and every output
/// accumulates `bias` then fused multiply-adds over taps in `(ci, ky, kx)`
/// order. The register-machine lowering emits the exact same sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2d {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_per_group(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn in_channels(&self) -> usize {
        self.in_per_group() * self.groups
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerKind {
    Conv2d(Conv2d),
    /// `weight: [out, in]`, `bias: [out]`; accumulation is bias then FMA over `in`.
    Linear { weight: Tensor, bias: Tensor },
    /// Inference-time batch norm folded into `x * scale + shift` per channel (one FMA).
    BatchNorm2dFolded { scale: Tensor, shift: Tensor },
    Relu,
    Relu6,
    ClippedRelu { tau: f32 },
    RangeRestrict { lo: f32, hi: f32 },
    /// Max over the window, seeded with the top-left tap, row-major order.
    MaxPool2d { kernel: usize, stride: usize },
    /// Sum over the window (top-left first, row-major) then multiply by `1 / k²`.
    AvgPool2d { kernel: usize, stride: usize },
    Flatten,
    /// Elementwise `input + output[src]`, `src` being an earlier layer index.
    ResidualAdd { src: usize },
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::Linear { .. } => "linear",
            LayerKind::BatchNorm2dFolded { .. } => "batchnorm2d_folded",
            LayerKind::Relu => "relu",
            LayerKind::Relu6 => "relu6",
            LayerKind::ClippedRelu { .. } => "clipped_relu",
            LayerKind::RangeRestrict { .. } => "range_restrict",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::AvgPool2d { .. } => "avgpool2d",
            LayerKind::Flatten => "flatten",
            LayerKind::ResidualAdd { .. } => "residual_add",
        }
    }

    pub fn is_activation(&self) -> bool {
        matches!(
            self,
            LayerKind::Relu | LayerKind::Relu6 | LayerKind::ClippedRelu { .. }
        )
    }

    /// Layers whose outputs are feature maps produced from weights.
    pub fn is_weighted(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d(_) | LayerKind::Linear { .. } | LayerKind::BatchNorm2dFolded { .. }
        )
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            LayerKind::Conv2d(c) => vec![&c.weight, &c.bias],
            LayerKind::Linear { weight, bias } => vec![weight, bias],
            LayerKind::BatchNorm2dFolded { scale, shift } => vec![scale, shift],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            LayerKind::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            LayerKind::Linear { weight, bias } => vec![weight, bias],
            LayerKind::BatchNorm2dFolded { scale, shift } => vec![scale, shift],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self { name: name.into(), kind }
    }

    /// Output shape for a given input shape. `residual` is the shape of the
    /// `ResidualAdd` source, when applicable.
    pub fn output_shape(
        &self,
        input: &[usize],
        residual: Option<&[usize]>,
    ) -> Result<Vec<usize>, NnError> {
        let bad = |msg: String| Err(NnError::Shape(format!("layer '{}': {msg}", self.name)));
        match &self.kind {
            LayerKind::Conv2d(c) => {
                if input.len() != 3 {
                    return bad(format!("conv2d expects [C, H, W], got {input:?}"));
                }
                let ws = c.weight.shape();
                if ws.len() != 4 || ws[2] != ws[3] || ws[2] == 0 {
                    return bad(format!("conv weight must be [out, in/g, k, k], got {ws:?}"));
                }
                if c.groups == 0 || c.stride == 0 || ws[0] % c.groups != 0 {
                    return bad("groups/stride must be positive and divide out channels".into());
                }
                if c.in_channels() != input[0] {
                    return bad(format!(
                        "conv expects {} input channels, got {}",
                        c.in_channels(),
                        input[0]
                    ));
                }
                if c.bias.shape() != [ws[0]] {
                    return bad(format!("conv bias must be [{}]", ws[0]));
                }
                let (h, w) = (input[1] + 2 * c.padding, input[2] + 2 * c.padding);
                let k = ws[2];
                if h < k || w < k {
                    return bad(format!("kernel {k} larger than padded input {h}x{w}"));
                }
                Ok(vec![ws[0], (h - k) / c.stride + 1, (w - k) / c.stride + 1])
            }
            LayerKind::Linear { weight, bias } => {
                let ws = weight.shape();
                if input.len() != 1 {
                    return bad(format!("linear expects a flat input, got {input:?}"));
                }
                if ws.len() != 2 || ws[1] != input[0] {
                    return bad(format!("linear weight {ws:?} does not accept {} inputs", input[0]));
                }
                if bias.shape() != [ws[0]] {
                    return bad(format!("linear bias must be [{}]", ws[0]));
                }
                Ok(vec![ws[0]])
            }
            LayerKind::BatchNorm2dFolded { scale, shift } => {
                if scale.shape() != [input[0]] || shift.shape() != [input[0]] {
                    return bad(format!("batch norm params must be [{}]", input[0]));
                }
                Ok(input.to_vec())
            }
            LayerKind::ClippedRelu { tau } => {
                if !(*tau > 0.0) {
                    return bad(format!("clipped relu threshold must be > 0, got {tau}"));
                }
                Ok(input.to_vec())
            }
            LayerKind::RangeRestrict { lo, hi } => {
                if !(lo <= hi) {
                    return bad(format!("range restriction needs lo <= hi, got [{lo}, {hi}]"));
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu | LayerKind::Relu6 => Ok(input.to_vec()),
            LayerKind::MaxPool2d { kernel, stride } | LayerKind::AvgPool2d { kernel, stride } => {
                if input.len() != 3 {
                    return bad(format!("pooling expects [C, H, W], got {input:?}"));
                }
                if *kernel == 0 || *stride == 0 || input[1] < *kernel || input[2] < *kernel {
                    return bad(format!("pool window {kernel}/{stride} does not fit {input:?}"));
                }
                Ok(vec![
                    input[0],
                    (input[1] - kernel) / stride + 1,
                    (input[2] - kernel) / stride + 1,
                ])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::ResidualAdd { .. } => match residual {
                Some(r) if r == input => Ok(input.to_vec()),
                Some(r) => bad(format!("residual source shape {r:?} differs from {input:?}")),
                None => bad("residual source missing".into()),
            },
        }
    }
}
