//! Per-sample layer kernels with a fixed accumulation order.
//!
//! Every function here is mirrored instruction-for-instruction by the
//! register-machine lowering, so any change to a loop order must be made in
//! both places.

use crate::numeric::{clamp, max_num, min_num};

use super::layer::Conv2d;

/// Copy `[C, H, W]` into a zero border of width `pad`.
pub fn pad_chw(x: &[f32], c: usize, h: usize, w: usize, pad: usize) -> Vec<f32> {
    if pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = (ch * hp + y + pad) * wp + pad;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

pub fn conv2d(conv: &Conv2d, x: &[f32], in_shape: &[usize], out_shape: &[usize]) -> Vec<f32> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let padded = pad_chw(x, c, h, w, conv.padding);
    let (hp, wp) = (h + 2 * conv.padding, w + 2 * conv.padding);
    let (co_n, ho, wo) = (out_shape[0], out_shape[1], out_shape[2]);
    let k = conv.kernel();
    let s = conv.stride;
    let cig = conv.in_per_group();
    let cog = co_n / conv.groups;
    let wt = conv.weight.data();
    let bias = conv.bias.data();
    let taps = cig * k * k;
    let mut out = vec![0.0f32; co_n * ho * wo];
    for co in 0..co_n {
        let ci0 = (co / cog) * cig;
        let wrow = &wt[co * taps..(co + 1) * taps];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = bias[co];
                let mut t = 0;
                for ci in 0..cig {
                    let plane = &padded[(ci0 + ci) * hp * wp..(ci0 + ci + 1) * hp * wp];
                    for ky in 0..k {
                        let row = (oy * s + ky) * wp + ox * s;
                        for kx in 0..k {
                            acc = wrow[t].mul_add(plane[row + kx], acc);
                            t += 1;
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

pub fn linear(weight: &[f32], bias: &[f32], x: &[f32]) -> Vec<f32> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &weight[o * n_in..(o + 1) * n_in];
            row.iter().zip(x).fold(b, |acc, (&w, &xi)| w.mul_add(xi, acc))
        })
        .collect()
}

pub fn batchnorm_folded(scale: &[f32], shift: &[f32], x: &[f32]) -> Vec<f32> {
    let plane = x.len() / scale.len();
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / plane;
            v.mul_add(scale[c], shift[c])
        })
        .collect()
}

pub fn relu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| max_num(v, 0.0)).collect()
}

pub fn relu6(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| min_num(max_num(v, 0.0), 6.0)).collect()
}

pub fn clipped_relu(x: &[f32], tau: f32) -> Vec<f32> {
    x.iter().map(|&v| min_num(max_num(v, 0.0), tau)).collect()
}

pub fn range_restrict(x: &[f32], lo: f32, hi: f32) -> Vec<f32> {
    x.iter().map(|&v| clamp(v, lo, hi)).collect()
}

pub fn maxpool2d(x: &[f32], in_shape: &[usize], out_shape: &[usize], k: usize, s: usize) -> Vec<f32> {
    let (h, w) = (in_shape[1], in_shape[2]);
    let (c, ho, wo) = (out_shape[0], out_shape[1], out_shape[2]);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = oy * s * w + ox * s;
                let mut acc = plane[base];
                for ky in 0..k {
                    for kx in 0..k {
                        if ky + kx > 0 {
                            acc = max_num(acc, plane[base + ky * w + kx]);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

pub fn avgpool2d(x: &[f32], in_shape: &[usize], out_shape: &[usize], k: usize, s: usize) -> Vec<f32> {
    let (h, w) = (in_shape[1], in_shape[2]);
    let (c, ho, wo) = (out_shape[0], out_shape[1], out_shape[2]);
    let inv = avgpool_scale(k);
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let base = oy * s * w + ox * s;
                let mut acc = plane[base];
                for ky in 0..k {
                    for kx in 0..k {
                        if ky + kx > 0 {
                            acc += plane[base + ky * w + kx];
                        }
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    out
}

pub fn avgpool_scale(k: usize) -> f32 {
    1.0f32 / (k * k) as f32
}

pub fn residual_add(x: &[f32], src: &[f32]) -> Vec<f32> {
    x.iter().zip(src).map(|(a, b)| a + b).collect()
}

/// Row softmax: `exp(l - max) / sum`, summed left to right.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().copied().fold(f32::NAN, max_num);
    let e: Vec<f32> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f32 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn relu_definition() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu6_saturates() {
        assert_eq!(relu6(&[7.5, 3.0, -2.0]), vec![6.0, 3.0, 0.0]);
    }

    #[test]
    fn clipped_relu_caps_at_tau() {
        assert_eq!(clipped_relu(&[4.0, 1.0], 2.0), vec![2.0, 1.0]);
    }

    #[test]
    fn range_restrict_saturates() {
        assert_eq!(range_restrict(&[12.0, -3.0, 5.0], -1.0, 10.0), vec![10.0, -1.0, 5.0]);
    }

    #[test]
    fn conv_matches_hand_computation() {
        // 1x3x3 input, one 2x2 kernel of ones, bias 0.5
        let conv = Conv2d {
            weight: Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]).unwrap(),
            bias: Tensor::from_vec(vec![0.5]),
            stride: 1,
            padding: 0,
            groups: 1,
        };
        let x: Vec<f32> = (1..=9).map(|v| v as f32).collect();
        let y = conv2d(&conv, &x, &[1, 3, 3], &[1, 2, 2]);
        assert_eq!(y, vec![12.5, 16.5, 24.5, 28.5]);
    }

    #[test]
    fn padding_adds_zero_border() {
        let p = pad_chw(&[1.0, 2.0, 3.0, 4.0], 1, 2, 2, 1);
        assert_eq!(p.len(), 16);
        assert_eq!(&p[5..7], &[1.0, 2.0]);
        assert_eq!(&p[9..11], &[3.0, 4.0]);
        assert_eq!(p.iter().sum::<f32>(), 10.0);
    }

    #[test]
    fn pools() {
        let x = [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 1.0, 0.5];
        assert_eq!(maxpool2d(&x, &[1, 3, 3], &[1, 2, 2], 2, 1), vec![5.0, 5.0, 8.0, 4.0]);
        assert_eq!(avgpool2d(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2], &[1, 1, 1], 2, 2), vec![2.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let c = softmax(&[1.0, 2.0, 3.0, -4.0]);
        let s: f32 = c.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!(c[2] > c[1] && c[1] > c[0]);
    }
}
