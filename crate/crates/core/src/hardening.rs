//! Software hardening transforms: Ranger range restriction, Adaptive Clipper
//! percentile clipping and the ReLU6 swap. Each maps a baseline model to a
//! new model and refuses anything already hardened.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::train::{check_differentiable, train, TrainConfig};
use crate::nn::{Dataset, Layer, LayerKind, Model, NnError};
use crate::numeric::{max_num, min_num};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardeningKind {
    Baseline,
    Ranger,
    AdaptiveClipper,
    SwapRelu6,
}

impl HardeningKind {
    pub const ALL: [HardeningKind; 4] = [Self::Baseline, Self::Ranger, Self::AdaptiveClipper, Self::SwapRelu6];

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(c: u32) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Ranger => "ranger",
            Self::AdaptiveClipper => "adaptive_clipper",
            Self::SwapRelu6 => "swap_relu6",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "baseline" | "bl" => Some(Self::Baseline),
            "ranger" | "r" => Some(Self::Ranger),
            "adaptive_clipper" | "clipper" | "ac" => Some(Self::AdaptiveClipper),
            "swap_relu6" | "relu6" | "sr" => Some(Self::SwapRelu6),
            _ => None,
        }
    }
}

impl std::fmt::Display for HardeningKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum HardeningError {
    #[error("model is already hardened ({0})")]
    NotBaseline(HardeningKind),
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("range profile does not match the model: {0}")]
    ProfileMismatch(String),
    #[error("model has no ReLU layer to replace")]
    NoRelu,
    #[error("percentile {0} outside (0, 100]")]
    Percentile(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Granularity of Ranger sites: every activation output and residual sum.
pub const SITE_GRANULARITY: &str = "activation+residual";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeSite {
    pub layer: usize,
    pub lo: f32,
    pub hi: f32,
}

/// Per-site value bounds observed on a calibration set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeProfile {
    pub sites: Vec<RangeSite>,
    pub calibration: String,
    pub granularity: String,
    /// Layer tags of the profiled model, checked on application.
    pub architecture: Vec<String>,
}

fn architecture(model: &Model) -> Vec<String> {
    model.layers().iter().map(|l| l.kind.tag().to_string()).collect()
}

/// Layers whose outputs Ranger bounds.
pub fn range_sites(model: &Model) -> Vec<usize> {
    model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind.is_activation() || matches!(l.kind, LayerKind::ResidualAdd { .. }))
        .map(|(i, _)| i)
        .collect()
}

fn require_baseline(model: &Model) -> Result<(), HardeningError> {
    match model.hardening {
        HardeningKind::Baseline => Ok(()),
        k => Err(HardeningError::NotBaseline(k)),
    }
}

/// Min/max of every site output over the calibration set.
pub fn profile_ranges(model: &Model, calib: &Dataset) -> Result<RangeProfile, HardeningError> {
    require_baseline(model)?;
    if calib.is_empty() {
        return Err(HardeningError::EmptyCalibration);
    }
    let sites = range_sites(model);
    let mut bounds = vec![(f32::NAN, f32::NAN); sites.len()];
    for s in 0..calib.len() {
        let outs = model.forward_sample_all(calib.images.sample(s));
        for (b, &l) in bounds.iter_mut().zip(&sites) {
            for &v in &outs[l] {
                b.0 = min_num(b.0, v);
                b.1 = max_num(b.1, v);
            }
        }
    }
    Ok(RangeProfile {
        sites: sites.iter().zip(bounds).map(|(&layer, (lo, hi))| RangeSite { layer, lo, hi }).collect(),
        calibration: format!("{:?}:{}", calib.split, calib.len()).to_lowercase(),
        granularity: SITE_GRANULARITY.into(),
        architecture: architecture(model),
    })
}

/// Insert a saturating `RangeRestrict(lo, hi)` after every profiled site.
/// Residual sources that pointed at a site now read its restricted output.
pub fn apply_ranger(model: &Model, prof: &RangeProfile) -> Result<Model, HardeningError> {
    require_baseline(model)?;
    if prof.architecture != architecture(model) {
        return Err(HardeningError::ProfileMismatch("layer kinds differ".into()));
    }
    let sites = range_sites(model);
    if prof.sites.iter().map(|s| s.layer).collect::<Vec<_>>() != sites {
        return Err(HardeningError::ProfileMismatch("site list differs".into()));
    }
    for s in &prof.sites {
        if !(s.lo <= s.hi) {
            return Err(HardeningError::ProfileMismatch(format!("layer {}: lo > hi", s.layer)));
        }
    }
    // new index of each old layer's (possibly restricted) output
    let mut remap = Vec::with_capacity(model.layers().len());
    let mut layers = Vec::new();
    let mut next_site = prof.sites.iter().peekable();
    for (i, l) in model.layers().iter().enumerate() {
        let mut l = l.clone();
        if let LayerKind::ResidualAdd { src } = &mut l.kind {
            *src = remap[*src];
        }
        layers.push(l);
        if let Some(s) = next_site.next_if(|s| s.layer == i) {
            let name = format!("{}_range", model.layers()[i].name);
            layers.push(Layer::new(name, LayerKind::RangeRestrict { lo: s.lo, hi: s.hi }));
        }
        remap.push(layers.len() - 1);
    }
    let mut m = model.with_layers(layers)?;
    m.hardening = HardeningKind::Ranger;
    m.metadata.insert("ranger.calibration".into(), prof.calibration.clone());
    m.metadata.insert("ranger.granularity".into(), prof.granularity.clone());
    m.metadata.insert("ranger.sites".into(), prof.sites.len().to_string());
    Ok(m)
}

fn finetune(model: Model, finetune: Option<(&Dataset, &TrainConfig)>) -> Result<Model, HardeningError> {
    match finetune {
        Some((ds, cfg)) => {
            check_differentiable(&model)?;
            let mut m = train(&model, ds, cfg)?;
            m.metadata.insert(
                "finetune".into(),
                format!("sgd lr={} epochs={} batch={} seed={} samples={}", cfg.lr, cfg.epochs, cfg.batch_size, cfg.seed, ds.len()),
            );
            Ok(m)
        }
        None => Ok(model),
    }
}

/// Replace every ReLU with ReLU6, optionally fine-tuning afterwards.
pub fn apply_swap_relu6(model: &Model, tune: Option<(&Dataset, &TrainConfig)>) -> Result<Model, HardeningError> {
    require_baseline(model)?;
    if !model.layers().iter().any(|l| matches!(l.kind, LayerKind::Relu)) {
        return Err(HardeningError::NoRelu);
    }
    let layers = model
        .layers()
        .iter()
        .map(|l| match l.kind {
            LayerKind::Relu => Layer::new(l.name.clone(), LayerKind::Relu6),
            _ => l.clone(),
        })
        .collect();
    let mut m = model.with_layers(layers)?;
    m.hardening = HardeningKind::SwapRelu6;
    finetune(m, tune)
}

pub const DEFAULT_PERCENTILE: f64 = 99.9;

/// Percentile of `values` at 0-based sorted index `ceil(p/100 * (n-1))`:
/// `p = 100` is the maximum, and `{0..99}` at `p = 99` gives 99.
pub fn percentile(values: &mut [f32], p: f64) -> f32 {
    assert!(!values.is_empty());
    let n = values.len();
    let idx = ((p / 100.0 * (n - 1) as f64 - 1e-9).ceil().max(0.0) as usize).min(n - 1);
    *values.select_nth_unstable_by(idx, f32::total_cmp).1
}

/// Replace every ReLU with `ClippedRelu(tau)`, `tau` being the `p`-th
/// percentile of that site's calibration outputs. A site with no positive
/// percentile falls back to its smallest positive value, else 1.0; the
/// fallback is recorded in the metadata.
pub fn apply_adaptive_clipper(
    model: &Model,
    calib: &Dataset,
    p: f64,
    tune: Option<(&Dataset, &TrainConfig)>,
) -> Result<Model, HardeningError> {
    require_baseline(model)?;
    if !(p > 0.0 && p <= 100.0) {
        return Err(HardeningError::Percentile(p));
    }
    if calib.is_empty() {
        return Err(HardeningError::EmptyCalibration);
    }
    let sites: Vec<usize> =
        model.layers().iter().enumerate().filter(|(_, l)| matches!(l.kind, LayerKind::Relu)).map(|(i, _)| i).collect();
    if sites.is_empty() {
        return Err(HardeningError::NoRelu);
    }
    let mut values: Vec<Vec<f32>> = vec![Vec::new(); sites.len()];
    for s in 0..calib.len() {
        let outs = model.forward_sample_all(calib.images.sample(s));
        for (v, &l) in values.iter_mut().zip(&sites) {
            v.extend_from_slice(&outs[l]);
        }
    }
    let mut layers = model.layers().to_vec();
    let mut meta = Vec::new();
    for (v, &l) in values.iter_mut().zip(&sites) {
        let mut tau = percentile(v, p);
        if !(tau > 0.0) || !tau.is_finite() {
            let smallest = v.iter().copied().filter(|x| *x > 0.0 && x.is_finite()).fold(f32::INFINITY, f32::min);
            tau = if smallest.is_finite() { smallest } else { 1.0 };
            meta.push((format!("clipper.fallback.{l}"), format!("{tau}")));
        }
        meta.push((format!("clipper.tau.{l}"), format!("{tau}")));
        layers[l] = Layer::new(layers[l].name.clone(), LayerKind::ClippedRelu { tau });
    }
    let mut m = model.with_layers(layers)?;
    m.hardening = HardeningKind::AdaptiveClipper;
    m.metadata.insert("clipper.percentile".into(), p.to_string());
    m.metadata.insert("clipper.rule".into(), "percentile index ceil(p/100*(n-1)) over all site outputs".into());
    m.metadata.insert("clipper.calibration".into(), format!("{:?}:{}", calib.split, calib.len()).to_lowercase());
    m.metadata.extend(meta);
    finetune(m, tune)
}

/// Human-readable bounds and thresholds of a hardened model.
pub fn manifest(model: &Model) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "model: {}", model.name);
    let _ = writeln!(s, "hardening: {}", model.hardening);
    for (i, l) in model.layers().iter().enumerate() {
        match l.kind {
            LayerKind::RangeRestrict { lo, hi } => {
                let _ = writeln!(s, "layer {i} {}: range [{lo:e}, {hi:e}]", l.name);
            }
            LayerKind::ClippedRelu { tau } => {
                let _ = writeln!(s, "layer {i} {}: tau {tau:e}", l.name);
            }
            LayerKind::Relu6 => {
                let _ = writeln!(s, "layer {i} {}: relu6", l.name);
            }
            _ => {}
        }
    }
    for (k, v) in &model.metadata {
        let _ = writeln!(s, "meta {k} = {v}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_examples() {
        let mut v: Vec<f32> = (0..100).map(|x| x as f32).collect();
        assert_eq!(percentile(&mut v, 99.0), 99.0);
        assert_eq!(percentile(&mut v, 100.0), 99.0);
        assert_eq!(percentile(&mut v, 50.0), 50.0);
        assert_eq!(percentile(&mut [4.0], 1.0), 4.0);
    }

    #[test]
    fn names_round_trip() {
        for k in HardeningKind::ALL {
            assert_eq!(HardeningKind::from_name(k.name()), Some(k));
            assert_eq!(HardeningKind::from_code(k.code()), Some(k));
        }
    }
}
