//! Application-level fault injection: bit flips in parameters and in layer
//! output feature maps, with statistically sized single-bit campaigns.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::evaluate::{EvalError, Evaluation};
use crate::isa::Termination;
use crate::nn::{Dataset, LayerKind, Model};
use crate::numeric::derive_seed;
use crate::par;

#[derive(Debug, Error, PartialEq)]
pub enum AppError {
    #[error("model has no parameters to corrupt")]
    NoWeights,
    #[error("BER {ber} flips no bit over {bits} bits (below resolution)")]
    BelowResolution { ber: f64, bits: u64 },
    #[error("bit index {0} outside 0..31")]
    Bit(u32),
    #[error("{name} = {value} outside (0, 1]")]
    Fraction { name: &'static str, value: f64 },
    #[error("layer {0} is not a valid injection target")]
    Layer(usize),
    #[error("model has no feature-map injection sites")]
    NoNeuronSites,
    #[error("spec is missing {0}")]
    Missing(&'static str),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppTarget {
    Weights,
    Neurons,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppMode {
    Sbf,
    Mbf,
}

/// Campaign-level description of an application fault.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppFaultSpec {
    pub target: AppTarget,
    pub mode: AppMode,
    /// Fixed bit position; weights SBF samples all 32 bits when absent.
    pub bit: Option<u8>,
    /// MBF bit error rates, one run each.
    pub bers: Vec<f64>,
    pub bler: Option<f64>,
    pub ner: Option<f64>,
    /// Restrict injection to one layer index.
    pub layer: Option<usize>,
    /// Neuron campaigns: number of runs.
    pub runs: usize,
    pub seed: u64,
}

impl AppFaultSpec {
    pub fn weights_sbf(seed: u64) -> Self {
        Self { target: AppTarget::Weights, mode: AppMode::Sbf, bit: None, bers: vec![], bler: None, ner: None, layer: None, runs: 0, seed }
    }

    pub fn weights_mbf(bers: Vec<f64>, seed: u64) -> Self {
        Self { mode: AppMode::Mbf, bers, ..Self::weights_sbf(seed) }
    }

    pub fn neurons(bler: f64, ner: f64, bit: u8, runs: usize, seed: u64) -> Self {
        Self {
            target: AppTarget::Neurons,
            mode: AppMode::Sbf,
            bit: Some(bit),
            bers: vec![],
            bler: Some(bler),
            ner: Some(ner),
            layer: None,
            runs,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), AppError> {
        if let Some(b) = self.bit {
            check_bit(b)?;
        }
        match self.target {
            AppTarget::Weights => {
                if self.mode == AppMode::Mbf {
                    if self.bers.is_empty() {
                        return Err(AppError::Missing("BER list"));
                    }
                    for &b in &self.bers {
                        check_fraction("ber", b)?;
                    }
                }
            }
            AppTarget::Neurons => {
                check_fraction("bler", self.bler.ok_or(AppError::Missing("bler"))?)?;
                check_fraction("ner", self.ner.ok_or(AppError::Missing("ner"))?)?;
                self.bit.ok_or(AppError::Missing("bit"))?;
            }
        }
        Ok(())
    }
}

fn check_bit(bit: u8) -> Result<(), AppError> {
    if bit < 32 { Ok(()) } else { Err(AppError::Bit(bit as u32)) }
}

fn check_fraction(name: &'static str, value: f64) -> Result<(), AppError> {
    if value > 0.0 && value <= 1.0 { Ok(()) } else { Err(AppError::Fraction { name, value }) }
}

/// Sample-size parameters for statistical fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatSizing {
    pub confidence: f64,
    pub margin: f64,
    pub p: f64,
}

impl Default for StatSizing {
    fn default() -> Self {
        Self { confidence: 0.95, margin: 0.005, p: 0.5 }
    }
}

impl StatSizing {
    pub fn sample_size(&self, population: u64) -> u64 {
        stat_sample_size(population, self.confidence, self.margin, self.p)
    }
}

/// `ceil(N / (1 + e^2 (N-1) / (t^2 p (1-p))))`, clamped to `[1, N]`, with `t`
/// the two-sided normal quantile of `confidence`.
pub fn stat_sample_size(population: u64, confidence: f64, margin: f64, p: f64) -> u64 {
    assert!(population >= 1, "population must be nonempty");
    assert!(margin > 0.0 && margin < 1.0 && confidence > 0.0 && confidence < 1.0);
    let t = Normal::standard().inverse_cdf(1.0 - (1.0 - confidence) / 2.0);
    let n = population as f64;
    let size = n / (1.0 + margin * margin * (n - 1.0) / (t * t * p * (1.0 - p)));
    (size.ceil() as u64).clamp(1, population)
}

/// One parameter bit: `layer`, parameter tensor within it, flat index, bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WeightSite {
    pub layer: usize,
    pub tensor: usize,
    pub index: usize,
    pub bit: u8,
}

/// Parameter tensors in injection order: `(layer, tensor, len)`.
pub fn weight_tensors(model: &Model, layer: Option<usize>) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (li, l) in model.layers().iter().enumerate() {
        if layer.is_some_and(|f| f != li) {
            continue;
        }
        for (ti, t) in l.kind.params().iter().enumerate() {
            out.push((li, ti, t.len()));
        }
    }
    out
}

/// Map a flat element index over `tensors` to its site.
fn locate(tensors: &[(usize, usize, usize)], mut element: usize, bit: u8) -> WeightSite {
    for &(layer, tensor, len) in tensors {
        if element < len {
            return WeightSite { layer, tensor, index: element, bit };
        }
        element -= len;
    }
    unreachable!("element index beyond the parameter population")
}

/// Copy of `model` with each site's bit inverted.
pub fn apply_weight_sites(model: &Model, sites: &[WeightSite]) -> Model {
    let mut m = model.clone();
    for s in sites {
        let mut params = m.layers_mut()[s.layer].kind.params_mut();
        let v = &mut params[s.tensor].data_mut()[s.index];
        *v = f32::from_bits(v.to_bits() ^ (1u32 << s.bit));
    }
    m
}

/// A single concrete application fault, one per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AppFault {
    WeightSbf { site: WeightSite },
    WeightMbf { ber: f64, layer: Option<usize>, seed: u64 },
    Neuron { layer: usize, bler: f64, ner: f64, bit: u8, seed: u64 },
}

impl AppFault {
    pub fn injector(&self) -> &'static str {
        match self {
            AppFault::WeightSbf { .. } => "app-weights-sbf",
            AppFault::WeightMbf { .. } => "app-weights-mbf",
            AppFault::Neuron { .. } => "app-neurons",
        }
    }
}

/// Flip parameter bits per `spec` (weights target). SBF flips one bit at a
/// uniformly drawn site; MBF flips `round(ber * total_bits)` distinct bits
/// for `spec.bers[0]`.
pub fn flip_weight_bits(model: &Model, spec: &AppFaultSpec) -> Result<(Model, Vec<WeightSite>), AppError> {
    spec.validate()?;
    let tensors = weight_tensors(model, spec.layer);
    let elements: usize = tensors.iter().map(|t| t.2).sum();
    if elements == 0 {
        return Err(AppError::NoWeights);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sites = match spec.mode {
        AppMode::Sbf => {
            let bit = spec.bit.unwrap_or_else(|| rng.random_range(0..32));
            vec![locate(&tensors, rng.random_range(0..elements), bit)]
        }
        AppMode::Mbf => mbf_sites(&tensors, elements, spec.bers[0], spec.seed)?,
    };
    Ok((apply_weight_sites(model, &sites), sites))
}

pub fn mbf_flip_count(ber: f64, total_bits: u64) -> Result<usize, AppError> {
    let k = (ber * total_bits as f64).round();
    if !(k >= 1.0) {
        return Err(AppError::BelowResolution { ber, bits: total_bits });
    }
    Ok((k as u64).min(total_bits) as usize)
}

fn mbf_sites(tensors: &[(usize, usize, usize)], elements: usize, ber: f64, seed: u64) -> Result<Vec<WeightSite>, AppError> {
    let total = elements * 32;
    let k = mbf_flip_count(ber, total as u64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sites: Vec<WeightSite> =
        index::sample(&mut rng, total, k).into_iter().map(|g| locate(tensors, g / 32, (g % 32) as u8)).collect();
    sites.sort();
    Ok(sites)
}

/// Fraction-of-count with a guard against `0.3 * 10 = 3.0000000000000004`.
fn ceil_count(frac: f64, n: usize) -> usize {
    ((frac * n as f64 - 1e-9).ceil() as usize).clamp(1, n)
}

/// Flip `bit` in `ceil(ner * block)` neurons of each of `ceil(bler * blocks)`
/// blocks, where a block is one slice along the leading dimension. Returns
/// the flat indices touched, ascending.
pub fn corrupt_in_place(fm: &mut [f32], blocks: usize, bler: f64, ner: f64, bit: u8, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let block = fm.len() / blocks;
    let nb = ceil_count(bler, blocks);
    let nn = ceil_count(ner, block);
    let mut touched = Vec::with_capacity(nb * nn);
    for b in index::sample(rng, blocks, nb) {
        for n in index::sample(rng, block, nn) {
            touched.push(b * block + n);
        }
    }
    touched.sort_unstable();
    for &i in &touched {
        fm[i] = f32::from_bits(fm[i].to_bits() ^ (1u32 << bit));
    }
    touched
}

/// Feature-map corruption on a standalone tensor, blocks = `shape[0]` slices.
pub fn corrupt_feature_map(
    fm: &crate::Tensor,
    bler: f64,
    ner: f64,
    bit: u8,
    seed: u64,
) -> Result<(crate::Tensor, Vec<usize>), AppError> {
    check_bit(bit)?;
    check_fraction("bler", bler)?;
    check_fraction("ner", ner)?;
    let mut out = fm.clone();
    let blocks = fm.shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let touched = corrupt_in_place(out.data_mut(), blocks, bler, ner, bit, &mut rng);
    Ok((out, touched))
}

/// Layers whose outputs are feature-map injection sites: every Conv2d and
/// Linear output.
pub fn neuron_layers(model: &Model) -> Vec<usize> {
    model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.kind, LayerKind::Conv2d(_) | LayerKind::Linear { .. }))
        .map(|(i, _)| i)
        .collect()
}

/// The flat output indices a neuron fault corrupts (the same on every sample).
pub fn neuron_sites(model: &Model, layer: usize, bler: f64, ner: f64, bit: u8, seed: u64) -> Vec<usize> {
    let shape = model.layer_output_shape(layer);
    let mut scratch = vec![0.0f32; shape.iter().product()];
    corrupt_in_place(&mut scratch, shape[0], bler, ner, bit, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// The concrete runs of an application campaign, in execution order.
pub fn plan_app_runs(model: &Model, spec: &AppFaultSpec, sizing: &StatSizing) -> Result<Vec<AppFault>, AppError> {
    spec.validate()?;
    match (spec.target, spec.mode) {
        (AppTarget::Weights, AppMode::Sbf) => {
            let tensors = weight_tensors(model, spec.layer);
            let elements: usize = tensors.iter().map(|t| t.2).sum();
            if elements == 0 {
                return Err(AppError::NoWeights);
            }
            let population = match spec.bit {
                Some(_) => elements,
                None => elements * 32,
            };
            let n = sizing.sample_size(population as u64) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            Ok(index::sample(&mut rng, population, n)
                .into_iter()
                .map(|g| {
                    let site = match spec.bit {
                        Some(b) => locate(&tensors, g, b),
                        None => locate(&tensors, g / 32, (g % 32) as u8),
                    };
                    AppFault::WeightSbf { site }
                })
                .collect())
        }
        (AppTarget::Weights, AppMode::Mbf) => {
            let elements: usize = weight_tensors(model, spec.layer).iter().map(|t| t.2).sum();
            if elements == 0 {
                return Err(AppError::NoWeights);
            }
            spec.bers
                .iter()
                .enumerate()
                .map(|(i, &ber)| {
                    mbf_flip_count(ber, elements as u64 * 32)?;
                    Ok(AppFault::WeightMbf { ber, layer: spec.layer, seed: derive_seed(spec.seed, i as u64) })
                })
                .collect()
        }
        (AppTarget::Neurons, _) => {
            let layers = match spec.layer {
                Some(l) if neuron_layers(model).contains(&l) => vec![l],
                Some(l) => return Err(AppError::Layer(l)),
                None => neuron_layers(model),
            };
            if layers.is_empty() {
                return Err(AppError::NoNeuronSites);
            }
            let (bler, ner, bit) = (spec.bler.unwrap_or(1.0), spec.ner.unwrap_or(1.0), spec.bit.unwrap_or(30));
            Ok((0..spec.runs.max(1))
                .map(|i| {
                    let seed = derive_seed(spec.seed, i as u64);
                    let layer = layers[ChaCha8Rng::seed_from_u64(seed).random_range(0..layers.len())];
                    AppFault::Neuron { layer, bler, ner, bit, seed }
                })
                .collect())
        }
    }
}

/// Fault-free per-layer activations of an evaluation set, reused to resume
/// faulty forwards at the first corrupted layer.
pub struct GoldenCache {
    pub inputs: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub activations: Vec<Vec<Vec<f32>>>,
}

impl GoldenCache {
    pub fn new(model: &Model, eval: &Dataset, jobs: usize) -> Self {
        let inputs: Vec<Vec<f32>> = (0..eval.len()).map(|i| eval.images.sample(i).to_vec()).collect();
        let activations = par::map(&inputs, jobs, |x| model.forward_sample_all(x));
        Self { inputs, labels: eval.labels.clone(), activations }
    }

    pub fn logits(&self) -> Vec<Vec<f32>> {
        self.activations.iter().map(|a| a.last().expect("model has layers").clone()).collect()
    }
}

/// Result of one application-level run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppOutcome {
    pub fault: AppFault,
    /// Corrupted locations: weight sites, or flat feature-map indices.
    pub weight_sites: Vec<WeightSite>,
    pub neuron_sites: Vec<usize>,
    pub evaluation: Evaluation,
}

/// Faulty logits of every cached sample under `fault`.
pub fn faulty_logits(model: &Model, cache: &GoldenCache, fault: &AppFault) -> Result<(Vec<Vec<f32>>, Vec<WeightSite>, Vec<usize>), AppError> {
    match fault {
        AppFault::WeightSbf { .. } | AppFault::WeightMbf { .. } => {
            let sites = match fault {
                AppFault::WeightSbf { site } => vec![*site],
                AppFault::WeightMbf { ber, layer, seed } => {
                    let tensors = weight_tensors(model, *layer);
                    let elements = tensors.iter().map(|t| t.2).sum();
                    mbf_sites(&tensors, elements, *ber, *seed)?
                }
                AppFault::Neuron { .. } => unreachable!(),
            };
            let faulty = apply_weight_sites(model, &sites);
            let start = sites.iter().map(|s| s.layer).min().unwrap_or(0);
            let logits = cache
                .inputs
                .iter()
                .zip(&cache.activations)
                .map(|(x, acts)| faulty.forward_from(start, acts, x))
                .collect();
            Ok((logits, sites, vec![]))
        }
        AppFault::Neuron { layer, bler, ner, bit, seed } => {
            if *layer >= model.layers().len() {
                return Err(AppError::Layer(*layer));
            }
            let touched = neuron_sites(model, *layer, *bler, *ner, *bit, *seed);
            let logits = cache
                .inputs
                .iter()
                .zip(&cache.activations)
                .map(|(x, acts)| {
                    let mut outs = acts[..=*layer].to_vec();
                    for &i in &touched {
                        let v = &mut outs[*layer][i];
                        *v = f32::from_bits(v.to_bits() ^ (1u32 << bit));
                    }
                    model.resume(outs, x)
                })
                .collect();
            Ok((logits, vec![], touched))
        }
    }
}

pub fn run_app_fault(model: &Model, cache: &GoldenCache, golden_logits: &[Vec<f32>], fault: &AppFault) -> Result<AppOutcome, AppError> {
    let (logits, weight_sites, neuron_sites) = faulty_logits(model, cache, fault)?;
    let evaluation = Evaluation::from_logits(golden_logits, &logits, &cache.labels, Termination::Completed)?;
    Ok(AppOutcome { fault: fault.clone(), weight_sites, neuron_sites, evaluation })
}

/// Plan and execute a whole application campaign on `eval`. Per-run errors
/// are returned in place and never abort the remaining runs.
pub fn run_app_campaign(
    model: &Model,
    eval: &Dataset,
    spec: &AppFaultSpec,
    sizing: &StatSizing,
    jobs: usize,
) -> Result<Vec<Result<AppOutcome, AppError>>, AppError> {
    let plan = plan_app_runs(model, spec, sizing)?;
    let cache = GoldenCache::new(model, eval, jobs);
    let golden = cache.logits();
    Ok(par::map(&plan, jobs, |f| run_app_fault(model, &cache, &golden, f)))
}
