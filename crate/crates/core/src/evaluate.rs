//! Outcome classification, relative accuracy degradation, the ISA-to-APP
//! BER bridge and label aggregation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::isa::Termination;
use crate::nn::ops::softmax;
use crate::numeric::argmax;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("sample {sample}: golden has {golden} values, faulty has {faulty}")]
    ShapeMismatch { sample: usize, golden: usize, faulty: usize },
    #[error("golden accuracy is zero; relative degradation is undefined")]
    ZeroGoldenAccuracy,
    #[error("no fault site was ever used; the BER range is undefined")]
    NoUsedSites,
    #[error("cannot aggregate an empty outcome set")]
    Empty,
}

/// Fault effect, ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Masked,
    SafeSdc,
    CriticalSdc,
    Due,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Masked, Label::SafeSdc, Label::CriticalSdc, Label::Due];
}

/// Label of one sample from its golden and faulty confidence vectors.
pub fn classify_sample(golden: &[f32], faulty: &[f32]) -> Label {
    let same_bits = golden.len() == faulty.len() && golden.iter().zip(faulty).all(|(a, b)| a.to_bits() == b.to_bits());
    if same_bits {
        Label::Masked
    } else if argmax(golden) == argmax(faulty) {
        Label::SafeSdc
    } else {
        Label::CriticalSdc
    }
}

/// Run-level label: DUE for abnormal termination, else the worst per-sample
/// label. `faulty` is ignored unless the run completed.
pub fn classify(golden: &[Vec<f32>], faulty: &[Vec<f32>], termination: Termination) -> Result<Label, EvalError> {
    if termination != Termination::Completed {
        return Ok(Label::Due);
    }
    if golden.len() != faulty.len() {
        return Err(EvalError::ShapeMismatch { sample: golden.len().min(faulty.len()), golden: golden.len(), faulty: faulty.len() });
    }
    let mut worst = Label::Masked;
    for (i, (g, f)) in golden.iter().zip(faulty).enumerate() {
        if g.len() != f.len() {
            return Err(EvalError::ShapeMismatch { sample: i, golden: g.len(), faulty: f.len() });
        }
        worst = worst.max(classify_sample(g, f));
    }
    Ok(worst)
}

/// `(golden - faulty) / golden`; negative when the fault helps.
pub fn rad(acc_golden: f64, acc_faulty: f64) -> Result<f64, EvalError> {
    if acc_golden == 0.0 {
        return Err(EvalError::ZeroGoldenAccuracy);
    }
    Ok((acc_golden - acc_faulty) / acc_golden)
}

pub fn confidences(logits: &[Vec<f32>]) -> Vec<Vec<f32>> {
    logits.iter().map(|l| softmax(l)).collect()
}

/// Top-1 accuracy of per-sample confidences against `labels`.
pub fn accuracy(confidences: &[Vec<f32>], labels: &[usize]) -> f64 {
    if confidences.is_empty() {
        return 0.0;
    }
    let hits = confidences.iter().zip(labels).filter(|(c, &l)| argmax(c) == l).count();
    hits as f64 / confidences.len() as f64
}

/// Hex SHA-256 over the raw bits of a confidence batch.
pub fn digest(confidences: &[Vec<f32>]) -> String {
    let mut h = Sha256::new();
    for row in confidences {
        h.update((row.len() as u32).to_le_bytes());
        for v in row {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Everything the classifier derives from one run on a fixed evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub label: Label,
    pub golden_accuracy: f64,
    /// `None` for DUE runs.
    pub faulty_accuracy: Option<f64>,
    pub rad: Option<f64>,
    pub golden_digest: String,
    pub faulty_digest: Option<String>,
}

impl Evaluation {
    pub fn from_logits(
        golden_logits: &[Vec<f32>],
        faulty_logits: &[Vec<f32>],
        labels: &[usize],
        termination: Termination,
    ) -> Result<Self, EvalError> {
        let g = confidences(golden_logits);
        let golden_accuracy = accuracy(&g, labels);
        let golden_digest = digest(&g);
        if termination != Termination::Completed {
            return Ok(Self { label: Label::Due, golden_accuracy, faulty_accuracy: None, rad: None, golden_digest, faulty_digest: None });
        }
        let f = confidences(faulty_logits);
        let label = classify(&g, &f, termination)?;
        let faulty_accuracy = accuracy(&f, labels);
        Ok(Self {
            label,
            golden_accuracy,
            faulty_accuracy: Some(faulty_accuracy),
            rad: rad(golden_accuracy, faulty_accuracy).ok(),
            golden_digest,
            faulty_digest: Some(digest(&f)),
        })
    }
}

pub const BRIDGE_SAMPLES: usize = 10;

/// BER range observed at ISA level and the values sampled from it for APP
/// multi-bit campaigns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerBridge {
    pub ber_min: f64,
    pub ber_max: f64,
    /// Effective lower bound of the sampling interval.
    pub lower: f64,
    pub samples: Vec<f64>,
    pub rule: String,
    pub seed: u64,
}

/// Build the bridge from induced BERs (`None` = never-used site, excluded).
/// Samples are log-uniform in `[max(ber_min, floor), ber_max]`, sorted
/// ascending. A zero lower bound is replaced by the smallest positive BER.
pub fn build_ber_bridge(bers: impl IntoIterator<Item = Option<f64>>, floor: f64, seed: u64) -> Result<BerBridge, EvalError> {
    let used: Vec<f64> = bers.into_iter().flatten().collect();
    if used.is_empty() {
        return Err(EvalError::NoUsedSites);
    }
    let ber_min = used.iter().copied().fold(f64::INFINITY, f64::min);
    let ber_max = used.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lower = ber_min.max(floor).min(ber_max);
    if lower <= 0.0 {
        lower = used.iter().copied().filter(|&b| b > 0.0).fold(ber_max, f64::min);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples: Vec<f64> = if lower == ber_max || lower <= 0.0 {
        vec![ber_max; BRIDGE_SAMPLES]
    } else {
        let (a, b) = (lower.ln(), ber_max.ln());
        let mut s: Vec<f64> =
            (0..BRIDGE_SAMPLES).map(|_| (a + rng.random::<f64>() * (b - a)).exp().clamp(lower, ber_max)).collect();
        s.sort_by(f64::total_cmp);
        s
    };
    Ok(BerBridge { ber_min, ber_max, lower, samples, rule: "log-uniform".into(), seed })
}

/// Label counts; merging is associative and commutative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Distribution {
    pub masked: u64,
    pub safe_sdc: u64,
    pub critical_sdc: u64,
    pub due: u64,
}

impl Distribution {
    pub fn add(&mut self, label: Label) {
        match label {
            Label::Masked => self.masked += 1,
            Label::SafeSdc => self.safe_sdc += 1,
            Label::CriticalSdc => self.critical_sdc += 1,
            Label::Due => self.due += 1,
        }
    }

    pub fn merge(self, o: Self) -> Self {
        Self {
            masked: self.masked + o.masked,
            safe_sdc: self.safe_sdc + o.safe_sdc,
            critical_sdc: self.critical_sdc + o.critical_sdc,
            due: self.due + o.due,
        }
    }

    pub fn runs(&self) -> u64 {
        self.masked + self.safe_sdc + self.critical_sdc + self.due
    }

    /// `[masked, safe_sdc, critical_sdc, due]` in percent.
    pub fn percentages(&self) -> [f64; 4] {
        let n = self.runs().max(1) as f64;
        [self.masked, self.safe_sdc, self.critical_sdc, self.due].map(|c| 100.0 * c as f64 / n)
    }
}

pub fn aggregate(labels: impl IntoIterator<Item = Label>) -> Result<Distribution, EvalError> {
    let mut d = Distribution::default();
    for l in labels {
        d.add(l);
    }
    if d.runs() == 0 {
        return Err(EvalError::Empty);
    }
    Ok(d)
}
