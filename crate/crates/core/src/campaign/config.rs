use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CampaignError;
use crate::appfi::StatSizing;
use crate::hardening::{HardeningKind, DEFAULT_PERCENTILE};

/// Injector columns of the experiment matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Injector {
    #[serde(rename = "isa-regs")]
    IsaRegs,
    #[serde(rename = "isa-fus")]
    IsaFus,
    #[serde(rename = "app-weights-sbf")]
    AppWeightsSbf,
    #[serde(rename = "app-weights-mbf")]
    AppWeightsMbf,
    #[serde(rename = "app-neurons")]
    AppNeurons,
}

impl Injector {
    pub const ALL: [Injector; 5] =
        [Self::IsaRegs, Self::IsaFus, Self::AppWeightsSbf, Self::AppWeightsMbf, Self::AppNeurons];

    pub fn name(self) -> &'static str {
        match self {
            Self::IsaRegs => "isa-regs",
            Self::IsaFus => "isa-fus",
            Self::AppWeightsSbf => "app-weights-sbf",
            Self::AppWeightsMbf => "app-weights-mbf",
            Self::AppNeurons => "app-neurons",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|i| i.name() == s)
    }

    pub fn is_isa(self) -> bool {
        matches!(self, Self::IsaRegs | Self::IsaFus)
    }

    pub fn target(self) -> &'static str {
        match self {
            Self::IsaRegs => "regs",
            Self::IsaFus => "fus",
            Self::AppWeightsSbf | Self::AppWeightsMbf => "weights",
            Self::AppNeurons => "neurons",
        }
    }
}

impl std::fmt::Display for Injector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with the four MNIST IDX files; test split is the evaluation
    /// source, the training split the calibration source.
    pub mnist_dir: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub calib_csv: Option<PathBuf>,
    /// Calibration images (leading samples of the calibration source).
    #[serde(default = "default_calibration")]
    pub calibration: usize,
}

fn default_calibration() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardeningConfig {
    #[serde(default = "default_hardenings")]
    pub list: Vec<HardeningKind>,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    #[serde(default)]
    pub finetune_epochs: usize,
    #[serde(default = "default_lr")]
    pub finetune_lr: f32,
}

fn default_hardenings() -> Vec<HardeningKind> {
    HardeningKind::ALL.to_vec()
}

fn default_percentile() -> f64 {
    DEFAULT_PERCENTILE
}

fn default_lr() -> f32 {
    0.01
}

impl Default for HardeningConfig {
    fn default() -> Self {
        Self { list: default_hardenings(), percentile: default_percentile(), finetune_epochs: 0, finetune_lr: default_lr() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsaConfig {
    /// Leading evaluation images run through the VM per fault.
    #[serde(default = "default_isa_inputs")]
    pub inputs: usize,
    #[serde(default = "default_watchdog")]
    pub watchdog_mult: u64,
    /// Skip executions a fault-free trace proves unexcitable. Outcomes are
    /// identical with and without.
    #[serde(default = "default_true")]
    pub prune: bool,
}

fn default_isa_inputs() -> usize {
    16
}

fn default_watchdog() -> u64 {
    10
}

fn default_true() -> bool {
    true
}

impl Default for IsaConfig {
    fn default() -> Self {
        Self { inputs: default_isa_inputs(), watchdog_mult: default_watchdog(), prune: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BerSource {
    /// The literal string "bridge".
    Mode(String),
    List(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MbfConfig {
    #[serde(default = "default_bers")]
    pub bers: BerSource,
    /// Bridge sampling floor; defaults to one bit over the model's weight bits.
    pub floor: Option<f64>,
}

fn default_bers() -> BerSource {
    BerSource::Mode("bridge".into())
}

impl Default for MbfConfig {
    fn default() -> Self {
        Self { bers: default_bers(), floor: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuronConfig {
    #[serde(default = "tenth")]
    pub bler: f64,
    #[serde(default = "tenth")]
    pub ner: f64,
    #[serde(default = "default_bit")]
    pub bit: u8,
    #[serde(default = "default_runs")]
    pub runs: usize,
    pub layer: Option<usize>,
}

fn tenth() -> f64 {
    0.1
}

fn default_bit() -> u8 {
    30
}

fn default_runs() -> usize {
    100
}

impl Default for NeuronConfig {
    fn default() -> Self {
        Self { bler: 0.1, ner: 0.1, bit: 30, runs: default_runs(), layer: None }
    }
}

/// Declarative description of a campaign, read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub seed: u64,
    #[serde(default = "default_eval")]
    pub eval_subset: usize,
    /// Worker threads; 0 = all cores. Never affects results.
    #[serde(default)]
    pub jobs: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(rename = "model")]
    pub models: Vec<ModelEntry>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub hardening: HardeningConfig,
    pub injectors: Vec<Injector>,
    #[serde(default)]
    pub sizing: SizingConfig,
    #[serde(default)]
    pub isa: IsaConfig,
    #[serde(default)]
    pub mbf: MbfConfig,
    #[serde(default)]
    pub neurons: NeuronConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizingConfig {
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_p")]
    pub p: f64,
}

fn default_confidence() -> f64 {
    0.95
}

fn default_margin() -> f64 {
    0.005
}

fn default_p() -> f64 {
    0.5
}

impl Default for SizingConfig {
    fn default() -> Self {
        Self { confidence: 0.95, margin: 0.005, p: 0.5 }
    }
}

impl From<SizingConfig> for StatSizing {
    fn from(s: SizingConfig) -> Self {
        StatSizing { confidence: s.confidence, margin: s.margin, p: s.p }
    }
}

fn default_eval() -> usize {
    1000
}

fn default_out() -> PathBuf {
    PathBuf::from("out/campaign")
}

impl CampaignConfig {
    pub fn from_toml(text: &str) -> Result<Self, CampaignError> {
        toml::from_str(text).map_err(|e| CampaignError::Config(e.to_string()))
    }

    /// Parse and resolve relative paths against the config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CampaignError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CampaignError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for m in &mut cfg.models {
            fix(&mut m.path);
        }
        for p in [&mut cfg.data.mnist_dir, &mut cfg.data.test_csv, &mut cfg.data.calib_csv].into_iter().flatten() {
            fix(p);
        }
        fix(&mut cfg.out);
        Ok(cfg)
    }

    /// Reject anything that would fail mid-campaign.
    pub fn validate(&self) -> Result<(), CampaignError> {
        let err = |m: String| Err(CampaignError::Config(m));
        if self.models.is_empty() {
            return err("no [[model]] entries".into());
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort();
        names.dedup();
        if names.len() != self.models.len() {
            return err("model names must be unique".into());
        }
        for m in &self.models {
            if !m.path.is_file() {
                return err(format!("model file {} does not exist", m.path.display()));
            }
        }
        match (&self.data.mnist_dir, &self.data.test_csv) {
            (Some(d), None) if d.is_dir() => {}
            (None, Some(t)) if t.is_file() => {}
            (Some(_), Some(_)) => return err("give either data.mnist_dir or data.test_csv, not both".into()),
            (None, None) => return err("no evaluation data (data.mnist_dir or data.test_csv)".into()),
            _ => return err("evaluation data path does not exist".into()),
        }
        if let Some(c) = &self.data.calib_csv {
            if !c.is_file() {
                return err(format!("calibration file {} does not exist", c.display()));
            }
        }
        if self.injectors.is_empty() {
            return err("no injectors enabled".into());
        }
        if self.hardening.list.is_empty() {
            return err("hardening list is empty".into());
        }
        if self.eval_subset == 0 || self.isa.inputs == 0 {
            return err("eval_subset and isa.inputs must be positive".into());
        }
        let s = self.sizing;
        if !(s.confidence > 0.0 && s.confidence < 1.0 && s.margin > 0.0 && s.margin < 1.0 && s.p > 0.0 && s.p < 1.0) {
            return err("sizing parameters must lie in (0, 1)".into());
        }
        if !(self.hardening.percentile > 0.0 && self.hardening.percentile <= 100.0) {
            return err("hardening.percentile must lie in (0, 100]".into());
        }
        if self.injectors.contains(&Injector::AppWeightsMbf) {
            match &self.mbf.bers {
                BerSource::Mode(m) if m == "bridge" => {
                    if !self.injectors.iter().any(|i| i.is_isa()) {
                        return err("mbf.bers = \"bridge\" needs an ISA injector".into());
                    }
                }
                BerSource::Mode(m) => return err(format!("unknown mbf.bers mode '{m}'")),
                BerSource::List(l) if l.is_empty() || l.iter().any(|b| !(*b > 0.0 && *b <= 1.0)) => {
                    return err("mbf.bers must be nonempty values in (0, 1]".into())
                }
                BerSource::List(_) => {}
            }
        }
        if self.injectors.contains(&Injector::AppNeurons) {
            let n = &self.neurons;
            if !(n.bler > 0.0 && n.bler <= 1.0 && n.ner > 0.0 && n.ner <= 1.0) || n.bit > 31 || n.runs == 0 {
                return err("neurons: bler/ner in (0, 1], bit in 0..31, runs > 0".into());
            }
        }
        Ok(())
    }

    /// Hash over every setting that can change a result. Output location and
    /// parallelism are excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.jobs = 0;
        for m in &mut c.models {
            // identify models by content, not location
            let id = match std::fs::read(&m.path) {
                Ok(bytes) => hex(&Sha256::digest(&bytes)),
                Err(_) => m.path.file_name().unwrap_or_default().to_string_lossy().into_owned(),
            };
            m.path = PathBuf::from(id);
        }
        c.data.mnist_dir = c.data.mnist_dir.as_ref().map(|_| PathBuf::from("mnist"));
        c.data.test_csv = c.data.test_csv.as_ref().and_then(|p| p.file_name()).map(PathBuf::from);
        c.data.calib_csv = c.data.calib_csv.as_ref().and_then(|p| p.file_name()).map(PathBuf::from);
        let text = serde_json::to_string(&c).expect("config serializes");
        hex(&Sha256::digest(text.as_bytes()))[..16].to_string()
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
