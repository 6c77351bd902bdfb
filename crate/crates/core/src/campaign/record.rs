use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{hex, Injector};
use super::CampaignError;
use crate::appfi::{AppFault, WeightSite};
use crate::evaluate::Label;
use crate::hardening::HardeningKind;
use crate::isa::{IsaFault, RegRole, Termination};

pub const SCHEMA_VERSION: u32 = 1;

/// One injection run, one JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub schema: u32,
    pub run_id: String,
    pub config_hash: String,
    pub model: String,
    pub hardening: HardeningKind,
    pub injector: Injector,
    /// Canonical fault text.
    pub fault: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isa_fault: Option<IsaFault>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub app_fault: Option<AppFault>,
    pub seed: u64,
    pub termination: Termination,
    pub label: Label,
    pub samples: usize,
    pub golden_accuracy: f64,
    pub faulty_accuracy: Option<f64>,
    pub rad: Option<f64>,
    /// Induced BER (ISA) or requested BER (APP MBF).
    pub ber: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excitations: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uses: Option<u64>,
    /// ISA site never used by the program.
    #[serde(default)]
    pub latent: bool,
    /// Role of the faulty register; `None` for FU and APP faults.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub site_role: Option<RegRole>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weight_sites: Vec<WeightSite>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub neuron_sites: Vec<usize>,
    pub golden_digest: String,
    pub faulty_digest: Option<String>,
}

/// Stable run identifier over (config hash, matrix cell, fault, seed).
pub fn run_id(config_hash: &str, model: &str, hardening: HardeningKind, injector: Injector, fault: &str, seed: u64) -> String {
    let key = format!("{config_hash}|{model}|{hardening}|{injector}|{fault}|{seed}");
    hex(&Sha256::digest(key.as_bytes()))[..24].to_string()
}

/// Parse a records file. Every malformed line is reported by line number.
pub fn read_records(path: &Path) -> Result<Vec<Record>, CampaignError> {
    let file = File::open(path).map_err(|e| CampaignError::Records(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CampaignError::Records(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(&line) {
            Ok(r) if r.schema == SCHEMA_VERSION => out.push(r),
            Ok(r) => bad.push(format!("line {}: run {} has schema {}", i + 1, r.run_id, r.schema)),
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("run_id").and_then(|x| x.as_str()).map(String::from))
                    .unwrap_or_else(|| "?".into());
                bad.push(format!("line {}: run {id}: {e}", i + 1));
            }
        }
    }
    if !bad.is_empty() {
        return Err(CampaignError::CorruptRecords(bad));
    }
    Ok(out)
}

/// Append-only writer. Opening for resume drops a torn final line left by a
/// killed process and returns the run IDs already present.
pub struct RecordWriter {
    file: File,
}

impl RecordWriter {
    pub fn create(path: &Path) -> Result<Self, CampaignError> {
        let file = File::create(path)?;
        Ok(Self { file })
    }

    pub fn resume(path: &Path) -> Result<(Self, HashSet<String>), CampaignError> {
        if !path.exists() {
            return Ok((Self::create(path)?, HashSet::new()));
        }
        let bytes = std::fs::read(path)?;
        let keep = match bytes.iter().rposition(|&b| b == b'\n') {
            Some(p) => p + 1,
            None => 0,
        };
        if keep != bytes.len() {
            let f = OpenOptions::new().write(true).open(path)?;
            f.set_len(keep as u64)?;
        }
        let done = read_records(path)?.into_iter().map(|r| r.run_id).collect();
        let file = OpenOptions::new().append(true).open(path)?;
        Ok((Self { file }, done))
    }

    pub fn append(&mut self, records: &[Record]) -> Result<(), CampaignError> {
        let mut buf = String::new();
        for r in records {
            buf.push_str(&serde_json::to_string(r).expect("record serializes"));
            buf.push('\n');
        }
        self.file.write_all(buf.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}
