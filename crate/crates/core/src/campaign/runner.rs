use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{BerSource, CampaignConfig, Injector};
use super::record::{read_records, run_id, Record, RecordWriter, SCHEMA_VERSION};
use super::report::{render_report, ReportFiles};
use super::CampaignError;
use crate::appfi::{self, plan_app_runs, weight_tensors, AppFault, AppFaultSpec, GoldenCache, StatSizing};
use crate::evaluate::{build_ber_bridge, BerBridge, Evaluation};
use crate::hardening::{self, HardeningKind};
use crate::isa::fault::{enumerate_fu_faults, enumerate_register_faults};
use crate::isa::{lower, FaultTarget, IsaBatch, IsaFault};
use crate::nn::train::TrainConfig;
use crate::nn::{load_csv, load_mnist_dir, load_model, Dataset, Model, Split};
use crate::par;

/// Runs executed between two appends to the records file.
const CHUNK: usize = 64;

pub const RECORDS_FILE: &str = "records.jsonl";
pub const PLAN_FILE: &str = "plan.txt";
pub const BRIDGE_FILE: &str = "bridges.json";

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Skip runs already in the records file instead of starting afresh.
    pub resume: bool,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Progress lines go to this callback.
    pub progress: Option<fn(&str)>,
}

#[derive(Debug, Clone)]
pub struct CampaignSummary {
    pub out_dir: PathBuf,
    pub planned: usize,
    pub executed: usize,
    pub skipped: usize,
    pub report: ReportFiles,
}

/// Bridge per model, persisted next to the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBridge {
    pub model: String,
    pub weight_bits: u64,
    pub floor: f64,
    pub bridge: BerBridge,
}

struct Cell<'a> {
    model: &'a str,
    hardening: HardeningKind,
    injector: Injector,
}

/// Evaluation and calibration data for a campaign.
pub struct CampaignData {
    pub eval: Dataset,
    pub calib: Option<Dataset>,
}

pub fn load_data(cfg: &CampaignConfig, sample_shape: &[usize]) -> Result<CampaignData, CampaignError> {
    let (test, calib) = match (&cfg.data.mnist_dir, &cfg.data.test_csv) {
        (Some(dir), _) => {
            let test = load_mnist_dir(dir, Split::Test)?;
            let calib = match &cfg.data.calib_csv {
                Some(c) => load_csv(c, sample_shape, Split::Calibration)?,
                None => load_mnist_dir(dir, Split::Train)?,
            };
            (test, Some(calib))
        }
        (None, Some(csv)) => {
            let test = load_csv(csv, sample_shape, Split::Test)?;
            let calib = cfg.data.calib_csv.as_ref().map(|c| load_csv(c, sample_shape, Split::Calibration)).transpose()?;
            (test, calib)
        }
        (None, None) => return Err(CampaignError::Config("no evaluation data".into())),
    };
    if test.sample_shape() != sample_shape {
        return Err(CampaignError::Config(format!(
            "data samples are {:?}, model expects {:?}",
            test.sample_shape(),
            sample_shape
        )));
    }
    Ok(CampaignData {
        eval: test.head(cfg.eval_subset),
        calib: calib.map(|c| c.head(cfg.data.calibration).with_split(Split::Calibration)),
    })
}

/// Build one hardened variant of a baseline model.
pub fn harden(cfg: &CampaignConfig, base: &Model, kind: HardeningKind, calib: Option<&Dataset>) -> Result<Model, CampaignError> {
    let need_calib = || calib.ok_or_else(|| CampaignError::Config(format!("{kind} needs calibration data")));
    let tune_cfg = TrainConfig { lr: cfg.hardening.finetune_lr, epochs: cfg.hardening.finetune_epochs, batch_size: 32, seed: cfg.seed };
    let tune = if cfg.hardening.finetune_epochs > 0 { Some((need_calib()?, &tune_cfg)) } else { None };
    Ok(match kind {
        HardeningKind::Baseline => base.clone(),
        HardeningKind::Ranger => hardening::apply_ranger(base, &hardening::profile_ranges(base, need_calib()?)?)?,
        HardeningKind::AdaptiveClipper => {
            hardening::apply_adaptive_clipper(base, need_calib()?, cfg.hardening.percentile, tune)?
        }
        HardeningKind::SwapRelu6 => hardening::apply_swap_relu6(base, tune)?,
    })
}

fn weight_bits(model: &Model) -> u64 {
    weight_tensors(model, None).iter().map(|t| t.2 as u64).sum::<u64>() * 32
}

/// Execute the campaign: ISA sweeps, BER bridge, APP campaigns, report.
pub fn run_campaign(cfg: &CampaignConfig, opts: &RunOptions) -> Result<CampaignSummary, CampaignError> {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(j) = opts.jobs {
        cfg.jobs = j;
    }
    if let Some(o) = &opts.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    let say = |m: &str| {
        if let Some(p) = opts.progress {
            p(m)
        }
    };
    let hash = cfg.hash();
    std::fs::create_dir_all(&cfg.out)?;
    let records_path = cfg.out.join(RECORDS_FILE);
    let (mut writer, done) = if opts.resume {
        RecordWriter::resume(&records_path)?
    } else {
        (RecordWriter::create(&records_path)?, HashSet::new())
    };

    // models and data, all loaded before the first run
    let mut variants: Vec<(String, Vec<Model>)> = Vec::new();
    let mut data: Option<CampaignData> = None;
    for entry in &cfg.models {
        let base = load_model(&entry.path)?;
        if base.hardening != HardeningKind::Baseline {
            return Err(CampaignError::Config(format!("model {} is not a baseline model", entry.name)));
        }
        if data.is_none() {
            data = Some(load_data(&cfg, base.input_shape())?);
        }
        let d = data.as_ref().expect("loaded");
        d.eval.check_classes(base.classes())?;
        let mut hs = Vec::new();
        for &k in &cfg.hardening.list {
            say(&format!("{}: building {k}", entry.name));
            hs.push(harden(&cfg, &base, k, d.calib.as_ref())?);
        }
        variants.push((entry.name.clone(), hs));
    }
    let data = data.expect("at least one model");
    let mut plan: Vec<String> = Vec::new();
    let mut executed = 0;

    // 1. exhaustive ISA sweeps
    let isa_inputs: Vec<Vec<f32>> =
        (0..cfg.isa.inputs.min(data.eval.len())).map(|i| data.eval.images.sample(i).to_vec()).collect();
    let isa_labels = data.eval.labels[..isa_inputs.len()].to_vec();
    for (name, models) in &variants {
        for model in models {
            let injectors: Vec<Injector> = cfg.injectors.iter().copied().filter(|i| i.is_isa()).collect();
            if injectors.is_empty() {
                continue;
            }
            let program = lower(model)?;
            let batch = IsaBatch::new(program, isa_inputs.clone());
            let golden = batch.golden_logits();
            for inj in injectors {
                let cell = Cell { model: name, hardening: model.hardening, injector: inj };
                let faults = match inj {
                    Injector::IsaRegs => enumerate_register_faults(&batch.program),
                    _ => enumerate_fu_faults(&batch.program),
                };
                let ids: Vec<String> =
                    faults.iter().map(|f| run_id(&hash, cell.model, cell.hardening, inj, &f.to_string(), cfg.seed)).collect();
                say(&format!("{name}/{}/{inj}: {} faults", model.hardening, faults.len()));
                executed += execute_chunks(&faults, &ids, &done, &mut writer, cfg.jobs, |f, id| {
                    isa_record(&cfg, &hash, &cell, &batch, &golden, &isa_labels, f, id)
                })?;
                plan.extend(ids);
            }
        }
    }
    std::fs::write(cfg.out.join(PLAN_FILE), plan.join("\n") + "\n")?;

    // 2. BER bridge per model, from the persisted ISA records
    let mut bridges: BTreeMap<String, ModelBridge> = BTreeMap::new();
    let uses_bridge = cfg.injectors.contains(&Injector::AppWeightsMbf) && matches!(cfg.mbf.bers, BerSource::Mode(_));
    if cfg.injectors.iter().any(|i| i.is_isa()) {
        let isa_records = read_records(&records_path)?;
        for (name, models) in &variants {
            let bits = weight_bits(&models[0]);
            let floor = cfg.mbf.floor.unwrap_or(1.0 / bits as f64);
            let bers = isa_records.iter().filter(|r| &r.model == name && r.injector.is_isa()).map(|r| r.ber);
            match build_ber_bridge(bers, floor, cfg.seed) {
                Ok(bridge) => {
                    bridges.insert(name.clone(), ModelBridge { model: name.clone(), weight_bits: bits, floor, bridge });
                }
                Err(e) if uses_bridge => return Err(CampaignError::Bridge(format!("{name}: {e}"))),
                Err(_) => {}
            }
        }
        std::fs::write(cfg.out.join(BRIDGE_FILE), serde_json::to_string_pretty(&bridges).expect("serializes") + "\n")?;
    }

    // 3. APP campaigns
    let sizing: StatSizing = cfg.sizing.into();
    for (name, models) in &variants {
        for model in models {
            let injectors: Vec<Injector> = cfg.injectors.iter().copied().filter(|i| !i.is_isa()).collect();
            if injectors.is_empty() {
                continue;
            }
            let cache = GoldenCache::new(model, &data.eval, cfg.jobs);
            let golden = cache.logits();
            for inj in injectors {
                let cell = Cell { model: name, hardening: model.hardening, injector: inj };
                let spec = match inj {
                    Injector::AppWeightsSbf => AppFaultSpec::weights_sbf(cfg.seed),
                    Injector::AppWeightsMbf => {
                        let bers = match &cfg.mbf.bers {
                            BerSource::List(l) => l.clone(),
                            BerSource::Mode(_) => bridges
                                .get(name)
                                .ok_or_else(|| CampaignError::Bridge(format!("{name}: no bridge")))?
                                .bridge
                                .samples
                                .clone(),
                        };
                        AppFaultSpec::weights_mbf(bers, cfg.seed)
                    }
                    _ => {
                        let n = &cfg.neurons;
                        let mut s = AppFaultSpec::neurons(n.bler, n.ner, n.bit, n.runs, cfg.seed);
                        s.layer = n.layer;
                        s
                    }
                };
                let faults = plan_app_runs(model, &spec, &sizing).map_err(|e| CampaignError::Config(format!("{name}/{inj}: {e}")))?;
                let texts: Vec<String> = faults.iter().map(|f| serde_json::to_string(f).expect("serializes")).collect();
                let ids: Vec<String> = texts.iter().map(|t| run_id(&hash, name, model.hardening, inj, t, cfg.seed)).collect();
                say(&format!("{name}/{}/{inj}: {} runs", model.hardening, faults.len()));
                let work: Vec<(AppFault, String)> = faults.into_iter().zip(texts).collect();
                executed += execute_chunks(&work, &ids, &done, &mut writer, cfg.jobs, |(f, text), id| {
                    app_record(&cfg, &hash, &cell, model, &cache, &golden, f, text, id)
                })?;
                plan.extend(ids);
            }
        }
    }
    std::fs::write(cfg.out.join(PLAN_FILE), plan.join("\n") + "\n")?;
    drop(writer);

    let report = render_report(&records_path, &cfg.out)?;
    let skipped = plan.iter().filter(|id| done.contains(*id)).count();
    Ok(CampaignSummary { out_dir: cfg.out.clone(), planned: plan.len(), executed, skipped, report })
}

/// Run pending items in plan order, appending each finished chunk.
fn execute_chunks<W, F>(
    work: &[W],
    ids: &[String],
    done: &HashSet<String>,
    writer: &mut RecordWriter,
    jobs: usize,
    f: F,
) -> Result<usize, CampaignError>
where
    W: Sync,
    F: Fn(&W, &str) -> Result<Record, CampaignError> + Sync + Send,
{
    let pending: Vec<(&W, &str)> =
        work.iter().zip(ids).filter(|(_, id)| !done.contains(*id)).map(|(w, id)| (w, id.as_str())).collect();
    for chunk in pending.chunks(CHUNK) {
        let records = par::map(chunk, jobs, |(w, id)| f(w, id));
        let records: Vec<Record> = records.into_iter().collect::<Result<_, _>>()?;
        writer.append(&records)?;
    }
    Ok(pending.len())
}

#[allow(clippy::too_many_arguments)]
fn isa_record(
    cfg: &CampaignConfig,
    hash: &str,
    cell: &Cell,
    batch: &IsaBatch,
    golden: &[Vec<f32>],
    labels: &[usize],
    fault: &IsaFault,
    id: &str,
) -> Result<Record, CampaignError> {
    let run = batch.run(fault, cfg.isa.watchdog_mult, cfg.isa.prune);
    let eval = Evaluation::from_logits(golden, &run.logits, labels, run.termination)?;
    let site_role = match fault.target {
        FaultTarget::RegisterBit { reg, .. } => batch.program.roles[reg as usize],
        FaultTarget::FuPort { .. } => None,
    };
    Ok(Record {
        schema: SCHEMA_VERSION,
        run_id: id.to_string(),
        config_hash: hash.to_string(),
        model: cell.model.to_string(),
        hardening: cell.hardening,
        injector: cell.injector,
        fault: fault.to_string(),
        isa_fault: Some(*fault),
        app_fault: None,
        seed: cfg.seed,
        termination: run.termination,
        label: eval.label,
        samples: labels.len(),
        golden_accuracy: eval.golden_accuracy,
        faulty_accuracy: eval.faulty_accuracy,
        rad: eval.rad,
        ber: run.counter.induced_ber(),
        excitations: Some(run.counter.excitations),
        uses: Some(run.counter.uses),
        latent: run.counter.uses == 0,
        site_role,
        weight_sites: vec![],
        neuron_sites: vec![],
        golden_digest: eval.golden_digest,
        faulty_digest: eval.faulty_digest,
    })
}

#[allow(clippy::too_many_arguments)]
fn app_record(
    cfg: &CampaignConfig,
    hash: &str,
    cell: &Cell,
    model: &Model,
    cache: &GoldenCache,
    golden: &[Vec<f32>],
    fault: &AppFault,
    text: &str,
    id: &str,
) -> Result<Record, CampaignError> {
    let out = appfi::run_app_fault(model, cache, golden, fault)?;
    let ber = match fault {
        AppFault::WeightMbf { ber, .. } => Some(*ber),
        _ => None,
    };
    let e = out.evaluation;
    Ok(Record {
        schema: SCHEMA_VERSION,
        run_id: id.to_string(),
        config_hash: hash.to_string(),
        model: cell.model.to_string(),
        hardening: cell.hardening,
        injector: cell.injector,
        fault: text.to_string(),
        isa_fault: None,
        app_fault: Some(fault.clone()),
        seed: cfg.seed,
        termination: crate::isa::Termination::Completed,
        label: e.label,
        samples: cache.labels.len(),
        golden_accuracy: e.golden_accuracy,
        faulty_accuracy: e.faulty_accuracy,
        rad: e.rad,
        ber,
        excitations: None,
        uses: None,
        latent: false,
        site_role: None,
        weight_sites: out.weight_sites,
        neuron_sites: out.neuron_sites,
        golden_digest: e.golden_digest,
        faulty_digest: e.faulty_digest,
    })
}

/// Bridges written by a previous campaign run, if any.
pub fn read_bridges(dir: &Path) -> Option<BTreeMap<String, ModelBridge>> {
    let text = std::fs::read_to_string(dir.join(BRIDGE_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}
