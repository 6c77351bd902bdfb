use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use faultscope::appfi::{self, AppFaultSpec, AppMode, AppTarget, GoldenCache, StatSizing};
use faultscope::campaign::{self, CampaignConfig, RunOptions};
use faultscope::evaluate::Evaluation;
use faultscope::hardening;
use faultscope::isa::fault::{enumerate_fu_faults, enumerate_register_faults};
use faultscope::isa::{execute_traced, lower, FaultTarget, IsaBatch, IsaFault};
use faultscope::nn::arch::{self, ARCHITECTURES};
use faultscope::nn::train::TrainConfig;
use faultscope::nn::{load_csv, load_mnist_dir, load_model, save_model, Dataset, Split};
use faultscope::par;

#[derive(Parser)]
#[command(name = "faultscope", version, about = "Stuck-at fault injection for DNN hardening studies")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on MNIST (or CSV) and save it.
    Train(TrainArgs),
    /// Apply a hardening transform to a baseline model.
    Harden(HardenArgs),
    /// Application-level weight or feature-map fault injection.
    InjectApp(InjectAppArgs),
    /// Instruction-level stuck-at injection on the lowered model.
    InjectIsa(InjectIsaArgs),
    /// Run a full campaign from a TOML config.
    Campaign(CampaignArgs),
    /// Re-render reports from a records file.
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// MNIST IDX directory or CSV training file.
    #[arg(long)]
    data: PathBuf,
    /// MNIST directory or CSV file to report test accuracy on.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value = "lenet-small", value_parser = clap::builder::PossibleValuesParser::new(ARCHITECTURES))]
    arch: String,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 0.03)]
    lr: f32,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Use only the first N training samples.
    #[arg(long)]
    train_subset: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Technique {
    Ranger,
    Clipper,
    Relu6,
}

#[derive(clap::Args)]
struct HardenArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    technique: Technique,
    /// Calibration data: MNIST directory (training split) or CSV file.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    calib_size: usize,
    #[arg(long, default_value_t = hardening::DEFAULT_PERCENTILE)]
    percentile: f64,
    #[arg(long, default_value_t = 0)]
    finetune_epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    finetune_lr: f32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AppTargetArg {
    Weights,
    Neurons,
}

#[derive(Clone, Copy, ValueEnum)]
enum AppModeArg {
    Sbf,
    Mbf,
}

#[derive(clap::Args)]
struct InjectAppArgs {
    #[arg(long)]
    model: PathBuf,
    /// MNIST IDX directory (test split) or CSV file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    target: AppTargetArg,
    #[arg(long, value_enum, default_value = "sbf")]
    mode: AppModeArg,
    /// Bit error rate(s) for MBF, one run each.
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    ber: Vec<f64>,
    #[arg(long)]
    bler: Option<f64>,
    #[arg(long)]
    ner: Option<f64>,
    #[arg(long)]
    bit: Option<u8>,
    /// Restrict injection to one layer index.
    #[arg(long)]
    layer: Option<usize>,
    /// Number of runs for neuron campaigns.
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    #[arg(long, default_value_t = 0.005)]
    margin: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    eval_subset: usize,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// JSON-lines output; appended to.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum IsaTargetArg {
    Regs,
    Fus,
}

#[derive(clap::Args)]
struct InjectIsaArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "regs")]
    target: IsaTargetArg,
    /// Sweep the whole single-fault space of the target.
    #[arg(long)]
    exhaustive: bool,
    /// Single fault, e.g. reg:R7:bit12:sa1 or fu:fma:out:bit30:sa1.
    #[arg(long)]
    fault: Vec<IsaFault>,
    #[arg(long, default_value_t = 10)]
    watchdog_mult: u64,
    #[arg(long, default_value_t = 16)]
    eval_subset: usize,
    /// Run every execution even when the trace shows the fault is never excited.
    #[arg(long)]
    no_prune: bool,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Write the disassembly here.
    #[arg(long)]
    dump_asm: Option<PathBuf>,
    /// Write per-cycle site-use records of the first input here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CampaignArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip runs already present in the records file.
    #[arg(long)]
    resume: bool,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_data(path: &Path, split: Split, sample_shape: &[usize]) -> Result<Dataset> {
    let ds = if path.is_dir() {
        load_mnist_dir(path, split)
    } else {
        load_csv(path, sample_shape, split)
    };
    ds.with_context(|| format!("loading {}", path.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    let model = arch::by_name(&a.arch, a.seed).expect("validated by clap");
    let mut ds = load_data(&a.data, Split::Train, model.input_shape())?;
    if let Some(n) = a.train_subset {
        ds = ds.head(n);
    }
    let cfg = TrainConfig { lr: a.lr, epochs: a.epochs, batch_size: a.batch_size, seed: a.seed };
    eprintln!("training {} on {} samples", a.arch, ds.len());
    let mut trained = faultscope::nn::train(&model, &ds, &cfg)?;
    for (k, v) in [
        ("train.arch", a.arch.clone()),
        ("train.lr", a.lr.to_string()),
        ("train.epochs", a.epochs.to_string()),
        ("train.batch_size", a.batch_size.to_string()),
        ("train.seed", a.seed.to_string()),
        ("train.samples", ds.len().to_string()),
        ("train.optimizer", "sgd".to_string()),
    ] {
        trained.metadata.insert(k.into(), v);
    }
    if let Some(t) = &a.test {
        let test = load_data(t, Split::Test, trained.input_shape())?;
        let acc = trained.accuracy(&test)?;
        trained.metadata.insert("test.accuracy".into(), format!("{acc:.4}"));
        println!("test accuracy {acc:.4} on {} samples", test.len());
    }
    save_model(&trained, &a.out)?;
    println!("saved {}", a.out.display());
    Ok(())
}

fn harden(a: HardenArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let calib = match &a.calib {
        Some(p) => Some(load_data(p, Split::Train, model.input_shape())?.head(a.calib_size).with_split(Split::Calibration)),
        None => None,
    };
    let tune_cfg = TrainConfig { lr: a.finetune_lr, epochs: a.finetune_epochs, batch_size: 32, seed: a.seed };
    let tune = match (&calib, a.finetune_epochs) {
        (_, 0) => None,
        (Some(c), _) => Some((c, &tune_cfg)),
        (None, _) => bail!("--finetune-epochs needs --calib"),
    };
    let need = || calib.as_ref().context("this technique needs --calib");
    let hardened = match a.technique {
        Technique::Ranger => hardening::apply_ranger(&model, &hardening::profile_ranges(&model, need()?)?)?,
        Technique::Clipper => hardening::apply_adaptive_clipper(&model, need()?, a.percentile, tune)?,
        Technique::Relu6 => hardening::apply_swap_relu6(&model, tune)?,
    };
    save_model(&hardened, &a.out)?;
    let manifest = a.out.with_extension("manifest.txt");
    std::fs::write(&manifest, hardening::manifest(&hardened))?;
    println!("saved {} and {}", a.out.display(), manifest.display());
    Ok(())
}

fn inject_app(a: InjectAppArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let eval = load_data(&a.data, Split::Test, model.input_shape())?.head(a.eval_subset);
    let spec = AppFaultSpec {
        target: match a.target {
            AppTargetArg::Weights => AppTarget::Weights,
            AppTargetArg::Neurons => AppTarget::Neurons,
        },
        mode: match a.mode {
            AppModeArg::Sbf => AppMode::Sbf,
            AppModeArg::Mbf => AppMode::Mbf,
        },
        bit: a.bit,
        bers: a.ber.clone(),
        bler: a.bler,
        ner: a.ner,
        layer: a.layer,
        runs: a.runs,
        seed: a.seed,
    };
    let sizing = StatSizing { confidence: a.confidence, margin: a.margin, p: 0.5 };
    let plan = appfi::plan_app_runs(&model, &spec, &sizing)?;
    eprintln!("{} runs on {} samples", plan.len(), eval.len());
    let cache = GoldenCache::new(&model, &eval, a.jobs);
    let golden = cache.logits();
    let outcomes = par::map(&plan, a.jobs, |f| appfi::run_app_fault(&model, &cache, &golden, f));
    let mut out = BufWriter::new(File::options().create(true).append(true).open(&a.out)?);
    let mut counts = faultscope::evaluate::Distribution::default();
    for (f, o) in plan.iter().zip(outcomes) {
        let line = match o {
            Ok(o) => {
                counts.add(o.evaluation.label);
                json!({ "spec": spec, "fault": f, "weight_sites": o.weight_sites, "neuron_sites": o.neuron_sites,
                        "accuracy": o.evaluation.faulty_accuracy, "golden_accuracy": o.evaluation.golden_accuracy,
                        "rad": o.evaluation.rad, "label": o.evaluation.label })
            }
            Err(e) => json!({ "spec": spec, "fault": f, "error": e.to_string() }),
        };
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    print_distribution(&counts);
    Ok(())
}

fn print_distribution(d: &faultscope::evaluate::Distribution) {
    let p = d.percentages();
    println!(
        "runs {}: masked {:.2}% safe-sdc {:.2}% critical-sdc {:.2}% due {:.2}%",
        d.runs(),
        p[0],
        p[1],
        p[2],
        p[3]
    );
}

fn inject_isa(a: InjectIsaArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    let program = lower(&model)?;
    if let Some(p) = &a.dump_asm {
        std::fs::write(p, program.disassemble())?;
        eprintln!("wrote {} instructions to {}", program.code.len(), p.display());
    }
    let Some(data) = &a.data else {
        if a.exhaustive || !a.fault.is_empty() || a.trace.is_some() {
            bail!("--data is required to inject");
        }
        return Ok(());
    };
    let eval = load_data(data, Split::Test, model.input_shape())?.head(a.eval_subset);
    let inputs: Vec<Vec<f32>> = (0..eval.len()).map(|i| eval.images.sample(i).to_vec()).collect();
    if let Some(p) = &a.trace {
        let mut w = BufWriter::new(File::create(p)?);
        writeln!(w, "# cycle pc kind site raw seen")?;
        let (_, events) = execute_traced(&program, program.memory_with_input(&inputs[0]), a.fault.first(), u64::MAX / 2);
        for e in events {
            writeln!(w, "{e}")?;
        }
        w.flush()?;
    }
    let faults: Vec<IsaFault> = if a.exhaustive {
        match a.target {
            IsaTargetArg::Regs => enumerate_register_faults(&program),
            IsaTargetArg::Fus => enumerate_fu_faults(&program),
        }
    } else {
        a.fault.clone()
    };
    if faults.is_empty() {
        return Ok(());
    }
    let batch = IsaBatch::new(program, inputs);
    let golden = batch.golden_logits();
    eprintln!("{} faults over {} inputs", faults.len(), batch.len());
    let runs = par::map(&faults, a.jobs, |f| batch.run(f, a.watchdog_mult, !a.no_prune));
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::options().create(true).append(true).open(p)?)),
        None => Box::new(std::io::sink()),
    };
    let mut counts = faultscope::evaluate::Distribution::default();
    for (f, r) in faults.iter().zip(runs) {
        let e = Evaluation::from_logits(&golden, &r.logits, &eval.labels, r.termination)?;
        counts.add(e.label);
        let role = match f.target {
            FaultTarget::RegisterBit { reg, .. } => batch.program.roles[reg as usize],
            FaultTarget::FuPort { .. } => None,
        };
        let line = json!({ "fault": f.to_string(), "termination": r.termination, "label": e.label,
            "excitations": r.counter.excitations, "uses": r.counter.uses, "induced_ber": r.counter.induced_ber(),
            "latent": r.counter.uses == 0, "site_role": role, "accuracy": e.faulty_accuracy,
            "golden_accuracy": e.golden_accuracy, "rad": e.rad });
        writeln!(out, "{line}")?;
        if faults.len() == 1 {
            println!("{line}");
        }
    }
    out.flush()?;
    print_distribution(&counts);
    Ok(())
}

fn run_campaign(a: CampaignArgs) -> Result<()> {
    let cfg = CampaignConfig::load(&a.config)?;
    let opts = RunOptions {
        resume: a.resume,
        jobs: a.jobs,
        seed: a.seed,
        out: a.out,
        progress: Some(|m| eprintln!("{m}")),
    };
    let s = campaign::run_campaign(&cfg, &opts)?;
    println!(
        "{} planned runs, {} executed, {} already recorded; reports in {}",
        s.planned,
        s.executed,
        s.skipped,
        s.out_dir.display()
    );
    print!("{}", std::fs::read_to_string(&s.report.summary)?);
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let files = campaign::render_report(&a.records, &a.out)?;
    print!("{}", std::fs::read_to_string(&files.summary)?);
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(a) => train(a),
        Cmd::Harden(a) => harden(a),
        Cmd::InjectApp(a) => inject_app(a),
        Cmd::InjectIsa(a) => inject_isa(a),
        Cmd::Campaign(a) => run_campaign(a),
        Cmd::Report(a) => report(a),
    }
}
