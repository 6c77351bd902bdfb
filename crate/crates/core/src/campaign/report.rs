use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::config::Injector;
use super::record::{read_records, Record};
use super::runner::read_bridges;
use super::CampaignError;
use crate::evaluate::Distribution;
use crate::hardening::HardeningKind;

pub const DISTRIBUTION_FILE: &str = "fault_distribution.csv";
pub const ACCURACY_FILE: &str = "accuracy_by_ber.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const DIVERGENCE_FILE: &str = "divergence.txt";

#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub distribution: PathBuf,
    pub accuracy: PathBuf,
    pub summary: PathBuf,
    pub divergence: PathBuf,
}

/// BER bins of the accuracy table: `[lo, hi)` except the closed middle bin.
pub const BER_BINS: [(&str, f64, f64); 3] = [("[0,1e-6)", 0.0, 1e-6), ("[1e-6,1e-5]", 1e-6, 1e-5), ("(1e-5,1]", 1e-5, 1.0)];

pub fn ber_bin(ber: f64) -> usize {
    if ber < 1e-6 {
        0
    } else if ber <= 1e-5 {
        1
    } else {
        2
    }
}

/// Ranking metric over a distribution; `ascending` means lower is better.
#[derive(Debug, Clone, Copy)]
pub struct Metric {
    pub name: &'static str,
    pub ascending: bool,
}

pub const CRITICAL_SDC: Metric = Metric { name: "critical_sdc", ascending: true };
pub const MASKED: Metric = Metric { name: "masked", ascending: false };

impl Metric {
    pub fn value(&self, d: &Distribution) -> f64 {
        let p = d.percentages();
        match self.name {
            "masked" => p[0],
            "safe_sdc" => p[1],
            "critical_sdc" => p[2],
            _ => p[3],
        }
    }
}

type CellKey = (Injector, String, HardeningKind);

/// Hardenings best-first by `metric`; ties by name.
pub fn rank(cells: &[(HardeningKind, Distribution)], metric: Metric) -> Vec<HardeningKind> {
    let mut v: Vec<(f64, &str, HardeningKind)> = cells.iter().map(|(h, d)| (metric.value(d), h.name(), *h)).collect();
    v.sort_by(|a, b| {
        let by = if metric.ascending { a.0.total_cmp(&b.0) } else { b.0.total_cmp(&a.0) };
        by.then(a.1.cmp(b.1))
    });
    v.into_iter().map(|x| x.2).collect()
}

fn distributions(records: &[Record]) -> BTreeMap<CellKey, Distribution> {
    let mut m: BTreeMap<CellKey, Distribution> = BTreeMap::new();
    for r in records {
        m.entry((r.injector, r.model.clone(), r.hardening)).or_default().add(r.label);
    }
    m
}

fn join(r: &[HardeningKind]) -> String {
    r.iter().map(|h| h.name()).collect::<Vec<_>>().join(" < ")
}

/// Write the distribution and accuracy tables, the ranked summary and the
/// divergence note for the records at `records`.
pub fn render_report(records: &Path, out_dir: &Path) -> Result<ReportFiles, CampaignError> {
    let recs = read_records(records)?;
    if recs.is_empty() {
        return Err(CampaignError::Records(format!("{}: no records", records.display())));
    }
    let mut seen = BTreeSet::new();
    let dups: Vec<String> = recs.iter().filter(|r| !seen.insert(r.run_id.as_str())).map(|r| format!("duplicate run {}", r.run_id)).collect();
    if !dups.is_empty() {
        return Err(CampaignError::CorruptRecords(dups));
    }
    std::fs::create_dir_all(out_dir)?;
    let dist = distributions(&recs);

    let mut csv = String::from("injector,target,model,hardening,masked_pct,safe_sdc_pct,critical_sdc_pct,due_pct,runs\n");
    for ((inj, model, h), d) in &dist {
        let p = d.percentages();
        let _ = writeln!(csv, "{inj},{},{model},{h},{:.2},{:.2},{:.2},{:.2},{}", inj.target(), p[0], p[1], p[2], p[3], d.runs());
    }

    // accuracy by BER bin
    let mut acc: BTreeMap<(String, HardeningKind, &'static str), [(f64, u64); 3]> = BTreeMap::new();
    for r in &recs {
        if let (Some(ber), Some(a)) = (r.ber, r.faulty_accuracy) {
            let e = acc.entry((r.model.clone(), r.hardening, r.injector.target())).or_default();
            let b = ber_bin(ber);
            e[b].0 += a;
            e[b].1 += 1;
        }
    }
    let mut acc_csv = String::from("model,hardening,target,ber_bin,mean_accuracy,runs\n");
    for ((model, h, target), bins) in &acc {
        for (i, (sum, n)) in bins.iter().enumerate() {
            let mean = if *n > 0 { format!("{:.4}", sum / *n as f64) } else { String::new() };
            let _ = writeln!(acc_csv, "{model},{h},{target},{},{mean},{n}", BER_BINS[i].0);
        }
    }

    // summary
    let mut s = String::from("fault injection campaign report\n\n[provenance]\n");
    let hashes: BTreeSet<&str> = recs.iter().map(|r| r.config_hash.as_str()).collect();
    let seeds: BTreeSet<u64> = recs.iter().map(|r| r.seed).collect();
    let _ = writeln!(s, "config_hash: {}", hashes.into_iter().collect::<Vec<_>>().join(","));
    let _ = writeln!(s, "seeds: {}", seeds.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","));
    let _ = writeln!(s, "tool: {} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"));
    let _ = writeln!(s, "records: {}", recs.len());

    s.push_str("\n[fault distribution, %]\n");
    let _ = writeln!(s, "{:<16} {:<8} {:<18} {:>8} {:>8} {:>8} {:>8} {:>6}", "injector", "model", "hardening", "masked", "safe", "critical", "due", "runs");
    for ((inj, model, h), d) in &dist {
        let p = d.percentages();
        let _ = writeln!(s, "{:<16} {:<8} {:<18} {:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>6}", inj.name(), model, h.name(), p[0], p[1], p[2], p[3], d.runs());
    }

    s.push_str("\n[critical_sdc ranking per injector, best first]\n");
    let mut by_inj_model: BTreeMap<(Injector, String), Vec<(HardeningKind, Distribution)>> = BTreeMap::new();
    for ((inj, model, h), d) in &dist {
        by_inj_model.entry((*inj, model.clone())).or_default().push((*h, *d));
    }
    for ((inj, model), cells) in &by_inj_model {
        let r = rank(cells, CRITICAL_SDC);
        let detail: Vec<String> =
            r.iter().map(|h| format!("{} {:.2}%", h.name(), CRITICAL_SDC.value(&cells.iter().find(|c| c.0 == *h).expect("present").1))).collect();
        let _ = writeln!(s, "{inj} {model}: {}", detail.join(" < "));
    }

    s.push_str("\n[mean RAD per cell]\n");
    let mut rads: BTreeMap<CellKey, (f64, u64)> = BTreeMap::new();
    for r in &recs {
        if let Some(x) = r.rad {
            let e = rads.entry((r.injector, r.model.clone(), r.hardening)).or_default();
            e.0 += x;
            e.1 += 1;
        }
    }
    for ((inj, model, h), (sum, n)) in &rads {
        let _ = writeln!(s, "{inj} {model} {h}: {:.6} over {n} completed runs", sum / *n as f64);
    }

    if let Some(bridges) = records.parent().and_then(read_bridges) {
        s.push_str("\n[BER bridge]\n");
        for (m, b) in &bridges {
            let samples: Vec<String> = b.bridge.samples.iter().map(|x| format!("{x:.3e}")).collect();
            let _ = writeln!(
                s,
                "{m}: range [{:.3e}, {:.3e}], floor {:.3e}, {} samples: {}",
                b.bridge.ber_min, b.bridge.ber_max, b.floor, b.bridge.rule, samples.join(" ")
            );
        }
    }

    // divergence between abstraction levels, per model and metric
    let mut div = String::new();
    let models: BTreeSet<&String> = by_inj_model.keys().map(|k| &k.1).collect();
    for model in models {
        for metric in [CRITICAL_SDC, MASKED] {
            for ((app, m1), app_cells) in by_inj_model.iter().filter(|((i, m), _)| !i.is_isa() && m == model) {
                for ((isa, _), isa_cells) in by_inj_model.iter().filter(|((i, m), _)| i.is_isa() && m == model) {
                    let common: BTreeSet<HardeningKind> = app_cells.iter().map(|c| c.0).filter(|h| isa_cells.iter().any(|c| c.0 == *h)).collect();
                    let pick = |cells: &Vec<(HardeningKind, Distribution)>| -> Vec<(HardeningKind, Distribution)> {
                        cells.iter().filter(|c| common.contains(&c.0)).copied().collect()
                    };
                    let (ra, ri) = (rank(&pick(app_cells), metric), rank(&pick(isa_cells), metric));
                    if ra != ri {
                        let _ = writeln!(div, "{m1} {}: {app} ranks {}; {isa} ranks {}", metric.name, join(&ra), join(&ri));
                    }
                }
            }
        }
    }
    let _ = writeln!(s, "\n[ranking divergence between abstraction levels]\n{}", if div.is_empty() { "none\n" } else { &div });

    let files = ReportFiles {
        distribution: out_dir.join(DISTRIBUTION_FILE),
        accuracy: out_dir.join(ACCURACY_FILE),
        summary: out_dir.join(SUMMARY_FILE),
        divergence: out_dir.join(DIVERGENCE_FILE),
    };
    std::fs::write(&files.distribution, csv)?;
    std::fs::write(&files.accuracy, acc_csv)?;
    std::fs::write(&files.summary, s)?;
    std::fs::write(&files.divergence, div)?;
    Ok(files)
}

/// Label share check used by reports and tests: percentages sum to 100.
pub fn percent_total(d: &Distribution) -> f64 {
    d.percentages().iter().sum()
}
