//! Campaign orchestration: TOML configs, the model x hardening x injector
//! matrix, resumable JSON-lines records and the rendered reports.

mod config;
mod record;
mod report;
mod runner;

use thiserror::Error;

pub use config::{
    BerSource, CampaignConfig, DataConfig, HardeningConfig, Injector, IsaConfig, MbfConfig, ModelEntry, NeuronConfig,
    SizingConfig,
};
pub use record::{read_records, run_id, Record, RecordWriter, SCHEMA_VERSION};
pub use report::{
    ber_bin, percent_total, rank, render_report, Metric, ReportFiles, ACCURACY_FILE, BER_BINS, CRITICAL_SDC,
    DISTRIBUTION_FILE, DIVERGENCE_FILE, MASKED, SUMMARY_FILE,
};
pub use runner::{
    harden, load_data, read_bridges, run_campaign, CampaignData, CampaignSummary, ModelBridge, RunOptions, BRIDGE_FILE,
    PLAN_FILE, RECORDS_FILE,
};

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("config: {0}")]
    Config(String),
    #[error("records: {0}")]
    Records(String),
    #[error("corrupt records:\n{}", .0.join("\n"))]
    CorruptRecords(Vec<String>),
    #[error("BER bridge: {0}")]
    Bridge(String),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error(transparent)]
    Model(#[from] crate::nn::ModelFileError),
    #[error(transparent)]
    Hardening(#[from] crate::hardening::HardeningError),
    #[error(transparent)]
    Lower(#[from] crate::isa::LowerError),
    #[error(transparent)]
    App(#[from] crate::appfi::AppError),
    #[error(transparent)]
    Eval(#[from] crate::evaluate::EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
