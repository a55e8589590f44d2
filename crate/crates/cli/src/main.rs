//! `dgmr`: stage-by-stage driver for splicing GMVAE layers into hosts.

mod config;
mod report;
mod stages;

use clap::{Args, Parser, Subcommand};
use dgmr_core::CoreError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dgmr", version, about = "Splice GMVAE stochastic layers into host networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split the corpus or image set, build the vocabulary and masked evaluation set.
    PrepareData(Common),
    /// Train the host network from scratch.
    PretrainHost(Common),
    /// Dump hidden vectors at the splice site.
    Snapshot(Common),
    /// Train the GMVAE on a hidden-state dump.
    TrainDgm(Common),
    /// Splice the GMVAE in and fine-tune the layers above it, plus an unspliced baseline.
    SpliceFinetune(Common),
    /// Score baseline and spliced models on the held-out set.
    Evaluate(Common),
    /// Write the side-by-side imputation report.
    Impute(Common),
    /// Fine-tune above the site with dropout instead of the GMVAE.
    BaselineDropout(Common),
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub site: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub policy: Option<String>,
    #[arg(long)]
    pub topk: Option<usize>,
    /// Dropout rate for `baseline-dropout`.
    #[arg(long)]
    pub rate: Option<f32>,
    /// Skip masked BLEU in `evaluate`.
    #[arg(long)]
    pub no_masked_bleu: bool,
}

#[derive(Debug)]
pub enum CliError {
    Core(CoreError),
    Missing { path: PathBuf, stage: &'static str },
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl From<dgmr_tensor::TensorError> for CliError {
    fn from(e: dgmr_tensor::TensorError) -> Self {
        CliError::Core(e.into())
    }
}

fn code(e: &CoreError) -> &'static str {
    match e {
        CoreError::Tensor(_) => "tensor",
        CoreError::Config(_) => "config",
        CoreError::Domain(_) => "domain",
        CoreError::Dimension(_) => "dimension",
        CoreError::Format(_) => "format",
        CoreError::Crc { .. } => "crc",
        CoreError::Io { .. } => "io",
        CoreError::Site(_) => "site",
        CoreError::Divergence { .. } => "divergence",
        CoreError::UndefinedMetric(_) => "undefined-metric",
        CoreError::Metric(_) => "metric",
        CoreError::Empty(_) => "empty",
        CoreError::EpochOrder { .. } => "epoch-order",
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("DGMR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        dgmr_core::par::init_threads(n);
    }
    let res = match cli.cmd {
        Cmd::PrepareData(a) => stages::prepare_data(&a),
        Cmd::PretrainHost(a) => stages::pretrain_host(&a),
        Cmd::Snapshot(a) => stages::snapshot(&a),
        Cmd::TrainDgm(a) => stages::train_dgm(&a),
        Cmd::SpliceFinetune(a) => stages::splice_finetune(&a),
        Cmd::Evaluate(a) => stages::evaluate(&a),
        Cmd::Impute(a) => stages::impute(&a),
        Cmd::BaselineDropout(a) => stages::baseline_dropout(&a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Core(e)) => {
            eprintln!("dgmr: error[{}]: {}", code(&e), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
        Err(CliError::Missing { path, stage }) => {
            eprintln!(
                "dgmr: error[missing-artifact]: expected {} (produced by `dgmr {stage}`)",
                path.display()
            );
            ExitCode::FAILURE
        }
    }
}
