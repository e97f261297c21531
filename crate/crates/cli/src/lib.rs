//! The `dda` command-line pipeline: synth → pretrain → finetune → contrast →
//! attribute → eval → ablate / sweep-beta / loo → report.

pub mod charts;
pub mod commands;
pub mod config;
pub mod run;
#[cfg(test)]
mod tests;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use dda_core::influence::engine::Method;

use crate::config::{Config, Overrides};
use crate::run::Run;

/// Exit code 1 for runtime failures, 2 for usage or configuration errors.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<dda_core::Error> for CliError {
    fn from(e: dda_core::Error) -> Self {
        match e {
            dda_core::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Raw,
    Dda,
    Tracin,
    Trak,
    Bm25,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Raw => Method::Raw,
            MethodArg::Dda => Method::Dda,
            MethodArg::Tracin => Method::Tracin,
            MethodArg::Trak => Method::Trak,
            MethodArg::Bm25 => Method::Bm25,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
pub enum Format {
    #[default]
    Csv,
    Svg,
}

#[derive(Debug, Parser)]
#[command(name = "dda", version, about = "Debiased and denoised training data attribution")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config; flags override its fields.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Run directory (default: $DDA_RUN_ROOT/runs/<unix-seconds>-<config hash>).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub method: Option<MethodArg>,
    /// Debias weight.
    #[arg(long, global = true, value_name = "FLOAT")]
    pub beta: Option<f64>,
    /// Fine-tuning epochs.
    #[arg(long, global = true, value_name = "INT")]
    pub epochs: Option<usize>,
    /// Depth of the report's case listing.
    #[arg(long, global = true, value_name = "INT")]
    pub k: Option<usize>,
    #[arg(long, global = true, value_name = "INT")]
    pub workers: Option<usize>,
    /// Charts: CSV only, or CSV plus SVG.
    #[arg(long, global = true, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    /// Re-hash every artifact recorded in the run's manifests before running.
    #[arg(long, global = true)]
    pub verify: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the corrupted training, clean pretraining and test corpora.
    Synth,
    /// Train the base model on the clean corpus.
    Pretrain,
    /// Fine-tune on the corrupted corpus, one checkpoint per epoch.
    Finetune,
    /// Partition test outputs and fine-tune the two contrastive branches.
    Contrast,
    /// Score every training sample with --method.
    Attribute,
    /// R@500, R@1000 and AUC of an attribution.
    Eval,
    /// DDA against its single-checkpoint and undebiased variants.
    Ablate,
    /// DDA AUC over the configured β grid.
    SweepBeta,
    /// Exact influence against leave-one-out retraining on a convex probe.
    Loo,
    /// Collect metrics, charts and top-k cases into report/.
    Report,
}

impl Command {
    fn name(self, method: Method) -> String {
        match self {
            Command::Synth => "synth".into(),
            Command::Pretrain => "pretrain".into(),
            Command::Finetune => "finetune".into(),
            Command::Contrast => "contrast".into(),
            Command::Attribute => format!("attribute-{}", method.tag()),
            Command::Eval => format!("eval-{}", method.tag()),
            Command::Ablate => "ablate".into(),
            Command::SweepBeta => "sweep-beta".into(),
            Command::Loo => "loo".into(),
            Command::Report => "report".into(),
        }
    }
}

pub fn execute(cli: &Cli) -> Result<PathBuf, CliError> {
    let mut cfg = Config::load(cli.config.as_deref())?;
    cfg.apply(&Overrides {
        seed: cli.seed,
        method: cli.method.map(Method::from),
        beta: cli.beta,
        epochs: cli.epochs,
        k: cli.k,
        workers: cli.workers,
    });
    cfg.validate()?;
    let dir = run::resolve_dir(cli.out.as_deref(), &cfg.hash());
    if cli.verify {
        let n = run::verify(&dir)?;
        eprintln!("verified {n} recorded files in {}", dir.display());
    }
    let mut r = Run::open(dir)?;
    if let Some(p) = &cli.config {
        r.note_external(p)?;
    }
    match cli.command {
        Command::Synth => commands::synth(&mut r, &cfg)?,
        Command::Pretrain => commands::pretrain(&mut r, &cfg)?,
        Command::Finetune => commands::finetune(&mut r, &cfg)?,
        Command::Contrast => commands::contrast(&mut r, &cfg)?,
        Command::Attribute => commands::attribute(&mut r, &cfg)?,
        Command::Eval => commands::eval(&mut r, &cfg)?,
        Command::Ablate => commands::ablate(&mut r, &cfg, cli.format)?,
        Command::SweepBeta => commands::sweep(&mut r, &cfg, cli.format)?,
        Command::Loo => commands::loo(&mut r, &cfg)?,
        Command::Report => commands::report(&mut r, &cfg, cli.format)?,
    }
    let dir = r.dir.clone();
    for o in r.outputs() {
        println!("{}", dir.join(o).display());
    }
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    r.finish(&cli.command.name(cfg.influence.method), &cfg)?;
    Ok(dir)
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with(args: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
