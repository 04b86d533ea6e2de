//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for data errors, 2 for usage errors.

mod commands;
mod io;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::error::PiaaError;
use crate::eval::SweepParam;
use crate::paa::InferenceMode;
use crate::pvcl::CovarianceDenominator;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DATA: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "piaa",
    version,
    about = "Training-free multi-label inference on patch embeddings"
)]
pub struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true, env = "PIAA_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic adaptation split, evaluation split and prototypes.
    Synth(SynthArgs),
    /// Fit the visual classifier on unlabeled patches.
    Fit(FitArgs),
    /// Score every image of an embedding set.
    Infer(InferArgs),
    /// Score and evaluate a labeled embedding set.
    Eval(EvalArgs),
    /// Evaluate the four classifier x aggregation combinations.
    Ablate(RunArgs),
    /// Evaluate one hyperparameter over a list of values.
    Sweep(SweepArgs),
    /// Per-class AP of the CLS, patch and fused scores.
    Breakdown(BreakdownArgs),
    /// Print a summary of an embedding, prototype or classifier file.
    Inspect(InspectArgs),
}

/// Input files, optionally listed in a JSON manifest. Flags win over the manifest.
#[derive(Debug, Clone, Default, Args)]
pub struct InputArgs {
    /// JSON file with `embeddings`, `adapt`, `prototypes`, `classifier` and `class_names`.
    #[arg(long)]
    pub inputs: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Unlabeled adaptation split for fitting.
    #[arg(long)]
    pub adapt: Option<PathBuf>,
    #[arg(long)]
    pub prototypes: Option<PathBuf>,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
}

/// Hyperparameters. Flags override the config file, which overrides defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// TOML file with any subset of the pipeline settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Memory bank capacity per class.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub logit_scale: Option<f64>,
    /// Temperature of the softmax over max-pooled patch probabilities.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// full, patch_only or cls_only.
    #[arg(long)]
    pub mode: Option<InferenceMode>,
    /// Fit on the evaluation images themselves.
    #[arg(long)]
    pub transductive: bool,
    #[arg(long)]
    pub no_secondary_softmax: bool,
    #[arg(long)]
    pub stage1_no_shrinkage: bool,
    #[arg(long)]
    pub self_consistent_covariance: bool,
    /// Score the CLS embedding with the visual classifier.
    #[arg(long)]
    pub cls_via_gda: bool,
    /// Keep stored embeddings at their original norms.
    #[arg(long)]
    pub no_normalize: bool,
    /// Succeed even when some class has no positive image.
    #[arg(long)]
    pub allow_empty_classes: bool,
}

impl ConfigArgs {
    /// Effective configuration after applying the file and the flags.
    pub fn resolve(&self) -> Result<PipelineConfig, PiaaError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                toml::from_str(&text)
                    .map_err(|e| PiaaError::InvalidParameter(format!("{}: {e}", path.display())))?
            }
            None => PipelineConfig::default(),
        };
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(s) = self.logit_scale {
            cfg.logit_scale = s;
        }
        if let Some(t) = self.temperature {
            cfg.secondary_softmax_temperature = t;
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        cfg.transductive |= self.transductive;
        cfg.secondary_softmax &= !self.no_secondary_softmax;
        cfg.stage1_shrinkage &= !self.stage1_no_shrinkage;
        if self.self_consistent_covariance {
            cfg.covariance = CovarianceDenominator::SelfConsistent;
        }
        cfg.cls_via_gda |= self.cls_via_gda;
        cfg.normalize &= !self.no_normalize;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// TOML generator spec; defaults apply to missing keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Classifier path; defaults to `classifier.piac` in the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for the run manifest; defaults to the parent of `--out`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Also write every patch's class probabilities.
    #[arg(long)]
    pub dump_patches: bool,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Score patches with the text prototypes instead of a visual classifier.
    #[arg(long)]
    pub no_pvcl: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// K or alpha.
    #[arg(long)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct BreakdownArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated class names.
    #[arg(long, value_delimiter = ',', required = true)]
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
}

/// Failure of a subcommand with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: anyhow::anyhow!(msg.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<PiaaError>() {
            Some(PiaaError::InvalidParameter(_) | PiaaError::UnknownClass(_)) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        Self { code, error }
    }
}

impl From<PiaaError> for CliError {
    fn from(e: PiaaError) -> Self {
        anyhow::Error::from(e).into()
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            e.code
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let threads = cli.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    let threads = pool.current_num_threads();
    pool.install(|| match cli.command {
        Command::Synth(a) => commands::synth(&a, threads),
        Command::Fit(a) => commands::fit(&a, threads),
        Command::Infer(a) => commands::infer(&a, threads),
        Command::Eval(a) => commands::eval(&a, threads),
        Command::Ablate(a) => commands::ablate(&a, threads),
        Command::Sweep(a) => commands::sweep(&a, threads),
        Command::Breakdown(a) => commands::breakdown(&a, threads),
        Command::Inspect(a) => commands::inspect(&a),
    })
}
