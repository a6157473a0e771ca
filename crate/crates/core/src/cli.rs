//! Command-line front end.
//!
//! Exit codes: 0 success, 1 empty input, 2 usage or configuration, 3 data
//! precondition, 4 numeric abort.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::RunConfigFile;
use crate::data::{load_dataset, read_image, write_synthetic_dataset, DatasetHandle, ScaleFactor};
use crate::error::{Error, Result};
use crate::metrics::{
    evaluate_corpus, BicubicUpsampler, BilinearUpsampler, Embedder, EvalOptions, FileEmbedder, MetricReport,
    PerfectOracle, ProjectionEmbedder, SuperResolver,
};
use crate::training::{load_checkpoint, resume, train, Checkpoint};

pub const EXIT_OK: u8 = 0;
pub const EXIT_EMPTY_INPUT: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "halluc", version, about = "Identity-aware multi-scale face super-resolution")]
pub struct Cli {
    /// Seed overriding the config file's training and evaluation seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run configuration file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Log more detail; repeat for debug output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic face corpus as one folder per identity.
    MakeDataset(MakeDatasetArgs),
    /// Train a generator and discriminator.
    Train(TrainArgs),
    /// Score a checkpoint or baseline on an image folder.
    Evaluate(EvaluateArgs),
    /// Super-resolve LR images with a checkpoint.
    Hallucinate(HallucinateArgs),
}

#[derive(Debug, Args)]
pub struct MakeDatasetArgs {
    /// Number of identities.
    #[arg(long, default_value_t = 8)]
    pub identities: usize,
    /// Images per identity.
    #[arg(long, default_value_t = 4)]
    pub variations: usize,
    /// Side length in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Image folder; overrides `data.path`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output directory; overrides `training.out_dir`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Step count; overrides `training.steps`.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Checkpoint interval; overrides `training.checkpoint_every`.
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Clip gradients to global norm 10.
    #[arg(long)]
    pub grad_clip: bool,
    /// Continue from this checkpoint; its config must match apart from run length.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Generator checkpoint; not needed with --oracle or --baseline.
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
    /// Image folder; overrides `data.path`.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Upscaling factor of the dataset pairs; defaults to the checkpoint's.
    #[arg(long)]
    pub factor: Option<usize>,
    /// HR side length when no checkpoint is given.
    #[arg(long)]
    pub hr_size: Option<usize>,
    /// Report directory; overrides `eval.out_dir`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Debug: score the ground truth itself in place of a generator.
    #[arg(long, conflicts_with = "baseline")]
    pub oracle: bool,
    /// Score an interpolation baseline in place of a generator.
    #[arg(long, value_parser = ["bicubic", "bilinear"])]
    pub baseline: Option<String>,
    /// Embedding file (`image_id v1 ... vd` per line) for identity metrics.
    #[arg(long, value_name = "FILE")]
    pub embedder: Option<PathBuf>,
    /// Skip verification and identification metrics.
    #[arg(long)]
    pub no_identity: bool,
    /// Evaluate only images past `data.train_per_identity` in each identity.
    #[arg(long)]
    pub held_out: bool,
}

#[derive(Debug, Args)]
pub struct HallucinateArgs {
    /// Generator checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: PathBuf,
    /// Glob pattern of LR input images.
    #[arg(long, value_name = "GLOB")]
    pub input: String,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// Errors the CLI reports before reaching a library call.
#[derive(Debug)]
pub enum CliError {
    EmptyInput(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::EmptyInput(m) => write!(f, "{m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

/// Process exit code for a library error.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::DatasetStructure(_)
        | Error::InsufficientDiversity { .. }
        | Error::Decode { .. }
        | Error::Size(_)
        | Error::Protocol(_) => EXIT_DATA,
        Error::NonFinite { .. } | Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io { .. } | Error::Config(_) | Error::Integrity(_) | Error::Input(_) | Error::Tensor(_) => EXIT_USAGE,
    }
}

/// Parses `args` (program name first) and runs the command, returning the exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(CliError::EmptyInput(m)) => {
            eprintln!("error: {m}");
            EXIT_EMPTY_INPUT
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfigFile> {
    let mut c = match &cli.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    if let Some(s) = cli.seed {
        c.training.seed = s;
        c.eval.seed = s;
    }
    Ok(c)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::MakeDataset(a) => cmd_make_dataset(a, cli.seed.unwrap_or(0)),
        Command::Train(a) => cmd_train(&load_config(cli)?, a),
        Command::Evaluate(a) => cmd_evaluate(&load_config(cli)?, a),
        Command::Hallucinate(a) => cmd_hallucinate(a),
    }
}

fn cmd_make_dataset(a: &MakeDatasetArgs, seed: u64) -> Result<(), CliError> {
    if a.identities == 0 || a.variations == 0 || a.size == 0 {
        return Err(Error::Input("identities, variations and size must be positive".into()).into());
    }
    if a.out.exists() {
        let non_empty = std::fs::read_dir(&a.out)
            .map_err(|e| Error::io(&a.out, e))?
            .next()
            .is_some();
        if non_empty && !a.overwrite {
            return Err(Error::Input(format!(
                "{} is not empty; pass --overwrite to write into it",
                a.out.display()
            ))
            .into());
        }
    }
    let files = write_synthetic_dataset(a.identities, a.variations, a.size, seed, &a.out)?;
    println!("wrote {} images to {}", files.len(), a.out.display());
    Ok(())
}

fn dataset_path(flag: &Option<PathBuf>, config: &RunConfigFile) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| config.data.path.clone())
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data.path".into()))
}

fn cmd_train(config: &RunConfigFile, a: &TrainArgs) -> Result<(), CliError> {
    let mut tc = config.train_config()?;
    if let Some(s) = a.steps {
        tc.steps = s;
    }
    if let Some(e) = a.checkpoint_every {
        tc.checkpoint_every = e;
    }
    if a.grad_clip {
        tc.grad_clip = Some(crate::training::DEFAULT_GRAD_CLIP);
    }
    tc.validate()?;
    let out = a.out.clone().unwrap_or_else(|| config.training.out_dir.clone());
    let root = dataset_path(&a.data, config)?;
    let mut ds = load_dataset(&root, tc.generator.hr_size(), tc.generator.scale_factor)?;
    if let Some(n) = config.data.train_per_identity {
        ds = ds.split_by_ordinal(n)?.0;
    }
    info!("training on {} images of {} identities", ds.len(), ds.identity_count());
    let ckpt = match &a.resume {
        Some(p) => resume(load_checkpoint(p)?, &tc, &ds, &out)?,
        None => train(tc, &ds, &out)?,
    };
    println!("trained {} steps; checkpoint and log in {}", ckpt.step, out.display());
    Ok(())
}

fn cmd_evaluate(config: &RunConfigFile, a: &EvaluateArgs) -> Result<(), CliError> {
    let ckpt: Option<Checkpoint> = match (&a.checkpoint, a.oracle || a.baseline.is_some()) {
        (Some(p), false) => Some(load_checkpoint(p)?),
        (None, false) => return Err(Error::Config("pass --checkpoint, --oracle or --baseline".into()).into()),
        (_, true) => None,
    };
    let gen_cfg = ckpt.as_ref().map(|c| c.generator.config().clone()).unwrap_or_else(|| config.generator.clone());
    let factor = match a.factor {
        Some(f) => ScaleFactor::new(f)?,
        None => gen_cfg.scale_factor,
    };
    let hr_size = match (&ckpt, a.hr_size) {
        (Some(_), _) | (None, None) => gen_cfg.hr_size(),
        (None, Some(h)) => h,
    };
    let root = dataset_path(&a.data, config)?;
    let mut ds: DatasetHandle = load_dataset(&root, hr_size, factor)?;
    if a.held_out {
        let n = config
            .data
            .train_per_identity
            .ok_or_else(|| Error::Config("--held-out needs data.train_per_identity".into()))?;
        ds = ds.split_by_ordinal(n)?.1;
    }
    let oracle;
    let bicubic = BicubicUpsampler(factor.value());
    let bilinear = BilinearUpsampler(factor.value());
    let resolver: &dyn SuperResolver = match (&ckpt, a.baseline.as_deref()) {
        (Some(c), _) => &c.generator,
        (None, Some("bilinear")) => &bilinear,
        (None, Some(_)) => &bicubic,
        (None, None) => {
            oracle = PerfectOracle::from_dataset(&ds)?;
            &oracle
        }
    };
    let embedder: Option<Box<dyn Embedder>> = if a.no_identity || !config.eval.identity {
        None
    } else {
        match a.embedder.as_ref().or(config.eval.embedder.as_ref()) {
            Some(p) => Some(Box::new(FileEmbedder::load(p)?)),
            None => Some(Box::new(ProjectionEmbedder::default())),
        }
    };
    let opts = EvalOptions { seed: config.eval.seed, ks: config.eval.ks.clone() };
    let report: MetricReport = evaluate_corpus(resolver, &ds, embedder.as_deref(), &opts)?;
    let out = a.out.clone().unwrap_or_else(|| config.eval.out_dir.clone());
    report.write(&out)?;
    println!("{}", report.summary());
    Ok(())
}

fn expand_glob(pattern: &str) -> Result<Vec<PathBuf>, CliError> {
    let paths = glob::glob(pattern).map_err(|e| Error::Input(format!("bad glob {pattern}: {e}")))?;
    let mut files: Vec<PathBuf> = paths.filter_map(|p| p.ok()).filter(|p| p.is_file()).collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::EmptyInput(format!("no files match {pattern}")));
    }
    Ok(files)
}

fn output_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    format!("{stem}_sr")
}

fn cmd_hallucinate(a: &HallucinateArgs) -> Result<(), CliError> {
    let files = expand_glob(&a.input)?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut inputs = Vec::with_capacity(files.len());
    for f in &files {
        let name = output_name(f);
        if inputs.iter().any(|(n, _)| n == &name) {
            return Err(Error::Input(format!("two inputs map to output name {name}")).into());
        }
        inputs.push((name, read_image(f)?));
    }
    let written = crate::training::hallucinate(&ckpt.generator, &inputs, &a.out)?;
    println!("wrote {} images to {}", written.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(
            exit_code(&Error::InsufficientDiversity { kind: crate::data::PairKind::P4, reason: "x".into() }),
            EXIT_DATA
        );
        assert_eq!(exit_code(&Error::NonFinite { term: "total".into(), step: 3 }), EXIT_NUMERIC);
    }
}
