//! Command-line front end. Every failure prints one line
//! `E_<KIND>: <message>` to stderr and maps to an exit code.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::RunConfig;
use crate::data::{generate_dataset, load_dataset, save_dataset, DataError, Dataset, Split};
use crate::train::{self, TrainError, TrainState, CHECKPOINT_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "farnet", version, about = "Composed image retrieval on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Flat key = value config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset.
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write metrics, checkpoint and validation report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (overrides the config).
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
    },
    /// Train every ablation setting over the configured seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
    },
    /// Write per-query attention maps as CSV.
    ExportAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Data(_) => EXIT_DATA,
            Self::Checkpoint(_) => EXIT_CHECKPOINT,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Self::Config(_) => "E_CONFIG",
            Self::Data(_) => "E_DATA",
            Self::Checkpoint(_) => "E_CHECKPOINT",
            Self::Runtime(_) => "E_RUNTIME",
        }
    }

    /// The single stderr line for this error.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("{}: {msg}", self.tag())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => Self::Config(m),
            TrainError::Data(d) => Self::Data(d.to_string()),
            TrainError::Checkpoint(c) => Self::Checkpoint(c.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Checkpoint(e.to_string())
    }
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split, CliError> {
    Split::parse(s).ok_or_else(|| CliError::Config(format!("unknown split {s:?} (expected train, val or test)")))
}

fn open_dataset(path: &Path) -> Result<Dataset, CliError> {
    Ok(load_dataset(path)?)
}

fn write_out(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Loads a checkpoint and, when given, replaces its dataset path.
fn restore(checkpoint: &Path, common: &Common, dataset: Option<PathBuf>) -> Result<(TrainState, PathBuf), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let state = TrainState::from_checkpoint(&ckpt)?;
    let data = match (dataset, &common.config) {
        (Some(d), _) => d,
        (None, Some(_)) => load_config(common)?.dataset,
        (None, None) => state.config.dataset.clone(),
    };
    Ok((state, data))
}

fn default_out(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenerateData { common } => {
            let cfg = load_config(&common)?;
            let out = common.out.clone().unwrap_or_else(|| cfg.dataset.clone());
            let dataset = generate_dataset(cfg.seed, cfg.n_triplets, cfg.split_ratios, cfg.image_size)?;
            save_dataset(&dataset, &out)?;
            let s = &dataset.manifest.splits;
            println!(
                "dataset={} triplets={} gallery={} train={} val={} test={}",
                out.display(),
                dataset.manifest.triplets.len(),
                dataset.gallery_len(),
                s.train.len(),
                s.val.len(),
                s.test.len()
            );
        }
        Command::Train { common, dataset } => {
            let mut cfg = load_config(&common)?;
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            let out = common.out.clone().unwrap_or_else(|| cfg.out.clone());
            let data = open_dataset(&cfg.dataset)?;
            let outcome = train::run_train(&cfg, &data, &out)?;
            println!("{}", outcome.report.to_json());
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            dataset,
        } => {
            let split = parse_split(&split)?;
            let (state, data_path) = restore(&checkpoint, &common, dataset)?;
            let data = open_dataset(&data_path)?;
            train::check_compatible(&state.config, &data)?;
            let report = state.evaluate(&data, split)?;
            let out = common.out.clone().unwrap_or_else(|| default_out(&checkpoint));
            let json = report.to_json();
            write_out(&out.join(format!("report_{}.json", split.as_str())), &(json.clone() + "\n"))?;
            println!("{json}");
        }
        Command::Ablate { common, dataset } => {
            let mut cfg = load_config(&common)?;
            if let Some(d) = dataset {
                cfg.dataset = d;
            }
            if let Some(seed) = common.seed {
                let n = cfg.ablation_seeds.len() as u64;
                cfg.ablation_seeds = (seed..seed + n).collect();
            }
            let out = common.out.clone().unwrap_or_else(|| cfg.out.join("ablation"));
            let data = open_dataset(&cfg.dataset)?;
            let rows = train::run_ablation(&cfg, &data, &out)?;
            print!("{}", train::ablation_csv(&rows));
        }
        Command::ExportAttention {
            common,
            checkpoint,
            split,
            dataset,
        } => {
            let split = parse_split(&split)?;
            let (state, data_path) = restore(&checkpoint, &common, dataset)?;
            let data = open_dataset(&data_path)?;
            train::check_compatible(&state.config, &data)?;
            let out = common.out.clone().unwrap_or_else(|| default_out(&checkpoint));
            let rows = train::export_attention(&state.model, &state.params, &data, split, state.config.patch_size, &out)?;
            let hits = rows.iter().filter(|r| r.hit()).count();
            println!(
                "exported={} localized={} fraction={}",
                rows.len(),
                hits,
                hits as f64 / rows.len().max(1) as f64
            );
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").to_string();
            eprintln!("E_CONFIG: {}", first.trim_start_matches("error: "));
            return EXIT_CONFIG;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", e.line());
            e.code()
        }
    }
}

/// Default checkpoint location inside a training output directory.
pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join(CHECKPOINT_FILE)
}
