//! Batch driver for the lvseg pipeline: argument parsing, configuration and
//! the on-disk stages.

pub mod config;
pub mod overlays;
pub mod stages;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::PipelineConfig;
use stages::Layout;

#[derive(Debug, Parser)]
#[command(
    name = "lvseg",
    version,
    about = "Left-ventricle segmentation for cine MRI sequences"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON pipeline configuration; missing keys take their defaults
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the configured seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Run directory (for `synth`, the corpus directory)
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Weight file; defaults to <out>/model.fcnw
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,

    /// Input dataset directory; defaults to <out>/preprocessed for stages
    /// after `preprocess`
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,

    /// Runs to compare in `eval`, as label=dir pairs separated by commas
    #[arg(long, global = true)]
    pub runs: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a synthetic phantom corpus
    Synth,
    /// Clip outliers and scale frames to [0, 1]
    Preprocess,
    /// Locate the motion ROI of every sequence
    Roi,
    /// Train the network on the training split
    Train,
    /// Write probability maps for the test split
    Infer,
    /// Threshold, pick the roundest region and render overlays
    Postprocess,
    /// Score runs against ground truth
    Eval,
    /// preprocess, roi, train (unless --model is given), infer, postprocess, eval
    Pipeline,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess => "preprocess",
            Command::Roi => "roi",
            Command::Train => "train",
            Command::Infer => "infer",
            Command::Postprocess => "postprocess",
            Command::Eval => "eval",
            Command::Pipeline => "pipeline",
        }
    }
}

/// Parses `label=dir,label=dir`.
pub fn parse_runs(spec: &str) -> Result<Vec<(String, PathBuf)>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let (label, dir) = pair
                .split_once('=')
                .with_context(|| format!("run `{pair}` is not label=dir"))?;
            if label.trim().is_empty() || dir.trim().is_empty() {
                bail!("run `{pair}` has an empty label or directory");
            }
            Ok((label.trim().to_string(), PathBuf::from(dir.trim())))
        })
        .collect()
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg.finish(common.seed).context("invalid configuration")
}

/// Executes one subcommand.
pub fn run(cli: &Cli) -> Result<()> {
    let common = &cli.common;
    let cfg = load_config(common)?;
    let layout = Layout::new(&common.out);
    let pre = || common.dataset.clone().unwrap_or_else(|| layout.preprocessed());
    let model = || common.model.clone().unwrap_or_else(|| layout.model());
    let input = || common.dataset.clone().context("--dataset is required");
    match cli.command {
        Command::Synth => {
            stages::synth(&cfg, &common.out)?;
        }
        Command::Preprocess => stages::preprocess(&cfg, &input()?, &layout)?,
        Command::Roi => {
            stages::roi(&cfg, &pre(), &layout)?;
        }
        Command::Train => {
            stages::train(&cfg, &pre(), &layout, &model())?;
        }
        Command::Infer => stages::infer(&cfg, &pre(), &layout, &model())?,
        Command::Postprocess => {
            stages::postprocess(&cfg, &pre(), &layout)?;
        }
        Command::Eval => {
            let runs = match &common.runs {
                Some(spec) => parse_runs(spec)?,
                None => stages::default_runs(&cfg, &layout),
            };
            stages::eval(&cfg, &pre(), &runs, &layout)?;
        }
        Command::Pipeline => {
            stages::run_pipeline(&cfg, &input()?, &layout, common.model.as_deref())?;
        }
    }
    Ok(())
}
