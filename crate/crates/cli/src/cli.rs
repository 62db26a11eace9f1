use std::net::IpAddr;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use geoflow_core::pipeline::PipelineConfig;

use crate::commands;

#[derive(Debug, Parser)]
#[command(name = "geoflow", version, about = "Marker-guided 3D muscle group segmentation")]
pub struct Cli {
    /// Pipeline config (JSON). Stage subcommands take their parameter blocks from it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Worker threads for the data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Seed for synthetic data. The pipeline itself is deterministic.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic thigh phantom case (volumes, truth, annotations, config).
    Phantom(PhantomArgs),
    /// Prior-informed bias correction of a T1 volume.
    BiasCorrect(BiasArgs),
    /// Edge map of a (corrected) volume.
    Edges(EdgesArgs),
    /// Geodesic marker / anti-marker distances and penalties per group.
    Distance(DistanceArgs),
    /// Level-set segmentation from a corrected volume, edge map and annotations.
    Segment(SegmentArgs),
    /// Dice table of predicted against reference label volumes.
    Dice(DiceArgs),
    /// Run every stage from a config.
    Pipeline(PipelineArgs),
    /// Serve slices, annotations and segmentation jobs over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Phantom parameters as JSON; flags below override individual fields.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Grid size as `nx,ny,nz`.
    #[arg(long, value_parser = triple::<usize>)]
    pub dims: Option<[usize; 3]>,
    /// Field of view in mm as `x,y,z`.
    #[arg(long, value_parser = triple::<f64>)]
    pub fov: Option<[f64; 3]>,
    #[arg(long)]
    pub groups: Option<usize>,
    /// Sup-norm of the multiplicative bias field.
    #[arg(long)]
    pub bias: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Slices that receive annotations (default: every fifth slice plus the second to last).
    #[arg(long, value_delimiter = ',')]
    pub slices: Option<Vec<usize>>,
}

fn triple<T: std::str::FromStr + Copy>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| format!("`{p}` is not a valid number"))
        })
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(format!("expected three comma-separated values, got {}", parts.len())),
    }
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    #[arg(long)]
    pub t1: PathBuf,
    /// Fat-fraction volume for the class priors; uniform priors without it.
    #[arg(long)]
    pub fat_fraction: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EdgesArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DistanceArgs {
    #[arg(long)]
    pub edges: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub corrected: PathBuf,
    #[arg(long)]
    pub edges: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiceArgs {
    /// Predicted label volume; repeat for several cases.
    #[arg(long, required = true)]
    pub pred: Vec<PathBuf>,
    /// Reference label volume, paired with `--pred` in order.
    #[arg(long, required = true)]
    pub truth: Vec<PathBuf>,
    /// Case names (default: the predicted volume's directory name).
    #[arg(long)]
    pub name: Vec<String>,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    /// Print the default config with every parameter and exit.
    #[arg(long)]
    pub print_defaults: bool,
    /// Reuse bias and edge stages whose inputs are unchanged.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub skip_bias: bool,
    /// Override the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
}

impl Cli {
    fn pipeline_config(&self) -> Result<PipelineConfig> {
        match &self.config {
            Some(p) => PipelineConfig::load(p).with_context(|| format!("loading config {}", p.display())),
            None => Ok(PipelineConfig::default()),
        }
    }

    fn require_config(&self, what: &str) -> Result<PipelineConfig> {
        if self.config.is_none() {
            anyhow::bail!("`{what}` needs --config <path>");
        }
        self.pipeline_config()
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::Phantom(a) => commands::phantom(a, cli.seed),
        Command::BiasCorrect(a) => commands::bias_correct(a, &cli.pipeline_config()?),
        Command::Edges(a) => commands::edges(a, &cli.pipeline_config()?),
        Command::Distance(a) => commands::distance(a, &cli.pipeline_config()?),
        Command::Segment(a) => commands::segment(a, &cli.pipeline_config()?),
        Command::Dice(a) => commands::dice(a),
        Command::Pipeline(a) if a.print_defaults => {
            println!("{}", PipelineConfig::default().to_json());
            Ok(())
        }
        Command::Pipeline(a) => commands::pipeline(a, cli.require_config("pipeline")?),
        Command::Serve(a) => commands::serve(a, cli.require_config("serve")?),
    }
}
