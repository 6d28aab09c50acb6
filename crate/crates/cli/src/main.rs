//! Command-line pipeline: synthetic data, registration, baking, model
//! building, rendering, image fitting, rigging and bundle export.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use facerig::dynamic_detail::MaskNormalization;
use facerig::synthetic::ResolutionTier;

use crate::commands::Failure;
use crate::config::PipelineConfig;

#[derive(Parser, Debug)]
#[command(
    name = "facerig",
    version,
    about = "Two-layer face scans, bilinear models, fitting and detail rigs"
)]
struct Cli {
    /// JSON pipeline configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: one per core).
    #[arg(long, global = true, env = "FACERIG_THREADS")]
    threads: Option<usize>,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic population of wrinkled scans with ground truth.
    Synth(SynthArgs),
    /// Register the template onto every scan of a dataset.
    Register(RegisterArgs),
    /// Bake displacement maps of registered bases against their scans.
    Bake(BakeArgs),
    /// Build the bilinear shape model and the albedo model.
    BuildModel(BuildModelArgs),
    /// Render a face from random model parameters with its landmarks.
    Render(RenderArgs),
    /// Fit the model to an image with 2D landmarks.
    Fit(FitArgs),
    /// Build a blendshape rig for a fitted identity and blend its detail maps.
    Rig(RigArgs),
    /// Export a rig bundle with conformance vectors for viewers.
    ExportBundle(ExportBundleArgs),
    /// Print the effective configuration as JSON.
    Config,
}

#[derive(Args, Debug)]
pub struct Output {
    /// Output directory; its parent must exist.
    pub out: PathBuf,
    /// Replace an output directory left by an earlier run.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub ids: Option<usize>,
    #[arg(long)]
    pub exps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub tier: Option<Tier>,
    /// Resolution of the stored truth displacement maps (0 skips them).
    #[arg(long)]
    pub truth_resolution: Option<usize>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Debug)]
pub struct RegisterArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Register only the first N subjects.
    #[arg(long)]
    pub subjects: Option<usize>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Debug)]
pub struct BakeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub registered: PathBuf,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Debug)]
pub struct BuildModelArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub registered: PathBuf,
    #[arg(long)]
    pub rank_id: Option<usize>,
    #[arg(long)]
    pub rank_exp: Option<usize>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub size: Option<usize>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub landmarks: PathBuf,
    /// Ground-truth mesh for error reporting.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Debug)]
pub struct RigArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory of `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    /// Directory of neutral and key-expression maps (`map_000.png`, …).
    #[arg(long)]
    pub maps: PathBuf,
    /// Comma-separated blendshape weights for the detailed mesh.
    #[arg(long, value_delimiter = ',')]
    pub alpha: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub normalization: Option<Normalization>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(Args, Debug)]
pub struct ExportBundleArgs {
    /// Output directory of `rig`.
    #[arg(long)]
    pub rig: PathBuf,
    #[arg(long)]
    pub maps: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub normalization: Option<Normalization>,
    #[command(flatten)]
    pub output: Output,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum Tier {
    Small,
    Medium,
    Full,
}

impl From<Tier> for ResolutionTier {
    fn from(t: Tier) -> Self {
        match t {
            Tier::Small => Self::Small,
            Tier::Medium => Self::Medium,
            Tier::Full => Self::Full,
        }
    }
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum Normalization {
    PerMask,
    Global,
}

impl From<Normalization> for MaskNormalization {
    fn from(n: Normalization) -> Self {
        match n {
            Normalization::PerMask => Self::PerMask,
            Normalization::Global => Self::Global,
        }
    }
}

fn apply_overrides(cfg: &mut PipelineConfig, cli: &Cli) {
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    match &cli.command {
        Command::Synth(a) => {
            cfg.synth.identities = a.ids.unwrap_or(cfg.synth.identities);
            cfg.synth.expressions = a.exps.unwrap_or(cfg.synth.expressions);
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            if let Some(t) = a.tier {
                cfg.synth.tier = t.into();
            }
            if let Some(r) = a.truth_resolution {
                cfg.synth.truth_map_resolution = (r > 0).then_some(r);
            }
        }
        Command::Bake(a) => cfg.bake.resolution = a.resolution.unwrap_or(cfg.bake.resolution),
        Command::BuildModel(a) => {
            cfg.model.rank_id = a.rank_id.unwrap_or(cfg.model.rank_id);
            cfg.model.rank_exp = a.rank_exp.unwrap_or(cfg.model.rank_exp);
        }
        Command::Render(a) => {
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            cfg.render.size = a.size.unwrap_or(cfg.render.size);
        }
        Command::Rig(a) => {
            if a.alpha.is_some() {
                cfg.rig.alpha = a.alpha.clone();
            }
            if let Some(n) = a.normalization {
                cfg.rig.normalization = n.into();
            }
        }
        Command::ExportBundle(a) => {
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            if let Some(n) = a.normalization {
                cfg.rig.normalization = n.into();
            }
        }
        Command::Register(_) | Command::Fit(_) | Command::Config => {}
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref()).map_err(Failure::Usage)?;
    apply_overrides(&mut cfg, cli);
    cfg.validate().map_err(Failure::Usage)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.into()))?;
    }
    match &cli.command {
        Command::Synth(a) => commands::synth(&cfg, a),
        Command::Register(a) => commands::register(&cfg, a),
        Command::Bake(a) => commands::bake(&cfg, a),
        Command::BuildModel(a) => commands::build_model(&cfg, a),
        Command::Render(a) => commands::render(&cfg, a),
        Command::Fit(a) => commands::fit(&cfg, a),
        Command::Rig(a) => commands::rig(&cfg, a),
        Command::ExportBundle(a) => commands::export_bundle(&cfg, a),
        Command::Config => {
            println!(
                "{}",
                serde_json::to_string_pretty(&cfg).map_err(|e| Failure::Usage(e.into()))?
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Pipeline(stage, e)) => {
            eprintln!("error: {stage}: {e:#}");
            ExitCode::from(1)
        }
    }
}
