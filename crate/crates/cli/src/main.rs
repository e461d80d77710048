//! `voxnvs`: scene generation, triplet mining, training, rendering and
//! evaluation from the command line.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

mod commands;
mod imageio;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "voxnvs", version, about = "Generative novel-view synthesis on sparse voxel grids")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Worker cap; every stage currently runs on one thread.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate procedural rooms and capture RGB-D views of each.
    GenScenes(GenScenesArgs),
    /// Mine source/source/query triplets under the overlap rules.
    MakeTriplets(MakeTripletsArgs),
    /// Run one training phase.
    Train(TrainArgs),
    /// Render a triplet's query view or a trajectory through it.
    Render(RenderArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenScenesArgs {
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory; one sub-directory per scene.
    #[arg(long)]
    pub out: PathBuf,
    /// Views captured per scene.
    #[arg(long, default_value_t = 24)]
    pub views: usize,
    /// Image width and height in pixels (even).
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Horizontal field of view in degrees.
    #[arg(long, default_value_t = 70.0)]
    pub fov: f64,
    #[arg(long, default_value_t = 0.1)]
    pub voxel_size: f64,
}

#[derive(Debug, Args)]
pub struct MakeTripletsArgs {
    /// A manifest, a scene directory or a directory of scenes.
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long, default_value_t = 0.65)]
    pub min_union: f64,
    #[arg(long, default_value_t = 0.70)]
    pub max_union: f64,
    #[arg(long, default_value_t = 0.50)]
    pub max_single: f64,
    #[arg(long, default_value_t = 0.01)]
    pub max_pair: f64,
    /// Output directory for the triplet list and unobserved masks.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..=4))]
    pub phase: u32,
    /// Scenes (phases 1 to 3) or a triplet list (phase 4).
    #[arg(long)]
    pub data: PathBuf,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub ckpt_in: Option<PathBuf>,
    #[arg(long)]
    pub ckpt_out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// B, E, D or R (default: R in phase 4, D otherwise).
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Rays per step in phase 1.
    #[arg(long)]
    pub rays: Option<usize>,
    /// Phase 4 also updates the decoder MLPs.
    #[arg(long)]
    pub unfreeze_renderer: bool,
    /// Training log (default: the checkpoint path with `.log.tsv` appended).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Triplet list file or directory.
    #[arg(long)]
    pub triplet: PathBuf,
    /// Which triplet of the list.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Render this many frames from source 1 through the query to source 2.
    #[arg(long)]
    pub trajectory: Option<usize>,
    #[arg(long, default_value = "R")]
    pub ablation: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predicted color PNG, or a directory of them.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth color PNG, or a directory with the same file names.
    #[arg(long)]
    pub gt: PathBuf,
    /// Unobserved-region mask PNG, or a directory with the same file names.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Depth PNGs for single-file mode; directories use `<name>_depth.png`.
    #[arg(long)]
    pub pred_depth: Option<PathBuf>,
    #[arg(long)]
    pub gt_depth: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::GenScenes(a) => commands::gen_scenes(a),
        Command::MakeTriplets(a) => commands::make_triplets(a),
        Command::Train(a) => commands::train(a),
        Command::Render(a) => commands::render(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
