mod commands;
mod manifest;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use flamegs::memory::TrackingAllocator;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser, Debug)]
#[command(name = "flamegs", version, about = "Flame reconstruction with 3D Gaussian splatting")]
pub struct Cli {
    /// Worker threads (defaults to the available parallelism).
    #[arg(long, global = true, env = "FLAMEGS_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    Phantom(PhantomArgs),
    /// Carve the visual hull and write the seed Gaussians.
    Init(InitCmd),
    /// Train Gaussians (and pose deltas) on a dataset.
    Train(TrainCmd),
    /// Run the ART voxel baseline.
    Art(ArtCmd),
    /// Leave-one-camera-out evaluation of either method.
    Eval(EvalCmd),
    /// Sample a Gaussian snapshot onto a voxel grid.
    ExportVolume(ExportCmd),
    /// Repeat a previous command from its manifest.
    Rerun { manifest: PathBuf },
}

#[derive(Args, Debug, Clone)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(3..))]
    pub cameras: u32,
    #[arg(long, default_value_t = 1.0)]
    pub radius: f64,
    /// Image size as WIDTHxHEIGHT.
    #[arg(long, default_value = "200x256", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 250.0)]
    pub focal: f64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
    pub components: u32,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct InitArgs {
    #[arg(long, default_value_t = 0.05)]
    pub tau: f64,
    /// Views that must agree on a voxel (default: all training views).
    #[arg(long)]
    pub agreement: Option<usize>,
    #[arg(long, default_value_t = 50)]
    pub grid: usize,
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    /// Grid bounds as minx,miny,minz,maxx,maxy,maxz.
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: Option<[f64; 6]>,
    #[arg(long, default_value_t = 0, value_parser = clap::value_parser!(u32).range(0..=2))]
    pub sh_degree: u32,
}

#[derive(Args, Debug, Clone)]
pub struct InitCmd {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub init: InitArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Camera id excluded from carving.
    #[arg(long)]
    pub holdout: Option<String>,
    /// Also write the per-voxel hit counts (FLOC).
    #[arg(long)]
    pub dump_occupancy: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 10_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 0.2)]
    pub lambda: f64,
    #[arg(long, default_value_t = 500)]
    pub pose_opt_start: usize,
    #[arg(long, default_value_t = 500)]
    pub densify_start: usize,
    #[arg(long, default_value_t = 3000)]
    pub densify_end: usize,
    #[arg(long, default_value_t = 100)]
    pub densify_interval: usize,
    #[arg(long, default_value_t = 0.05)]
    pub prune_opacity: f64,
    #[arg(long, default_value_t = 2e-4)]
    pub densify_grad_threshold: f64,
    #[arg(long, default_value_t = 1.6e-4)]
    pub lr_position: f64,
    #[arg(long, default_value_t = 5e-3)]
    pub lr_scale: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr_rotation: f64,
    #[arg(long, default_value_t = 5e-2)]
    pub lr_opacity: f64,
    #[arg(long, default_value_t = 2.5e-3)]
    pub lr_sh: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_pose: f64,
}

#[derive(Args, Debug, Clone)]
pub struct TrainCmd {
    #[arg(long)]
    pub data: PathBuf,
    /// Starting snapshot; carved from the data when omitted.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[command(flatten)]
    pub init_args: InitArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub holdout: Option<String>,
    #[arg(long, default_value_t = 1000)]
    pub checkpoint_interval: usize,
    /// Parent directory for timestamped run directories.
    #[arg(long, default_value = "runs")]
    pub runs_root: PathBuf,
    /// Exact run directory (overrides --runs-root).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct ArtArgs {
    #[arg(long, default_value_t = 120)]
    pub voxels: usize,
    #[arg(long, default_value_t = 0.01)]
    pub relaxation: f64,
    #[arg(long, default_value_t = 50)]
    pub art_iters: usize,
    #[arg(long, default_value_t = 1)]
    pub pixel_stride: usize,
    /// Keep the whole weight matrix in memory instead of re-tracing rays
    /// on every sweep.
    #[arg(long)]
    pub materialize: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ArtCmd {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub art: ArtArgs,
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: Option<[f64; 6]>,
    #[arg(long)]
    pub holdout: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodName {
    Flamegs,
    Art,
}

#[derive(Args, Debug, Clone)]
pub struct EvalCmd {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub method: MethodName,
    #[command(flatten)]
    pub init_args: InitArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub art: ArtArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report JSON; the text table goes next to it with a .txt extension.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ExportCmd {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 120)]
    pub voxels: usize,
    #[arg(long, value_parser = parse_bbox)]
    pub bbox: Option<[f64; 6]>,
    /// Dataset whose rig defines the default bounds.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or("expected WIDTHxHEIGHT")?;
    let w: usize = w.parse().map_err(|_| format!("bad width {w}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height {h}"))?;
    if w == 0 || h == 0 {
        return Err("image size must be positive".into());
    }
    Ok((w, h))
}

fn parse_bbox(s: &str) -> Result<[f64; 6], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad number {p}")))
        .collect::<Result<_, _>>()?;
    let b: [f64; 6] = v.try_into().map_err(|_| "expected six comma-separated numbers".to_string())?;
    if (0..3).any(|a| b[a] >= b[a + 3]) {
        return Err("bbox min must be below max".into());
    }
    Ok(b)
}

fn run(argv: Vec<String>) -> Result<()> {
    let cli = Cli::try_parse_from(&argv).unwrap_or_else(|e| e.exit());
    if let Command::Rerun { manifest } = &cli.command {
        let m = manifest::read_manifest(manifest)?;
        if m.tool != "flamegs" {
            bail!("{} is not a flamegs manifest", manifest.display());
        }
        return run(m.argv);
    }
    let threads = match cli.threads {
        Some(0) => bail!("--threads must be at least 1"),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .context("configuring the thread pool")?;
    commands::dispatch(cli.command, argv, threads)
}

fn main() {
    if let Err(e) = run(std::env::args().collect()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
