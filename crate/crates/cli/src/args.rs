use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;

#[derive(Parser, Debug, Clone)]
#[command(
    name = "dforge",
    version,
    about = "Dataset curation, trajectory planning, fusion and sampler simulation"
)]
pub struct Cli {
    /// TOML pipeline configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `rng_seed` from the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving every output file and the run manifest.
    #[arg(long, global = true, default_value = "dforge-out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Text,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Principal frame and capture class of every scene in a pose manifest.
    Analyze {
        /// JSON-lines scene manifest, or a COLMAP text model directory.
        manifest: PathBuf,
    },
    /// Applies the scene filter rules and ranks the scenes.
    Filter { manifest: PathBuf },
    /// Synthesizes a camera trajectory from motion primitives.
    Plan(PlanArgs),
    /// Picks the director primitive explaining the motion between two frames.
    Director(DirectorArgs),
    /// Fuses posed depth frames into a TSDF volume, mesh and occupancy grid.
    Fuse {
        /// Directory of `.png` (millimeter) or `.f32` (meter) depth images,
        /// each with a `.json` pose sidecar.
        depth_dir: PathBuf,
    },
    /// Flow statistics per frame and the object-motion verdict for a clip.
    Flowstats {
        /// `.flo` or raw `.f32` flow files, or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Chooses the reference frame from flow fields and dynamic masks.
    Pickref {
        /// Directory of flow files, each with a `<stem>.mask.png` mask.
        dir: PathBuf,
    },
    /// Runs the sampler against an analytic mock denoiser.
    Simulate(SimulateArgs),
    /// Evaluates the reconstruction losses on an image pair.
    Loss(LossArgs),
    /// Writes synthetic fixtures.
    Synth {
        #[arg(value_enum)]
        kind: SynthKind,
    },
    /// Prints the resolved configuration as TOML.
    Config,
    /// Re-runs the command recorded in a run manifest and compares outputs.
    Replay { manifest: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Analyze { .. } => "analyze",
            Command::Filter { .. } => "filter",
            Command::Plan(_) => "plan",
            Command::Director(_) => "director",
            Command::Fuse { .. } => "fuse",
            Command::Flowstats { .. } => "flowstats",
            Command::Pickref { .. } => "pickref",
            Command::Simulate(_) => "simulate",
            Command::Loss(_) => "loss",
            Command::Synth { .. } => "synth",
            Command::Config => "config",
            Command::Replay { .. } => "replay",
        }
    }
}

pub fn parse_vec3(s: &str) -> Result<Vector3<f64>, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [x, y, z] => Ok(Vector3::new(*x, *y, *z)),
        _ => Err(format!("expected x,y,z, got `{s}`")),
    }
}

pub fn parse_shape(s: &str) -> Result<[usize; 4], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [f, c, h, w] if parts.iter().all(|&d| d > 0) => Ok([*f, *c, *h, *w]),
        _ => Err(format!("expected four positive sizes F,C,H,W, got `{s}`")),
    }
}

#[derive(Args, Debug, Clone)]
pub struct PlanArgs {
    /// Primitive list such as `trans_x_pos:1.0,yaw_pos:0.5` or
    /// `orbit:6.283,frames=49,radius=2`.
    #[arg(required_unless_present = "from")]
    pub spec: Option<String>,
    /// Rebuild from the recipe stored in an existing trajectory file.
    #[arg(long, conflicts_with = "spec")]
    pub from: Option<PathBuf>,
    /// Start camera position; defaults to the orbit start or (0,-2,0).
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub start: Option<Vector3<f64>>,
    /// Point the start camera looks at (world +z up).
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub look_at: Option<Vector3<f64>>,
    /// Orbit center.
    #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
    pub center: Option<Vector3<f64>>,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Resample the result to this many poses, uniform in arc length.
    #[arg(long)]
    pub resample: Option<usize>,
    /// Occupancy grid to check the path against.
    #[arg(long)]
    pub occupancy: Option<PathBuf>,
    /// Required clearance; defaults to `fusion.clearance_margin`.
    #[arg(long)]
    pub margin: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct DirectorArgs {
    /// Trajectory file.
    pub trajectory: PathBuf,
    /// Index of the first frame.
    #[arg(long, default_value_t = 0)]
    pub from_frame: usize,
    /// Index of the second frame; the last frame when omitted.
    #[arg(long)]
    pub to_frame: Option<usize>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MockKind {
    /// Knows the clean latent exactly.
    Oracle,
    /// The Gaussian mock plus a per-director offset.
    Sensitive,
    /// Posterior mean of an independent Gaussian data model.
    Gaussian,
}

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = MockKind::Oracle)]
    pub denoiser: MockKind,
    /// Latent shape `F,C,H,W`.
    #[arg(long, value_parser = parse_shape, default_value = "4,4,8,8")]
    pub shape: [usize; 4],
    /// Overrides `sampler.switch_step`.
    #[arg(long)]
    pub switch: Option<usize>,
    /// Overrides `sampler.inference_steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Clean latent file to use instead of the seeded fixture.
    #[arg(long)]
    pub z0: Option<PathBuf>,
    /// Also sample a second view that shares the first view's trajectory.
    #[arg(long)]
    pub blend: bool,
    /// Also run appearance refinement on the sample.
    #[arg(long)]
    pub refine: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// L1, SSIM and perceptual terms weighted by a confidence map.
    Confidence,
    /// L1, TV and SSIM without confidence.
    Dynamic,
}

#[derive(Args, Debug, Clone)]
pub struct LossArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Grayscale PNG or raw `.f32` confidence; uniform 1 when omitted.
    #[arg(long)]
    pub conf: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LossMode::Confidence)]
    pub mode: LossMode,
    /// Fixed perceptual score standing in for a learned metric.
    #[arg(long)]
    pub perceptual: Option<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// 24 depth views of a sphere of radius 0.5 at the origin.
    Sphere,
    /// Surround, arc and linear scenes as a JSON-lines manifest.
    Manifest,
    /// A moving-object clip and a camera-pan clip of flow fields and masks.
    Flow,
    /// A predicted/ground-truth image pair and a confidence map.
    Images,
    All,
}
