//! `tfseg`: batch driver for the segmentation pipeline.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical error.

mod annotations;
mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Parser, Debug)]
#[command(name = "tfseg", version, about = "Annotation-driven volume segmentation and iso-surface rendering")]
pub struct Cli {
    /// Worker threads for the data-parallel kernels (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub cmd: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic volume with its ground-truth labels.
    Synth(SynthArgs),
    /// Run the toy feature extractor: three axis stacks plus plan.json.
    ExtractToy(ExtractArgs),
    /// Pool and average the three axis stacks into a feature volume.
    Merge(MergeArgs),
    /// Similarity map per annotated class.
    Sim(SimArgs),
    /// Refine a similarity map against the volume with the bilateral solver.
    Refine(RefineArgs),
    /// Render iso-surfaces or a slice overlay to PNG.
    Render(RenderArgs),
    /// Argmax labeling of the class similarity maps.
    Label(LabelArgs),
    /// Score a labeling against ground truth.
    Eval(EvalArgs),
    /// Run the HTTP/WebSocket session service.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Sphere,
    Torus,
    Phantom,
    Edge,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    pub kind: SynthKind,
    /// Edge length, or `X,Y,Z`.
    #[arg(long, default_value = "64")]
    pub dim: String,
    /// Output volume sidecar (`.json`, payload next to it as `.raw`).
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth labels; defaults to `<out>_labels.json`. Not written for `edge`.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Shape center `x,y,z` in voxels (default: volume center).
    #[arg(long)]
    pub center: Option<String>,
    /// Sphere radius in voxels (default: 0.3 of the shortest edge).
    #[arg(long)]
    pub radius: Option<f32>,
    /// Torus ring radius (default: 0.27 of the shortest edge).
    #[arg(long)]
    pub major: Option<f32>,
    /// Torus tube radius (default: 0.1 of the shortest edge).
    #[arg(long)]
    pub minor: Option<f32>,
    /// Torus or edge axis.
    #[arg(long, default_value = "z")]
    pub axis: String,
    #[arg(long, default_value_t = 0.8)]
    pub inside: f32,
    #[arg(long, default_value_t = 0.2)]
    pub outside: f32,
    /// Intensity blend width across surfaces, voxels.
    #[arg(long, default_value_t = 0.0)]
    pub smooth: f32,
    /// Phantom spec JSON (default: built-in three-class phantom).
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Edge position along the axis (default: middle).
    #[arg(long)]
    pub position: Option<f32>,
    #[arg(long, default_value_t = 0.2)]
    pub lo: f32,
    #[arg(long, default_value_t = 0.8)]
    pub hi: f32,
    /// Gaussian noise sigma for `edge`.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ExtractArgs {
    #[arg(long)]
    pub volume: PathBuf,
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Stack file prefix (default: volume file stem).
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = tfseg::featpipe::DEFAULT_RESIZE)]
    pub resize: usize,
    #[arg(long, default_value_t = tfseg::featpipe::DEFAULT_PATCH)]
    pub patch: usize,
    #[arg(long, default_value = "f32")]
    pub dtype: String,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    /// Directory holding `<name>.{x,y,z}.fstk` and `plan.json`.
    #[arg(long)]
    pub dir: PathBuf,
    /// Stack prefix; may be omitted when the directory holds one set.
    #[arg(long)]
    pub name: Option<String>,
    /// Target dims `X,Y,Z` (default: from plan.json).
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "f32")]
    pub dtype: String,
}

#[derive(Args, Debug)]
pub struct SimArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// `{"classes":[{"id":1,"name":..,"iso":0.5,"proximity":0.0,"points":[[x,y,z],..]}]}`
    #[arg(long)]
    pub annotations: PathBuf,
    /// Output directory for `class_<id>.svol`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    /// Low resolution map (`.svol`).
    #[arg(long)]
    pub sim: PathBuf,
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub class_id: u32,
    /// Solver settings JSON; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub sigma_spatial: Option<f32>,
    #[arg(long)]
    pub sigma_luma: Option<f32>,
    #[arg(long)]
    pub tau: Option<f32>,
    #[arg(long)]
    pub resolution: Option<usize>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub volume: PathBuf,
    /// Class definitions (annotation file format).
    #[arg(long)]
    pub annotations: PathBuf,
    /// Directory with `class_<id>.svol`; `class_<id>_refined.svol` wins when present.
    #[arg(long)]
    pub sims: PathBuf,
    /// Camera JSON `{eye, look_at, up, fov, width, height}` (default: overview).
    #[arg(long)]
    pub cam: Option<PathBuf>,
    /// Render settings JSON.
    #[arg(long)]
    pub settings: Option<PathBuf>,
    /// Slice overlay `axis:index` instead of a 3D frame.
    #[arg(long)]
    pub slice: Option<String>,
    #[arg(long, default_value_t = 512)]
    pub width: u32,
    #[arg(long, default_value_t = 512)]
    pub height: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct LabelArgs {
    /// Reference volume; labels are produced at its dims.
    #[arg(long)]
    pub volume: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub sims: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Markdown,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub include_background: bool,
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Mean annotations per class, recorded in the report.
    #[arg(long)]
    pub annotations_per_class: Option<f64>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Directory of `<id>.json` volumes, each with an optional `<id>.fvol`.
    #[arg(long)]
    pub volumes: PathBuf,
    /// Where saved sessions go.
    #[arg(long, default_value = "tfseg-data")]
    pub data_dir: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tfseg: {e}");
            if let CliError::Usage(_) = e {
                eprintln!("see `tfseg --help`");
            }
            ExitCode::from(e.code())
        }
    }
}
