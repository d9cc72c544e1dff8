//! `shapefuse` command-line front end.
//!
//! Every subcommand reads and writes entries of a model registry directory
//! and leaves a JSON run report under `<registry>/reports/`. Exit status is
//! 0 on success, 1 for user errors (arguments, files, configuration) and 2
//! for numerical failures.

mod commands;
mod registry;
mod report;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] shapefuse::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "shapefuse", version, about = "Fuse overlapping statistical 3D shape models")]
pub struct Cli {
    /// Registry directory holding models, mesh sets and run reports.
    #[arg(long, global = true, default_value = "registry")]
    pub registry: PathBuf,
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// JSON config file with one object per subcommand (e.g. `{"refine": {...}}`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world: heads, faces, templates and ground truth.
    Synth(SynthArgs),
    /// Fit a PCA point-distribution model to meshes in correspondence.
    BuildPdm(BuildPdmArgs),
    /// Non-rigid ICP of a template mesh onto a target mesh.
    Register(RegisterArgs),
    /// Regression-based fusion of a face model into a head model.
    CombineReg(CombineRegArgs),
    /// Gaussian-process covariance blending of a face and a head model.
    CombineGp(CombineGpArgs),
    /// Rebuild a model from GP-regression reconstructions of raw scans.
    Refine(RefineArgs),
    /// Predict a full head from a face with a regression map.
    PredictHead(PredictHeadArgs),
    /// Draw random instances of a model or covariance.
    Sample(SampleArgs),
    /// Compute an evaluation curve as CSV.
    Evaluate(EvaluateArgs),
    /// Re-run the command of a run report and compare output hashes.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_faces: Option<usize>,
    #[arg(long)]
    pub n_vertices: Option<usize>,
    #[arg(long)]
    pub n_face_vertices: Option<usize>,
    /// Prefix of the written entries: `<out>-heads`, `<out>-faces`, `<out>-templates`.
    #[arg(long, default_value = "synth")]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct BuildPdmArgs {
    /// Mesh-set entry or directory of meshes.
    #[arg(long)]
    pub meshes: String,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub template: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    /// Output mesh (.obj or .ply); residuals go next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CombineRegArgs {
    #[arg(long)]
    pub head_model: String,
    #[arg(long)]
    pub face_model: String,
    /// Mesh-set entry or directory of face scans in face-model topology.
    #[arg(long)]
    pub faces: String,
    /// Face region of the head topology: a mesh-set entry with a
    /// `face_mask.json` attachment, or a JSON file with vertex indices.
    #[arg(long)]
    pub face_mask: Option<String>,
    /// Template mesh of the fused model; the head-model mean by default.
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_pairs: Option<usize>,
    #[arg(long)]
    pub ridge: Option<f64>,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long, value_enum)]
    pub crop: Option<settings::CropMode>,
    /// Writes `<out>` (model) and `<out>-map` (regression map).
    #[arg(long)]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct CombineGpArgs {
    #[arg(long)]
    pub head_model: String,
    #[arg(long)]
    pub face_model: String,
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Distance from the face mean under which a template vertex is FACE.
    #[arg(long)]
    pub face_cap: Option<f64>,
    #[arg(long)]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub covariance: String,
    #[arg(long)]
    pub scans: String,
    #[arg(long)]
    pub face_mask: Option<String>,
    /// Covariance components kept for the prior; numerical rank by default.
    #[arg(long)]
    pub truncation: Option<usize>,
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub out: String,
}

#[derive(Debug, Args)]
pub struct PredictHeadArgs {
    #[arg(long)]
    pub head_model: String,
    #[arg(long)]
    pub face_model: String,
    #[arg(long)]
    pub map: String,
    #[arg(long)]
    pub face: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// PDM or covariance entry.
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Compactness,
    Generalization,
    Specificity,
    Ced,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub metric: Metric,
    #[arg(long)]
    pub model: Option<String>,
    /// Held-out shapes (generalization); cohort labels select `--cohort-model`s.
    #[arg(long)]
    pub test: Option<String>,
    /// Sub-model per cohort, as `label=entry` (generalization).
    #[arg(long = "cohort-model")]
    pub cohort_models: Vec<String>,
    /// Real shapes (specificity).
    #[arg(long)]
    pub reference: Option<String>,
    /// Recovered meshes (ced); their inter-ocular distance normalizes errors.
    #[arg(long)]
    pub predictions: Option<String>,
    /// Ground-truth meshes matching `--predictions` (ced).
    #[arg(long)]
    pub ground_truth: Option<String>,
    /// CSV with `error,normalizer` rows (ced), instead of meshes.
    #[arg(long)]
    pub errors: Option<PathBuf>,
    /// Comma-separated component counts.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    #[arg(long)]
    pub max_components: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// CSV output; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub report: PathBuf,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(&cli, &argv[1..]) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
