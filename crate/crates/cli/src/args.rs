use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pim_core::features::FeatureSelection;
use pim_core::qpsolver::{Rounding, SolverConfig};

#[derive(Debug, Parser)]
#[command(name = "pim", version, about = "Perceptual importance maps for region-of-interest video encoding")]
pub struct Cli {
    /// TOML file supplying defaults for any flag; the command line wins.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-frame work (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn importance maps into a bitrate-neutral ΔQP sidecar.
    SolveQp(SolveQpArgs),
    /// Compute per-frame feature stacks for a video.
    Features(FeaturesArgs),
    /// Per-macroblock PSNR, SSIM and VIF between two videos.
    Metrics(MetricsArgs),
    /// Train the importance model on feature stacks and target maps.
    Train(TrainArgs),
    /// Predict importance maps and a ΔQP sidecar for a video.
    Predict(PredictArgs),
    /// Simulate (or run) an encode with a ΔQP sidecar.
    MockEncode(MockEncodeArgs),
    /// Summarise pairwise preference tallies.
    Analyze(AnalyzeArgs),
    /// Run the annotation HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoundingArg {
    Nearest,
    Carry,
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// ΔQP distance between importance 0 and 255.
    #[arg(long, default_value_t = 20.0)]
    pub span: f64,
    /// Symmetric ΔQP limit.
    #[arg(long, default_value_t = 10.0)]
    pub clamp: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long, value_enum, default_value_t = RoundingArg::Nearest)]
    pub rounding: RoundingArg,
}

impl SolverArgs {
    pub fn config(&self) -> SolverConfig {
        SolverConfig {
            span: self.span,
            clamp: self.clamp,
            tolerance: self.tolerance,
            rounding: match self.rounding {
                RoundingArg::Nearest => Rounding::Nearest,
                RoundingArg::Carry => Rounding::CarryRate,
            },
            ..SolverConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct SolveQpArgs {
    /// One 8-bit PGM importance map per frame.
    #[arg(required = true)]
    pub maps: Vec<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Video whose macroblock grid the maps cover (default: map size).
    #[arg(long)]
    pub video: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Family {
    All,
    Frame,
    Saliency,
    Segmentation,
    Flow,
    QualityMetrics,
    Highpass,
    Embeddings,
}

pub fn selection(families: &[Family]) -> FeatureSelection {
    let mut sel = FeatureSelection::NONE;
    for f in families {
        match f {
            Family::All => sel = FeatureSelection::ALL,
            Family::Frame => sel.frame = true,
            Family::Saliency => sel.saliency = true,
            Family::Segmentation => sel.segmentation = true,
            Family::Flow => sel.flow = true,
            Family::QualityMetrics => sel.quality_metrics = true,
            Family::Highpass => sel.highpass = true,
            Family::Embeddings => sel.embeddings = true,
        }
    }
    sel
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub video: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Feature families to stack.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "all")]
    pub families: Vec<Family>,
    /// Distorted encode of the video, for the quality metric family.
    #[arg(long, conflicts_with = "metrics_dir")]
    pub distorted: Option<PathBuf>,
    /// Output of `pim metrics`, instead of --distorted.
    #[arg(long)]
    pub metrics_dir: Option<PathBuf>,
    /// Holds `saliency_NNNNN.ft01`, `segmentation_NNNNN.ft01` and
    /// `embeddings_NNNNN.ft01` tensors.
    #[arg(long)]
    pub external_dir: Option<PathBuf>,
    #[arg(long, default_value_t = pim_core::features::DEFAULT_EMBEDDING_CHANNELS)]
    pub embedding_channels: usize,
    #[arg(long, default_value_t = pim_core::features::DEFAULT_FLOW_RADIUS)]
    pub flow_radius: usize,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub distorted: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output directories of `pim features`; repeat for several videos.
    #[arg(long, required = true)]
    pub features_dir: Vec<PathBuf>,
    /// Target maps `frame_NNNNN.pgm`, one directory per --features-dir.
    #[arg(long, required = true)]
    pub targets_dir: Vec<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 70)]
    pub epochs: usize,
    #[arg(long, default_value_t = 499)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.2)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Low,mid,high loss weights (default: inverse class frequency).
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub class_weights: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub weights: PathBuf,
    #[arg(long)]
    pub video: PathBuf,
    #[arg(long)]
    pub features_dir: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct MockEncodeArgs {
    #[arg(long)]
    pub video: PathBuf,
    #[arg(long)]
    pub dqp: PathBuf,
    #[arg(long, default_value_t = 1000.0)]
    pub bitrate: f64,
    #[arg(long, default_value_t = 30)]
    pub qp_base: i32,
    /// Flat-encode bits per macroblock (default: from --bitrate).
    #[arg(long)]
    pub base_bits: Option<f64>,
    /// Run a real encoder instead, e.g. `enc -i {input} --qpfile {dqp} -o {output} -b {bitrate}`.
    #[arg(long)]
    pub encoder_template: Option<String>,
    #[arg(long, default_value = "pim-encode")]
    pub work_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Wald,
    Wilson,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Lines of `video_id prefer_a prefer_b`.
    pub tallies: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Wald)]
    pub method: MethodArg,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub videos: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value_t = 1000.0)]
    pub bitrate: f64,
    #[arg(long, default_value_t = 30)]
    pub qp_base: i32,
    #[arg(long)]
    pub encoder_template: Option<String>,
    /// Fixed seed for the A/B shuffle.
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    #[command(flatten)]
    pub solver: SolverArgs,
}
