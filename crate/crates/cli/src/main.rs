mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use labelfield::Error;

/// Label-conditioned radiance fields: data, training, rendering, evaluation.
#[derive(Parser, Debug)]
#[command(name = "labelfield", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Ray-trace the analytic shapes dataset.
    Dataset(DatasetArgs),
    /// Train the auxiliary class/style classifier.
    Pretrain(PretrainArgs),
    /// Train a conditional field (adversarial or reconstruction).
    Train(TrainArgs),
    /// Render images or sweeps from a field checkpoint.
    Render(RenderArgs),
    /// Compare a generated set to a real set.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct DatasetArgs {
    /// Output directory (images/ and manifest.tsv are written here).
    #[arg(long)]
    pub out: PathBuf,
    /// Number of shape classes, 1 to 4.
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Number of colour styles, 1 to 4.
    #[arg(long, default_value_t = 4)]
    pub styles: usize,
    /// Camera poses per (class, style) cell.
    #[arg(long, default_value_t = 50)]
    pub poses_per_cell: usize,
    /// Image width and height in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Camera distance from the orbit centre.
    #[arg(long, default_value_t = 4.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// key=value file with defaults for these flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct PretrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    /// Classifier checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Input resolution of the classifier (images are resized to it).
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    /// Channel widths of the conv blocks, comma separated.
    #[arg(long, default_value = "16,32,64,128", value_delimiter = ',')]
    pub widths: Vec<usize>,
    /// Fraction of each cell held out for the accuracy report.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    /// Per-step loss log (TSV).
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Adversarial,
    Reconstruction,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AblationArg {
    NoLabelInput,
    NoArrayOutput,
    NoClassifier,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for field.ckpt and metrics.tsv.
    #[arg(long)]
    pub out: PathBuf,
    /// Pretrained classifier checkpoint; needed unless both label weights are 0.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "adversarial")]
    pub mode: ModeArg,
    /// Switch one conditioning mechanism off.
    #[arg(long, value_enum)]
    pub ablation: Option<AblationArg>,
    #[arg(long, default_value_t = 10_000)]
    pub iterations: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr_g: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_d: f64,
    /// Weight of the class cross-entropy.
    #[arg(long, default_value_t = 2.0)]
    pub lambda_cls: f64,
    /// Weight of the style cross-entropy.
    #[arg(long, default_value_t = 3.0)]
    pub lambda_sty: f64,
    /// Gradient penalty weight on real patches.
    #[arg(long, default_value_t = 10.0)]
    pub lambda_r1: f64,
    /// Patch side in pixels.
    #[arg(long, default_value_t = 32)]
    pub patch: usize,
    /// Smallest patch footprint as a fraction of the image side.
    #[arg(long, default_value_t = 0.125)]
    pub extent_min: f64,
    #[arg(long, default_value_t = 1.0)]
    pub extent_max: f64,
    /// Coarse samples per ray.
    #[arg(long, default_value_t = 32)]
    pub coarse: usize,
    /// Importance samples per ray (0 disables the second pass).
    #[arg(long, default_value_t = 32)]
    pub fine: usize,
    /// Hidden width of the density trunk.
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    /// Number of trunk layers.
    #[arg(long, default_value_t = 4)]
    pub depth: usize,
    /// Hidden width of the colour branch.
    #[arg(long, default_value_t = 64)]
    pub color_width: usize,
    #[arg(long, default_value_t = 128)]
    pub shape_dim: usize,
    #[arg(long, default_value_t = 128)]
    pub appearance_dim: usize,
    /// Discriminator conv widths, comma separated.
    #[arg(long, default_value = "64,128,256,512", value_delimiter = ',')]
    pub d_widths: Vec<usize>,
    /// Keep fitting the classifier on real images while training.
    #[arg(long)]
    pub train_classifier: bool,
    /// Also write field.ckpt every this many iterations (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SweepArg {
    /// One image at the given pose.
    Single,
    /// Random latents, poses and labels (for evaluation sets).
    Samples,
    YawTurntable,
    PitchSweep,
    /// Camera radius values.
    Depth,
    /// Horizontal shift values.
    Shift,
    /// Blend the colour of style --from into style --to.
    ColorInterp,
    /// Blend the shape of class --from into class --to.
    DensityInterp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LatentArg {
    /// The fixed latent stored with the field.
    Anchor,
    /// A standard normal draw from --seed.
    Sample,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct RenderArgs {
    /// Field checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory for the PPM frames and manifest.tsv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "single")]
    pub sweep: SweepArg,
    #[arg(long, default_value_t = 0)]
    pub class: usize,
    #[arg(long, default_value_t = 0)]
    pub style: usize,
    /// Sweep values (radii, shifts, yaw or pitch degrees).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub values: Vec<f64>,
    /// Interpolation source label.
    #[arg(long)]
    pub from: Option<usize>,
    /// Interpolation target label.
    #[arg(long)]
    pub to: Option<usize>,
    /// Blend coefficients in [0, 1].
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    /// Frame count for the turntable and for random samples.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Output side in pixels (default: training image size).
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 30.0)]
    pub yaw: f64,
    #[arg(long, default_value_t = 30.0)]
    pub pitch: f64,
    /// Camera radius (default: training radius).
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub shift: f64,
    /// Which latent to render (default: anchor for reconstruction runs).
    #[arg(long, value_enum)]
    pub latent: Option<LatentArg>,
    /// Coarse samples per ray (default: as trained).
    #[arg(long)]
    pub coarse: Option<usize>,
    /// Importance samples per ray (default: as trained).
    #[arg(long)]
    pub fine: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// Real dataset directory or manifest.
    #[arg(long)]
    pub real: PathBuf,
    /// Generated set directory or manifest.
    #[arg(long)]
    pub generated: PathBuf,
    /// Classifier checkpoint providing features and label predictions.
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Pair images by order and report PSNR and SSIM.
    #[arg(long)]
    pub paired: bool,
    /// Also write the report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Contract(_) => 2,
        Error::Numeric { .. } => 4,
        Error::Parse { .. } | Error::Format(_) | Error::Io { .. } => 3,
    }
}

fn main() -> ExitCode {
    let args: Vec<_> = std::env::args_os().collect();
    let args = match config::expand(args, &Cli::command()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Dataset(a) => commands::dataset(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Train(a) => commands::train(&a),
        Command::Render(a) => commands::render(&a),
        Command::Eval(a) => commands::eval(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
