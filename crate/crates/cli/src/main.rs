mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use soundgan::audio::FeatureKind;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "soundgan", version, about = "Sound-conditioned image generation with a conditional GAN")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired audio-image dataset and probe sounds.
    SynthData(SynthDataArgs),
    /// Drop pairs whose sound and image labels disagree.
    Clean(CleanArgs),
    /// Write one condition vector per example as `<id>.sne`.
    ExtractFeatures(ExtractArgs),
    /// Train a generator/discriminator pair.
    Train(TrainArgs),
    /// Generate one image per manifest example from a checkpoint.
    Generate(GenerateArgs),
    /// Inception score and conditional accuracy under a frozen classifier.
    Evaluate(EvaluateArgs),
    /// Generate from the same sounds at scaled loudness with fixed noise.
    VolumeProbe(ProbeArgs),
    /// Train the evaluation classifier on real images.
    TrainClf(TrainClfArgs),
}

#[derive(Args)]
pub struct SynthDataArgs {
    /// TOML dataset recipe; defaults to the nine-class recipe.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Use the two-class recipe with this many examples per class.
    #[arg(long, conflicts_with = "spec")]
    pub two_class: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mid-loudness sounds written to `<out>/probe/` for the volume probe.
    #[arg(long, default_value_t = 24)]
    pub probe_sounds: usize,
}

#[derive(Args)]
pub struct CleanArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Where the cleaned manifest is written.
    #[arg(long)]
    pub out: PathBuf,
    /// `id<TAB>class` predictions overriding the sound labels.
    #[arg(long)]
    pub sound_labels: Option<PathBuf>,
    /// `id<TAB>class` predictions overriding the image labels.
    #[arg(long)]
    pub image_labels: Option<PathBuf>,
}

#[derive(Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "fbank", value_parser = parse_kind)]
    pub kind: FeatureKind,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_kind(s: &str) -> Result<FeatureKind, String> {
    s.parse().map_err(|e: soundgan::audio::AudioError| e.to_string())
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub conditions: Option<PathBuf>,
    /// One of table5-b ... table5-g; replaces the loss flags of the config.
    #[arg(long)]
    pub loss_preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many iterations.
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
    /// Evaluation classifier; scores the final generator on the test split.
    #[arg(long)]
    pub clf: Option<PathBuf>,
    /// Print the merged config with every key and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long, required_unless_present = "real")]
    pub ckpt: Option<PathBuf>,
    /// Score the real images of the split instead of generated ones.
    #[arg(long, conflicts_with = "ckpt")]
    pub real: bool,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub clf: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write `report.txt` under `<out>/<run-id>/`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// WAV files or directories of them.
    #[arg(long, required = true, num_args = 1..)]
    pub audio: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "0.5,1,2,3")]
    pub factors: Vec<f64>,
    /// Background colour the object area is measured against.
    #[arg(long, value_delimiter = ',', default_value = "-1,-1,-1", allow_hyphen_values = true)]
    pub background: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct TrainClfArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
}

/// Exit status 1 for usage and configuration errors, 2 for failures while
/// doing the work.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<soundgan::Error> for Failure {
    fn from(e: soundgan::Error) -> Self {
        match e {
            soundgan::Error::Config(m) => Self::Usage(m),
            other => Self::Runtime(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::SynthData(a) => commands::synth_data(a),
        Command::Clean(a) => commands::clean(a),
        Command::ExtractFeatures(a) => commands::extract_features(a),
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::VolumeProbe(a) => commands::volume_probe(a),
        Command::TrainClf(a) => commands::train_clf(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
