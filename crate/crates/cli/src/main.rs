mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use melvoc::Error;

#[derive(Debug, Parser)]
#[command(name = "melvoc", version, about = "Streaming Mel-spectrogram vocoder")]
struct Cli {
    /// Engine config file (TOML). Defaults to $MELVOC_CONFIG_DIR/melvoc.toml
    /// when that exists, else built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a default config, a network spec and optionally random weights.
    Init(InitArgs),
    /// Compute a Mel spectrogram file from a WAV file.
    Mel(MelArgs),
    /// Offline vocoding: whole-utterance flow sampling, then synthesis.
    Vocode(VocodeArgs),
    /// Frame-by-frame streaming vocoding with per-frame timing.
    Stream(StreamArgs),
    /// Pseudoinverse magnitudes plus RTISI-DM phase retrieval.
    Baseline(BaselineArgs),
    /// Check streaming against offline inference and causality.
    Verify(VerifyArgs),
    /// Compare two WAV files (SI-SDR, LSD, MCD) and print JSON.
    Metrics(MetricsArgs),
    /// Time streaming inference for several step counts.
    Bench(BenchArgs),
    /// Print the latency figures of the configured STFT.
    Latency,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct InputArgs {
    /// Mel spectrogram file (MFSPEC1).
    #[arg(long)]
    mel: Option<PathBuf>,
    /// WAV file; its Mel spectrogram is computed first (copy synthesis).
    #[arg(long)]
    wav: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Network spec (TOML). Defaults to the built-in U-Net.
    #[arg(long)]
    net_spec: Option<PathBuf>,
    /// Weight bundle (MFWB1).
    #[arg(long, conflicts_with = "random_weights")]
    weights: Option<PathBuf>,
    /// Use random weights drawn from this seed instead of a bundle.
    #[arg(long, value_name = "SEED")]
    random_weights: Option<u64>,
}

#[derive(Debug, Args)]
struct FlowArgs {
    /// Number of Euler steps N.
    #[arg(long)]
    steps: Option<usize>,
    /// Noise scale of the starting point.
    #[arg(long, allow_hyphen_values = true)]
    sigma_y: Option<f32>,
    /// Noise seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct InitArgs {
    /// Output directory.
    #[arg(long, default_value = ".")]
    dir: PathBuf,
    /// Level widths of the generated U-Net, comma separated.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    /// Also write random weights from this seed.
    #[arg(long, value_name = "SEED")]
    random_weights: Option<u64>,
}

#[derive(Debug, Args)]
struct MelArgs {
    #[arg(long)]
    wav: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VocodeArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    flow: FlowArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct StreamArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    flow: FlowArgs,
    #[arg(long)]
    out: PathBuf,
    /// Pace frames at the hop rate and count deadline misses.
    #[arg(long)]
    realtime: bool,
    /// Write one line per frame: index, per-call ms, total ms.
    #[arg(long)]
    timing_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<f32>,
    /// DM iterations per frame; 0 gives the zero-phase baseline.
    #[arg(long)]
    iters: Option<usize>,
    /// Swap the roles of the two projections.
    #[arg(long)]
    swapped: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    net_spec: Option<PathBuf>,
    /// Check this bundle instead of random weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    frames: usize,
    /// Step counts for the full-pipeline check, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    steps: Vec<usize>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long = "est")]
    estimate: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    steps: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    frames: usize,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Usage(_) | Error::Config(_) | Error::Spec(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(commands::Outcome::Done) => ExitCode::SUCCESS,
        Ok(commands::Outcome::VerificationFailed) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
