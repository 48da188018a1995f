//! `acom`: train, finetune, code and serve split models with quantized
//! intermediate features.

mod commands;
mod text;

use std::path::PathBuf;
use std::process::ExitCode;

use acom::ErrorClass;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "acom", version, about = "Task-specific feature coding for split inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Classification,
    Sequence,
}

impl From<TaskArg> for acom::model::Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classification => acom::model::Task::Classification,
            TaskArg::Sequence => acom::model::Task::Sequence,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Loopback,
    Tcp,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataSplit {
    Train,
    Test,
}

/// A run configuration file, or the defaults for a task.
#[derive(Args)]
#[group(required = true, multiple = false)]
struct ConfigSource {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the default configuration for this task.
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration for a task.
    Config {
        #[arg(long, value_enum, default_value = "classification")]
        task: TaskArg,
    },
    /// Train the continuous baseline and write a checkpoint.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        /// Checkpoint manifest to write; weights go to `<out>.bin`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Insert the quantizer and finetune; lists sweep every combination.
    Finetune {
        #[command(flatten)]
        source: ConfigSource,
        /// Baseline checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Output directory for checkpoints and codebooks.
        #[arg(long)]
        out: PathBuf,
        /// Split layers M.
        #[arg(long, value_delimiter = ',')]
        split: Vec<usize>,
        /// Codebook counts K.
        #[arg(long, value_delimiter = ',')]
        codebooks: Vec<usize>,
        /// Codebook sizes V.
        #[arg(long, value_delimiter = ',')]
        size: Vec<usize>,
        /// Override the configured number of finetuning steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write the input features of one synthetic sample.
    Sample {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value = "test")]
        from: DataSplit,
        #[arg(long)]
        out: PathBuf,
    },
    /// Quantize input features (or code a token dump) into a bitstream.
    Encode {
        #[arg(long)]
        codebook: PathBuf,
        /// Checkpoint whose device half produces the tokens.
        #[arg(long, required_unless_present = "tokens")]
        model: Option<PathBuf>,
        /// Input features at the model's input rate.
        #[arg(long, conflicts_with = "tokens", required_unless_present = "tokens")]
        input: Option<PathBuf>,
        /// Token dump to code instead of features.
        #[arg(long)]
        tokens: Option<PathBuf>,
        /// Frame rate for a token dump without one in its header.
        #[arg(long)]
        frame_rate: Option<f64>,
        /// Entropy-code the indices.
        #[arg(long)]
        huffman: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a bitstream into dequantized features or tokens.
    Decode {
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Write the token dump instead of features.
        #[arg(long)]
        tokens: bool,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the rate report of a bitstream or token dump.
    Stats {
        input: PathBuf,
        /// Codebook size for a token dump without a header.
        #[arg(long)]
        size: Option<usize>,
        /// Frame rate for a token dump without a header.
        #[arg(long)]
        frame_rate: Option<f64>,
    },
    /// Run device and cloud endpoints for one input.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        /// Input features; required except with --listen.
        #[arg(long, required_unless_present = "listen")]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "loopback")]
        transport: TransportArg,
        /// Run only the cloud endpoint, serving one session on this address.
        #[arg(long, conflicts_with_all = ["connect", "input"])]
        listen: Option<String>,
        /// Run only the device endpoint against a cloud at this address.
        #[arg(long)]
        connect: Option<String>,
        /// Entropy-code frames with tables sent in HELLO.
        #[arg(long)]
        huffman: bool,
        /// Frames per FRAME_BATCH message.
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 5000)]
        timeout_ms: u64,
    },
    /// Print MAC counts for a split point or for every split point.
    Macs {
        /// Checkpoint providing the architecture.
        #[arg(long, conflicts_with_all = ["config", "task"])]
        model: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        /// Split layer; defaults to the model's.
        #[arg(long, conflicts_with = "sweep")]
        split: Option<usize>,
        /// Report every split point 1..L.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        codebooks: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Io => 3,
        ErrorClass::Protocol => 4,
        ErrorClass::Other => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("acom: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
