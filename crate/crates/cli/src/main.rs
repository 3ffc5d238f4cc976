//! `saic` command-line tool.

mod commands;
mod context;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "saic", version, about = "Semantic-assisted learned image compression")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Experiment config file (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Overrides `data_root` (otherwise the config or SAIC_DATA_ROOT).
    #[arg(long, global = true)]
    pub data_root: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides any config key, e.g. `--set pretrain_steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// More log output (repeat for trace).
    #[arg(short, long, action = ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the synthetic 10-class shape dataset as PNG folders.
    MakeDataset {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
    /// Trains the downstream classifier.
    TrainTask,
    /// Pre-trains the codec with the pixel loss.
    TrainCodec,
    /// Fine-tunes the pre-trained codec with a feature-level loss.
    Finetune {
        /// apic or saic (defaults to the config's `loss`).
        #[arg(long)]
        loss: Option<String>,
        /// SAIC with W' = 1 for every channel.
        #[arg(long)]
        uniform_weights: bool,
        /// Semantic weights file to use instead of the cached one.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Computes and caches semantic channel weights.
    Weights {
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Encodes images into `.saic` bitstreams.
    Compress {
        /// Image files or directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Codec checkpoint (defaults to the run's fine-tuned or pre-trained codec).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory (defaults to `<output_dir>/bitstreams`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resize and center-crop images of the wrong size instead of failing.
        #[arg(long)]
        resize: bool,
    },
    /// Decodes `.saic` bitstreams into PNG images.
    Decompress {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory (defaults to `<output_dir>/reconstructions`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pixel, task and semantic metrics on the test split.
    Evaluate {
        #[arg(long, value_delimiter = ',', default_value = "original,tdic,apic,saic")]
        methods: Vec<String>,
        /// Skip the CLUB estimate.
        #[arg(long)]
        no_si: bool,
    },
    /// Semantic information between original and compressed perceptual results.
    Si {
        #[arg(long, default_value = "saic")]
        method: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// τ sweep (`--tau`) or rate sweep over run directories (`--runs`).
    Sweep {
        #[arg(long, value_delimiter = ',')]
        tau: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        runs: Vec<PathBuf>,
        #[arg(long)]
        no_si: bool,
    },
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
    let level = match cli.common.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let name = command_name(&cli.command);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: saic {name}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::MakeDataset { .. } => "make-dataset",
        Command::TrainTask => "train-task",
        Command::TrainCodec => "train-codec",
        Command::Finetune { .. } => "finetune",
        Command::Weights { .. } => "weights",
        Command::Compress { .. } => "compress",
        Command::Decompress { .. } => "decompress",
        Command::Evaluate { .. } => "evaluate",
        Command::Si { .. } => "si",
        Command::Sweep { .. } => "sweep",
    }
}

fn run(cli: Cli) -> saic::Result<()> {
    use commands as c;
    if let Command::MakeDataset {
        root,
        per_class,
        size,
        channels,
        data_seed,
    } = &cli.command
    {
        return c::make_dataset(root, *per_class, *size, *channels, *data_seed);
    }
    let ctx = context::Context::open(&cli.common)?;
    match cli.command {
        Command::MakeDataset { .. } => unreachable!(),
        Command::TrainTask => c::train_task(&ctx),
        Command::TrainCodec => c::train_codec(&ctx),
        Command::Finetune {
            loss,
            uniform_weights,
            weights,
            tau,
        } => c::finetune(&ctx, loss.as_deref(), uniform_weights, weights.as_deref(), tau),
        Command::Weights { tau, top_k } => c::weights(&ctx, tau, top_k),
        Command::Compress {
            inputs,
            checkpoint,
            out,
            resize,
        } => c::compress(&ctx, &inputs, checkpoint.as_deref(), out.as_deref(), resize),
        Command::Decompress {
            inputs,
            checkpoint,
            out,
        } => c::decompress(&ctx, &inputs, checkpoint.as_deref(), out.as_deref()),
        Command::Evaluate { methods, no_si } => c::evaluate(&ctx, &methods, !no_si),
        Command::Si { method, checkpoint } => c::si(&ctx, &method, checkpoint.as_deref()),
        Command::Sweep { tau, runs, no_si } => c::sweep(&ctx, &tau, &runs, !no_si),
    }
}
