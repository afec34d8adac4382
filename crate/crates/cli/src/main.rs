mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use colorquant::Error;

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "colorquant", version, about = "Color quantization for machine recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
pub struct Common {
    /// TOML experiment configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `quantizer.weights.lambda=1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (overrides `output`).
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Run seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier on original images.
    TrainClassifier {
        #[command(flatten)]
        common: Common,
        /// Continue from this classifier checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train a ColorCNN or ColorCNN+ quantizer against a frozen classifier.
    TrainQuantizer {
        #[command(flatten)]
        common: Common,
        /// Continue from this quantizer checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Quantize image files with `quantize.method` at `quantize.bits`.
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Classification accuracy of quantized test images.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Rate–accuracy curve: CSV plus SVG and PNG plots.
    Curve {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> colorquant::Result<ExperimentConfig> {
    let mut overrides = common.set.clone();
    if let Some(o) = &common.output {
        overrides.push(format!("output = {}", toml_string(&o.to_string_lossy())));
    }
    if let Some(s) = common.seed {
        overrides.push(format!("seed = {s}"));
    }
    if common.deterministic {
        overrides.push("deterministic = true".into());
    }
    ExperimentConfig::resolve(common.config.as_deref(), &overrides)
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" | "argument" => 3,
        "file" => 4,
        "ingestion" => 5,
        "checkpoint" => 6,
        "numerical" => 7,
        "invariant" => 8,
        _ => 1,
    }
}

fn run(cli: Cli) -> colorquant::Result<()> {
    let (common, action) = match &cli.command {
        Command::TrainClassifier { common, .. }
        | Command::TrainQuantizer { common, .. }
        | Command::Quantize { common, .. }
        | Command::Evaluate { common }
        | Command::Curve { common } => (common, &cli.command),
    };
    let cfg = resolve(common)?;
    if cfg.deterministic {
        // Kernel thread pools read this when first used.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    cfg.write_snapshot(&cfg.output)?;
    log::info!("output directory {}", cfg.output.display());
    match action {
        Command::TrainClassifier { resume, .. } => commands::train_classifier(&cfg, resume.as_deref()),
        Command::TrainQuantizer { resume, .. } => commands::train_quantizer(&cfg, resume.as_deref()),
        Command::Quantize { inputs, .. } => commands::quantize(&cfg, inputs),
        Command::Evaluate { .. } => commands::evaluate(&cfg),
        Command::Curve { .. } => commands::curve(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stdout)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error [{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
