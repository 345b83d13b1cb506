use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dimo_core::harness::{self, ExperimentConfig, MaskSpec, Mode};
use dimo_core::DimoError;

#[derive(Parser)]
#[command(name = "dimo", version, about = "Diffusion reconstruction experiments on synthetic MRI phantoms")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: desk-static, desk-quant, paper-static, paper-quant.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override a configuration entry, e.g. `--set training.epochs=20`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a fully sampled phantom dataset.
    MakePhantom {
        #[arg(long)]
        out: PathBuf,
    },
    /// Add masks and zero-filled measurements to a fully sampled dataset.
    Undersample {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Acceleration factor; defaults to the configured mask.
        #[arg(long)]
        af: Option<f64>,
    },
    /// Train the k-space model.
    TrainStatic(TrainArgs),
    /// Reconstruct the held-out slices with the k-space model.
    SampleStatic(SampleArgs),
    /// Train the parameter-map model.
    TrainQuant(TrainArgs),
    /// Estimate T1 maps of the held-out slices.
    SampleQuant(SampleArgs),
    /// Recompute the metrics of a reconstruction directory.
    Evaluate {
        #[arg(long)]
        recon: PathBuf,
    },
    /// Repeated sampling of one held-out slice.
    Uncertainty(SampleArgs),
    /// Run the whole experiment into the configured work directory.
    Run,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load_config(args: &ConfigArgs, mode: Option<Mode>) -> dimo_core::Result<ExperimentConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => match mode {
            Some(Mode::Quant) => ExperimentConfig::desk_quant(),
            _ => ExperimentConfig::desk_static(),
        },
    };
    if let Some(m) = mode {
        cfg.mode = m;
    }
    let mut overrides = args.overrides.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("seed={seed}"));
    }
    cfg.with_overrides(&overrides)
}

fn print<T: Serialize>(value: &T) -> dimo_core::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dispatch(cli: Cli) -> dimo_core::Result<()> {
    let args = &cli.config;
    match cli.command {
        Command::MakePhantom { out } => {
            let cfg = load_config(args, None)?;
            let ds = harness::make_phantom(&cfg, &out)?;
            print(ds.manifest())
        }
        Command::Undersample { data, out, af } => {
            let cfg = load_config(args, None)?;
            let mask = MaskSpec { af: af.unwrap_or(cfg.mask.af), ..cfg.mask };
            let ds = harness::undersample(&data, &out, mask, cfg.seeds().mask)?;
            print(ds.manifest())
        }
        Command::TrainStatic(a) => {
            print(&harness::train(&load_config(args, Some(Mode::Static))?, &a.data, &a.checkpoint)?)
        }
        Command::TrainQuant(a) => {
            print(&harness::train(&load_config(args, Some(Mode::Quant))?, &a.data, &a.checkpoint)?)
        }
        Command::SampleStatic(a) => {
            print(&harness::sample(&load_config(args, Some(Mode::Static))?, &a.data, &a.checkpoint, &a.out)?)
        }
        Command::SampleQuant(a) => {
            print(&harness::sample(&load_config(args, Some(Mode::Quant))?, &a.data, &a.checkpoint, &a.out)?)
        }
        Command::Evaluate { recon } => print(&harness::evaluate(&recon)?),
        Command::Uncertainty(a) => {
            let cfg = load_config(args, None)?;
            print(&harness::uncertainty(&cfg, &a.data, &a.checkpoint, &a.out)?)
        }
        Command::Run => print(&harness::run_experiment(&load_config(args, None)?)?),
    }
}

fn exit_code(e: &DimoError) -> u8 {
    match e {
        DimoError::Config(_) => 2,
        DimoError::Data(_) | DimoError::Json(_) | DimoError::Mask(_) | DimoError::Shape(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
