use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

use commands::Context;

/// Guide-conditioned Gaussian mixture regression for flight trajectories.
#[derive(Debug, Parser)]
#[command(name = "gmrnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Pipeline configuration (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic traffic-pattern scenes into the configured data directories.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the encoder, fusion and guide generator.
    TrainNn {
        #[command(flatten)]
        common: Common,
    },
    /// Draw guides for the training windows with the trained network.
    GenGuides {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the mixture on the guide dataset and write the model bundle.
    TrainGmm {
        #[command(flatten)]
        common: Common,
    },
    /// Predict candidate futures for one agent of a scene file.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Scene file holding the observed past.
        #[arg(long)]
        scene: PathBuf,
        /// Ego agent id.
        #[arg(long)]
        ego: u64,
        /// Frame number of the last observed point.
        #[arg(long)]
        frame: u64,
        /// Candidates to draw; defaults to the evaluation sample count.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, value_enum, default_value_t = MethodArg::Full)]
        method: MethodArg,
    },
    /// Best-of-n evaluation on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// Time prediction per output step on test windows.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Test windows cycled through by the timed runs.
        #[arg(long, default_value_t = 20)]
        cases: usize,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum MethodArg {
    Full,
    GmrOnly,
}

impl From<MethodArg> for gmrnet::pipeline::Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Full => gmrnet::pipeline::Method::Full,
            MethodArg::GmrOnly => gmrnet::pipeline::Method::GmrOnly,
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (name, common) = match &cli.command {
        Command::GenData { common } => ("gen-data", common),
        Command::TrainNn { common } => ("train-nn", common),
        Command::GenGuides { common } => ("gen-guides", common),
        Command::TrainGmm { common } => ("train-gmm", common),
        Command::Predict { common, .. } => ("predict", common),
        Command::Evaluate { common } => ("evaluate", common),
        Command::Bench { common, .. } => ("bench", common),
    };
    let mut ctx = Context::new(name, common.config.as_deref(), common.seed)?;
    match cli.command {
        Command::GenData { .. } => commands::gen_data(&mut ctx)?,
        Command::TrainNn { .. } => commands::train_nn(&mut ctx)?,
        Command::GenGuides { .. } => commands::gen_guides(&mut ctx)?,
        Command::TrainGmm { .. } => commands::train_gmm(&mut ctx)?,
        Command::Predict {
            scene,
            ego,
            frame,
            samples,
            method,
            ..
        } => commands::predict(&mut ctx, &scene, ego, frame, samples, method.into())?,
        Command::Evaluate { .. } => commands::evaluate(&mut ctx)?,
        Command::Bench { cases, .. } => commands::bench(&mut ctx, cases)?,
    }
    ctx.finish()
}

/// Category of the first library error in the chain, else a coarse guess.
fn category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<gmrnet::Error>() {
            return e.category();
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "format";
        }
    }
    "internal"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{:#}", e).replace('\n', " ");
            eprintln!("error[{}]: {}", category(&e), message);
            ExitCode::FAILURE
        }
    }
}
