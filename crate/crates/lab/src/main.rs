use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use icl_lab::commands::{
    cmd_align, cmd_compare, cmd_extract, cmd_gen, cmd_gridsearch, cmd_plot, cmd_train, cmd_transience, CommandOutput,
};
use icl_lab::plot::PlotKind;
use icl_lab::{ExperimentConfig, LabError};

#[derive(Parser)]
#[command(name = "icl-lab", version, about = "In-context classification laboratory")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; must not exist or be empty.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Line,
    Scatter,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset of contexts.
    Gen,
    /// Train an attention model.
    Train,
    /// Compare checkpoints with a (fitted) baseline predictor.
    Align {
        /// Checkpoint file or `train` output directory.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Grid-search a baseline family.
    Gridsearch,
    /// Effective constants of softmax-attention checkpoints.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Models across context lengths.
    Compare,
    /// Attention + MLP on a fixed number of class-vector sets.
    Transience,
    /// Render CSV files as SVG.
    Plot {
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, LabError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| LabError::Validation("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<CommandOutput, LabError> {
    let out = cli
        .out
        .as_deref()
        .ok_or_else(|| LabError::Validation("--out is required".into()))?;
    if let Command::Plot { kind, inputs } = &cli.command {
        let kind = kind.map(|k| match k {
            KindArg::Line => PlotKind::Line,
            KindArg::Scatter => PlotKind::Scatter,
        });
        return cmd_plot(inputs, kind, out);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Gen => cmd_gen(&cfg, out),
        Command::Train => cmd_train(&cfg, out),
        Command::Align { checkpoint } => cmd_align(&cfg, checkpoint, out),
        Command::Gridsearch => cmd_gridsearch(&cfg, out),
        Command::Extract { checkpoint } => cmd_extract(&cfg, checkpoint, out),
        Command::Compare => cmd_compare(&cfg, out),
        Command::Transience => cmd_transience(&cfg, out),
        Command::Plot { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(done) => {
            println!("{}", done.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            let err = anyhow::Error::new(e).context("icl-lab failed");
            eprintln!("{err:#}");
            ExitCode::from(code as u8)
        }
    }
}
