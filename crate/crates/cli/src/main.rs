use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use strabscreen_cli::commands::{
    cmd_eval, cmd_gen_data, cmd_learning_curve, cmd_predict, cmd_train, CmdResult,
};
use strabscreen_cli::config::PipelineConfig;

/// Desk-scale strabismus screening: synthetic data, a two-stage
/// detector/classifier pipeline, and batch reports.
#[derive(Parser)]
#[command(name = "strabscreen", version, about)]
struct Cli {
    /// Key=value config file overriding the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; every output is a pure function of seed and inputs.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Directory receiving generated files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset into --out (train/ and test/).
    GenData,
    /// Train the detector, then the classifier, writing model files and
    /// loss curves into --out.
    Train {
        /// Dataset directory holding train/ and test/.
        data: PathBuf,
    },
    /// Evaluate trained models on the dataset's test split.
    Eval {
        /// Dataset directory holding test/.
        data: PathBuf,
        /// Directory holding detector.rfcn and classifier.rfcn.
        #[arg(long)]
        models: PathBuf,
    },
    /// Score every .ppm image in a directory, one CSV row each.
    Predict {
        /// Directory of binary pixmap images.
        input: PathBuf,
        /// Directory holding detector.rfcn and classifier.rfcn.
        #[arg(long)]
        models: PathBuf,
    },
    /// Classifier learning curve over ascending training-set sizes.
    LearningCurve {
        /// Comma-separated strictly ascending sizes, e.g. 50,100,200,341.
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => match PipelineConfig::from_file(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => PipelineConfig::default(),
    };
    eprint!("resolved configuration:\n{}", cfg.resolved_text());

    let result: CmdResult = match &cli.cmd {
        Cmd::GenData => cmd_gen_data(&cfg, cli.seed, &cli.out),
        Cmd::Train { data } => cmd_train(&cfg, cli.seed, data, &cli.out),
        Cmd::Eval { data, models } => cmd_eval(models, data, &cli.out),
        Cmd::Predict { input, models } => cmd_predict(models, input, &cli.out),
        Cmd::LearningCurve { sizes } => cmd_learning_curve(&cfg, cli.seed, sizes, &cli.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.exit_code() as u8)
        }
    }
}
