//! `dlr`: synthesize bursts, train delay-loop readouts, merge them and
//! evaluate outlier rejection and exchange costs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dlr_core::ErrorCategory;

#[derive(Debug, Parser)]
#[command(name = "dlr", version, about = "Delay-loop reservoir RF burst classification")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Global {
    /// Experiment config (key=value text).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the dataset seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: config `out_dir`, else ./out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Omit the timestamp line from reports.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Write per-phase multiply counts to `macs.txt`.
    #[arg(long, global = true)]
    pub counter: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the train and test burst files.
    Synth,
    /// Train a readout and write the model plus a figure-of-merit report.
    Train,
    /// Classify a dataset with a trained model.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Dataset file; defaults to the configured test set.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Ridge accuracy over every amplitude sub-window.
    Salience {
        #[arg(long, default_value_t = 32)]
        stride: usize,
    },
    /// Fuse readouts into one perceptron.
    Merge {
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long, default_value = "disjoint")]
        mode: String,
        #[arg(long, default_value = "softmax")]
        head: String,
        #[arg(long)]
        retrain: bool,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
    },
    /// ROC and entropy histogram of the outlier detector.
    Outlier {
        #[arg(long)]
        net: PathBuf,
        /// Dataset of legitimate bursts.
        #[arg(long)]
        legit: PathBuf,
        /// Dataset of outlier bursts.
        #[arg(long)]
        outliers: PathBuf,
        /// Dataset used to calibrate the threshold; defaults to `legit`.
        #[arg(long)]
        calibrate: Option<PathBuf>,
    },
    /// Run a multi-node exchange scenario.
    Simulate {
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Hierarchical grid search.
    Tune {
        #[arg(long)]
        grid: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("config error: cannot start {t} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Synth => commands::synth(&cli.global),
        Command::Train => commands::train(&cli.global),
        Command::Infer { model, data } => commands::infer(&cli.global, &model, data.as_deref()),
        Command::Salience { stride } => commands::salience(&cli.global, stride),
        Command::Merge { models, mode, head, retrain, epochs, lr } => {
            commands::merge(&cli.global, &models, &mode, &head, retrain, epochs, lr)
        }
        Command::Outlier { net, legit, outliers, calibrate } => {
            commands::outlier(&cli.global, &net, &legit, &outliers, calibrate.as_deref())
        }
        Command::Simulate { scenario } => commands::simulate(&cli.global, scenario.as_deref()),
        Command::Tune { grid } => commands::tune(&cli.global, &grid),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (label, code) = match category(&e) {
                ErrorCategory::Config => ("config error", 2),
                ErrorCategory::Data => ("data error", 3),
                ErrorCategory::Numeric => ("numeric error", 4),
            };
            eprintln!("{label}: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn category(e: &anyhow::Error) -> ErrorCategory {
    e.chain()
        .find_map(|c| c.downcast_ref::<dlr_core::Error>())
        .map(|e| e.category())
        .unwrap_or(ErrorCategory::Data)
}
