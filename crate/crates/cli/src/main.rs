//! `drrpose` command line: phantom and radiograph rendering, dataset
//! generation, annotation, training, evaluation, the two sweeps, Q-Q
//! analysis and the annotation server.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "drrpose", version, about = "Synthetic radiograph pose-estimation lab")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalOpts {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one configuration field, e.g. `dataset.train=400`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate one anatomy volume.
    Phantom {
        /// Anatomy seed; defaults to the first configured anatomy.
        #[arg(long)]
        anatomy_seed: Option<u64>,
        /// Output stem; writes `<stem>.json` and `<stem>.raw`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one radiograph of the screw in an anatomy.
    Render {
        #[arg(long)]
        anatomy_seed: Option<u64>,
        /// Screw head point `x,y,z` in mm.
        #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
        origin: [f64; 3],
        /// Screw axis `x,y,z`.
        #[arg(long, value_parser = parse_vec3, allow_hyphen_values = true)]
        axis: [f64; 3],
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        roll: f64,
        /// C-arm angle in degrees.
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        view_angle: f64,
        /// 8-bit PNG output.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render every split of the dataset.
    Dataset,
    /// Draw noisy annotations for the train and validation splits.
    Annotate {
        #[arg(long)]
        eta: f64,
        #[arg(long, default_value_t = 1)]
        k: usize,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        eta: f64,
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Use the first `size` images of the nested subset order.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Model name under `models/`.
        #[arg(long)]
        label: Option<String>,
    },
    /// Evaluate a model on the test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Result directory name under `results/`.
        #[arg(long)]
        label: Option<String>,
    },
    /// Train and evaluate one model per noise level.
    SweepNoise,
    /// Train and evaluate one model per training-set size.
    SweepSize,
    /// Normal Q-Q analysis of one CSV column.
    Qq {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value = "position_error_mm")]
        column: String,
        /// Keep rows where `COLUMN=VALUE`.
        #[arg(long, value_name = "COLUMN=VALUE")]
        filter: Option<String>,
        /// Write the Q-Q points as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the annotation API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value = "study")]
        mode: drrpose_annotate::Mode,
        /// JSON-lines store; defaults to `<workdir>/annotations/study.jsonl`.
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

fn parse_vec3(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected x,y,z, got `{s}`"));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("`{p}` is not a number"))?;
    }
    Ok(out)
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(drrpose::Error),
}

impl From<drrpose::Error> for CliError {
    fn from(e: drrpose::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
