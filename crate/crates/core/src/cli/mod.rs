//! Command-line front end.
//!
//! Every subcommand reads an optional JSON [`RunConfig`]; flags override the
//! matching config fields. Results are printed to stdout as JSON and written
//! under the output directory (`--out`, then the config, then
//! `$QKAN_OUT_DIR`, then `./qkan-out`).

mod checkpoint;
mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use checkpoint::{Checkpoint, Provenance, Topology, FORMAT_VERSION};
pub use commands::{
    cmd_distill, cmd_eval, cmd_extend, cmd_gen_data, cmd_mnist_demo, cmd_spectrum, cmd_train, load_or_generate,
    mnist_dir, random_circuit, DistillReport, EvalReport, ExtendReport, GenDataReport, MnistReport, SeedSummary,
    SpectrumOutcome, TrainReport, EXTEND_TOLERANCE, MNIST_DIR_ENV, MNIST_FILES,
};
pub use config::{
    MnistSettings, RunConfig, SpectrumSettings, SpectrumWeights, Task, DEFAULT_OUT_DIR, OUT_DIR_ENV, SINC,
};

use crate::error::{QkanError, Result};

#[derive(Debug, Parser)]
#[command(name = "qkan", version, about = "Quantum Kolmogorov-Arnold networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single seed, replacing the configured seed list.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Feynman equation id (e.g. I.12.11) or `sinc`.
    #[arg(long)]
    pub equation: Option<String>,
    /// Node counts, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub shape: Option<Vec<usize>>,
    /// Repetition count per edge.
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub noise_frac: Option<f64>,
    /// Directory with train.csv and test.csv.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/test CSVs and a metadata sidecar.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train one network per seed and keep the best by test RMSE.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// RMSE of a checkpoint on a CSV dataset.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// CSV file with x1..xn,y1..ym columns.
        #[arg(long)]
        data_file: Option<PathBuf>,
    },
    /// Frequency spectrum of a random circuit or a checkpoint edge.
    Spectrum {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        r: Option<usize>,
        #[arg(long, value_parser = parse_weights)]
        weights: Option<SpectrumWeights>,
        /// Edge as layer,out,in.
        #[arg(long, value_delimiter = ',')]
        edge: Option<Vec<usize>>,
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Deepen every edge with identity blocks.
    Extend {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        new_r: Option<usize>,
    },
    /// Refit every edge with B-splines.
    Distill {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data_file: Option<PathBuf>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        degree: Option<usize>,
        #[arg(long)]
        samples_per_edge: Option<usize>,
    },
    /// Hybrid network on a two-digit MNIST subset.
    MnistDemo {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory with the four IDX files.
        #[arg(long)]
        mnist_dir: Option<PathBuf>,
        #[arg(long)]
        r: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

fn parse_weights(s: &str) -> std::result::Result<SpectrumWeights, String> {
    match s {
        "unit" => Ok(SpectrumWeights::Unit),
        "geometric" => Ok(SpectrumWeights::Geometric),
        other => Err(format!("expected `unit` or `geometric`, got `{other}`")),
    }
}

fn base_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        c.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        c.out_dir = Some(out.clone());
    }
    Ok(c)
}

fn set<T: Clone>(slot: &mut T, flag: &Option<T>) {
    if let Some(v) = flag {
        *slot = v.clone();
    }
}

fn set_some<T: Clone>(slot: &mut Option<T>, flag: &Option<T>) {
    if flag.is_some() {
        *slot = flag.clone();
    }
}

fn apply_model(c: &mut RunConfig, m: &ModelArgs) {
    set(&mut c.equation, &m.equation);
    set_some(&mut c.shape, &m.shape);
    set(&mut c.r, &m.r);
    set(&mut c.epochs, &m.epochs);
    set(&mut c.noise_frac, &m.noise_frac);
    set_some(&mut c.dataset, &m.dataset);
    set(&mut c.data_seed, &m.data_seed);
    set(&mut c.n_train, &m.n_train);
    set(&mut c.n_test, &m.n_test);
}

/// Resolves the configuration for a parsed command line.
pub fn resolve(command: &Command) -> Result<(Task, RunConfig)> {
    Ok(match command {
        Command::GenData { common, model } => {
            let mut c = base_config(common)?;
            apply_model(&mut c, model);
            (Task::GenData, c)
        }
        Command::Train { common, model } => {
            let mut c = base_config(common)?;
            apply_model(&mut c, model);
            (Task::Regression, c)
        }
        Command::Eval {
            common,
            checkpoint,
            data_file,
        } => {
            let mut c = base_config(common)?;
            set_some(&mut c.checkpoint, checkpoint);
            set_some(&mut c.data_file, data_file);
            (Task::Eval, c)
        }
        Command::Spectrum {
            common,
            checkpoint,
            r,
            weights,
            edge,
            tolerance,
        } => {
            let mut c = base_config(common)?;
            set_some(&mut c.checkpoint, checkpoint);
            set(&mut c.r, r);
            set(&mut c.spectrum.weights, weights);
            set(&mut c.spectrum.tolerance, tolerance);
            if let Some(e) = edge {
                c.spectrum.edge = match e[..] {
                    [l, o, i] => [l, o, i],
                    _ => return Err(QkanError::config("spectrum.edge", "expected layer,out,in")),
                };
            }
            (Task::Spectrum, c)
        }
        Command::Extend {
            common,
            checkpoint,
            new_r,
        } => {
            let mut c = base_config(common)?;
            set_some(&mut c.checkpoint, checkpoint);
            set_some(&mut c.new_r, new_r);
            (Task::Extend, c)
        }
        Command::Distill {
            common,
            checkpoint,
            data_file,
            grid,
            degree,
            samples_per_edge,
        } => {
            let mut c = base_config(common)?;
            set_some(&mut c.checkpoint, checkpoint);
            set_some(&mut c.data_file, data_file);
            set(&mut c.distill.grid, grid);
            set(&mut c.distill.degree, degree);
            set(&mut c.distill.samples_per_edge, samples_per_edge);
            (Task::Distill, c)
        }
        Command::MnistDemo {
            common,
            mnist_dir,
            r,
            epochs,
        } => {
            let mut c = base_config(common)?;
            set_some(&mut c.mnist.dir, mnist_dir);
            set(&mut c.r, r);
            set(&mut c.mnist.epochs, epochs);
            (Task::MnistDemo, c)
        }
    })
}

fn print<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("report is always serializable"));
}

pub fn run(cli: Cli) -> Result<()> {
    let (task, config) = resolve(&cli.command)?;
    match task {
        Task::GenData => print(&cmd_gen_data(&config)?),
        Task::Regression => print(&cmd_train(&config)?),
        Task::Eval => print(&cmd_eval(&config)?),
        Task::Spectrum => {
            let outcome = cmd_spectrum(&config)?;
            print(&outcome);
            if !outcome.verified {
                return Err(QkanError::Numerical(format!(
                    "spectrum residual {:.3e} exceeds {:.1e}",
                    outcome.residual_l2, outcome.tolerance
                )));
            }
        }
        Task::Extend => print(&cmd_extend(&config)?),
        Task::Distill => print(&cmd_distill(&config)?),
        Task::MnistDemo => print(&cmd_mnist_demo(&config)?),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("qkan").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"equation": "II.2.42", "r": 2, "epochs": 9, "seeds": [4, 5]}"#).unwrap();
        let cli = parse(&["train", "--config", path.to_str().unwrap(), "--r", "4", "--seed", "11", "--shape", "2,3,1"]);
        let (task, c) = resolve(&cli.command).unwrap();
        assert_eq!(task, Task::Regression);
        assert_eq!((c.equation.as_str(), c.r, c.epochs), ("II.2.42", 4, 9));
        assert_eq!(c.seeds, vec![11]);
        assert_eq!(c.shape, Some(vec![2, 3, 1]));
    }

    #[test]
    fn spectrum_flags() {
        let cli = parse(&["spectrum", "--r", "4", "--weights", "unit", "--edge", "1,0,2"]);
        let (_, c) = resolve(&cli.command).unwrap();
        assert_eq!(c.spectrum.weights, SpectrumWeights::Unit);
        assert_eq!(c.spectrum.edge, [1, 0, 2]);
        assert!(Cli::try_parse_from(["qkan", "spectrum", "--weights", "odd"]).is_err());
        let short = parse(&["spectrum", "--edge", "1,0"]);
        assert_eq!(resolve(&short.command).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn bad_config_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"epochz": 1}"#).unwrap();
        let cli = parse(&["train", "--config", path.to_str().unwrap()]);
        assert_eq!(resolve(&cli.command).unwrap_err().exit_code(), 2);
    }
}
