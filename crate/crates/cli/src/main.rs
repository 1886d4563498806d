use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sru_ner::commands::{self, EvaluateOptions, PredictOptions, SplitOptions, TrainOptions, RUN_DIR_ENV};
use sru_ner::eval::Scenario;
use sru_ner::trainer::{Config, CorpusFormat, DatasetConfig};
use sru_ner::{Error, Result};

#[derive(Parser)]
#[command(name = "sru-ner", version, about = "Nested named-entity recognition with multi-task training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Bio,
    Nested,
}

impl From<Format> for CorpusFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Bio => CorpusFormat::Bio,
            Format::Nested => CorpusFormat::Nested,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Disjoint,
    Merged,
}

impl From<ScenarioArg> for Scenario {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Disjoint => Scenario::Disjoint,
            ScenarioArg::Merged => Scenario::Merged,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoint, metrics.csv and manifest.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Output directory (default: the config's run_dir, else runs/<config name>).
        #[arg(long, env = RUN_DIR_ENV)]
        run_dir: Option<PathBuf>,
    },
    /// Annotate a corpus with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "nested")]
        format: Format,
        /// Nested-record output file (default: stdout).
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "merged")]
        scenario: ScenarioArg,
        /// Keep only this dataset's types.
        #[arg(long)]
        source_dataset: Option<String>,
    },
    /// Score predictions against gold annotations.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, value_enum, default_value = "nested")]
        gold_format: Format,
        #[arg(long, value_enum, default_value = "merged")]
        scenario: ScenarioArg,
        #[arg(long)]
        source_dataset: Option<String>,
        /// Label registry from a training config.
        #[arg(long, conflicts_with = "checkpoint")]
        config: Option<PathBuf>,
        /// Label registry from a checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Writes report.json and report.txt here.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Exit with status 1 if micro-F1 (0..1) is below this.
        #[arg(long)]
        min_f1: Option<f64>,
    },
    /// Print the canonical action sequence of each sentence.
    EncodeActions {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "nested")]
        format: Format,
        /// Entity types in vocabulary order (default: sorted observed types).
        #[arg(long, value_delimiter = ',')]
        types: Option<Vec<String>>,
    },
    /// Split a corpus into two halves annotated with disjoint type sets.
    Split {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "nested")]
        format: Format,
        #[arg(long, value_delimiter = ',', required = true)]
        types_a: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        types_b: Vec<String>,
        /// Dataset names of the two halves.
        #[arg(long, value_delimiter = ',', num_args = 2, default_values = ["A", "B"])]
        names: Vec<String>,
        #[arg(long, default_value_t = 13)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Per-split, per-type mention counts as CSV.
    Stats {
        /// Every dataset of a training config.
        #[arg(long, conflicts_with = "input")]
        config: Option<PathBuf>,
        /// A single corpus file.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "nested")]
        format: Format,
    },
}

fn error_line(e: &Error) -> String {
    let path = match e {
        Error::Io { path, .. } | Error::Parse { path, .. } => format!(" path={}", path.display()),
        _ => String::new(),
    };
    format!("error kind={}{path} message={:?}", e.kind(), e.to_string())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(
            std::fs::File::create(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, seed, epochs, run_dir } => {
            let run = commands::cmd_train(&config, &TrainOptions { seed, epochs, run_dir })?;
            println!(
                "run_dir={} best_epoch={} best_f1={:.6} epochs_run={}",
                run.run_dir.display(),
                run.manifest.best_epoch,
                run.manifest.best_f1,
                run.manifest.epochs_run
            );
        }
        Command::Predict { checkpoint, input, format, output: out_path, scenario, source_dataset } => {
            let options = PredictOptions { checkpoint, input, format: format.into(), scenario: scenario.into(), source_dataset };
            let mut out = output(out_path.as_deref())?;
            let summary = commands::cmd_predict(&options, &mut out)?;
            eprintln!("sentences={} mentions={} skipped={}", summary.sentences, summary.mentions, summary.skipped);
        }
        Command::Evaluate {
            predictions,
            gold,
            gold_format,
            scenario,
            source_dataset,
            config,
            checkpoint,
            output_dir,
            min_f1,
        } => {
            let registry = match (&config, &checkpoint) {
                (Some(c), _) => Some(commands::registry_from_config(c)?),
                (_, Some(c)) => Some(sru_ner::model::checkpoint_registry(c)?),
                _ => None,
            };
            let options =
                EvaluateOptions { predictions, gold, gold_format: gold_format.into(), scenario: scenario.into(), source_dataset };
            let report = commands::cmd_evaluate(&options, registry.as_ref())?;
            if let Some(dir) = output_dir {
                commands::write_report(&report, &dir)?;
            }
            print!("{}", report.to_table());
            if let Some(min) = min_f1 {
                if report.f1() < min {
                    eprintln!("gate failed: micro-F1 {:.6} < {min}", report.f1());
                    return Ok(ExitCode::from(1));
                }
            }
        }
        Command::EncodeActions { input, format, types } => {
            let mut out = output(None)?;
            commands::cmd_encode_actions(&input, format.into(), types.as_deref(), &mut out)?;
        }
        Command::Split { train, dev, format, types_a, types_b, names, seed, out_dir } => {
            let dataset = DatasetConfig { name: "source".into(), format: format.into(), train, dev, test: None, types: None };
            let options = SplitOptions {
                dataset,
                types_a,
                types_b,
                names: (names[0].clone(), names[1].clone()),
                seed,
                out_dir,
            };
            let (a, b) = commands::cmd_split(&options)?;
            for half in [a, b] {
                println!("{}: {} train, {} dev sentences", half.name, half.train.len(), half.dev.len());
            }
        }
        Command::Stats { config, input, format } => {
            let datasets = match (config, input) {
                (Some(c), _) => Config::load(&c)?.datasets,
                (None, Some(i)) => {
                    let name = i.file_stem().and_then(|s| s.to_str()).unwrap_or("corpus").to_string();
                    vec![DatasetConfig { name, format: format.into(), train: i, dev: None, test: None, types: None }]
                }
                (None, None) => return Err(Error::Config("stats needs --config or --input".into())),
            };
            print!("{}", commands::cmd_stats(&datasets)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(2)
        }
    }
}
