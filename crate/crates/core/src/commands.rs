//! The operations behind each `sru-ner` subcommand. The binary only parses
//! flags and prints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::codec::{encode_mentions, ActionVocabulary, Mention, ScoredMention};
use crate::corpus::{
    corpus_stats, load_dataset, nested_line, observed_types, read_corpus, read_nested, synthetic_split, write_corpus,
    DatasetSpec, OutputMention,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_corpus, EvalReport, Scenario, Scored};
use crate::model::SruNer;
use crate::trainer::{registry_for, train, Config, CorpusFormat, DatasetConfig, EpochLog, LabelRegistry, TrainOutcome};

/// Overrides the output directory of `train`.
pub const RUN_DIR_ENV: &str = "SRU_NER_RUN_DIR";

pub const MANIFEST_FORMAT: &str = "sru-ner-run/1";
pub const CHECKPOINT_FILE: &str = "model.safetensors";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusFingerprint {
    pub dataset: String,
    pub split: String,
    pub path: PathBuf,
    pub sha256: String,
    pub sentences: usize,
}

/// Everything needed to reproduce a training run, plus what it produced.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    pub config_path: PathBuf,
    pub seed: u64,
    pub config: Config,
    pub corpora: Vec<CorpusFingerprint>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_f1: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    /// Takes precedence over the config's `run_dir`.
    pub run_dir: Option<PathBuf>,
}

pub struct TrainRun {
    pub run_dir: PathBuf,
    pub manifest: RunManifest,
    pub outcome: TrainOutcome,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn fingerprints(config: &Config, datasets: &[DatasetSpec]) -> Result<Vec<CorpusFingerprint>> {
    let mut out = Vec::new();
    for (dc, ds) in config.datasets.iter().zip(datasets) {
        for (split, path, examples) in [
            ("train", Some(&dc.train), &ds.train),
            ("dev", dc.dev.as_ref(), &ds.dev),
            ("test", dc.test.as_ref(), &ds.test),
        ] {
            if let Some(path) = path {
                out.push(CorpusFingerprint {
                    dataset: dc.name.clone(),
                    split: split.into(),
                    path: path.clone(),
                    sha256: sha256_file(path)?,
                    sentences: examples.len(),
                });
            }
        }
    }
    Ok(out)
}

fn default_run_dir(config_path: &Path) -> PathBuf {
    let stem = config_path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    Path::new("runs").join(stem)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Trains from a config file and writes the checkpoint, the per-epoch
/// metrics CSV and the run manifest into the run directory.
pub fn cmd_train(config_path: &Path, options: &TrainOptions) -> Result<TrainRun> {
    let started_unix = unix_now();
    let mut config = Config::load(config_path)?;
    if let Some(seed) = options.seed {
        config.seed = seed;
    }
    if let Some(epochs) = options.epochs {
        config.train.epochs = epochs;
    }
    if config.datasets.is_empty() {
        return Err(Error::Config(format!("{}: no datasets configured", config_path.display())));
    }
    let datasets = config.datasets.iter().map(load_dataset).collect::<Result<Vec<_>>>()?;
    let corpora = fingerprints(&config, &datasets)?;

    let run_dir =
        options.run_dir.clone().or_else(|| config.run_dir.clone()).unwrap_or_else(|| default_run_dir(config_path));
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let metrics_path = run_dir.join(METRICS_FILE);
    let file = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = std::io::BufWriter::new(file);
    let mut write_err: Option<std::io::Error> = None;
    let mut log_line = |line: &str, w: &mut std::io::BufWriter<std::fs::File>| {
        if write_err.is_none() {
            write_err = writeln!(w, "{line}").and_then(|_| w.flush()).err();
        }
    };
    log_line(EpochLog::CSV_HEADER, &mut metrics);

    let outcome = train(&config, &datasets, |l| {
        log::info!(
            "epoch {} {}: F1 {} loss {}",
            l.epoch,
            l.split,
            l.f1.map(|f| format!("{:.4}", f)).unwrap_or_else(|| "-".into()),
            l.loss.map(|f| format!("{:.6}", f)).unwrap_or_else(|| "-".into())
        );
        log_line(&l.csv_line(), &mut metrics);
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&metrics_path, e));
    }

    let checkpoint = run_dir.join(CHECKPOINT_FILE);
    outcome.model.save(&checkpoint)?;
    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_path: config_path.to_path_buf(),
        seed: config.seed,
        config,
        corpora,
        checkpoint,
        metrics: metrics_path,
        started_unix,
        finished_unix: unix_now(),
        epochs_run: outcome.epochs_run,
        best_epoch: outcome.best_epoch,
        best_f1: outcome.best_f1,
    };
    let manifest_path = run_dir.join(MANIFEST_FILE);
    write_file(&manifest_path, &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    Ok(TrainRun { run_dir, manifest, outcome })
}

/// Reads a metrics CSV back into log lines.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let bad = |m: &str| Error::Parse { path: path.to_path_buf(), line: i + 1, message: m.into() };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad("bad number"))
            }
        };
        out.push(EpochLog {
            epoch: cols[0].parse().map_err(|_| bad("bad epoch"))?,
            split: cols[1].into(),
            precision: num(cols[2])?,
            recall: num(cols[3])?,
            f1: num(cols[4])?,
            loss: num(cols[5])?,
        });
    }
    Ok(out)
}

/// Rewrites scored union-label predictions for output. Merged output uses
/// bare types, keeping the higher score when two datasets agree on a span.
/// With a source dataset only its own types are kept.
pub fn project_predictions(
    pred: &[ScoredMention],
    scenario: Scenario,
    source_dataset: Option<&str>,
    registry: &LabelRegistry,
) -> Result<Vec<OutputMention>> {
    let source = source_dataset.map(|s| registry.dataset(s)).transpose()?;
    let mut kept: BTreeMap<Mention, f64> = BTreeMap::new();
    for p in pred {
        let label = match scenario {
            Scenario::Disjoint => {
                if source.is_some_and(|s| registry.dataset_of(&p.mention.label) != Some(s.name.as_str())) {
                    continue;
                }
                p.mention.label.as_str()
            }
            Scenario::Merged => {
                let bare = registry.merge(&p.mention.label).unwrap_or(&p.mention.label);
                if source.is_some_and(|s| !s.types.iter().any(|t| t == bare)) {
                    continue;
                }
                bare
            }
        };
        let score = kept.entry(Mention::new(p.mention.start, p.mention.end, label)).or_insert(p.score);
        *score = score.max(p.score);
    }
    Ok(kept.into_iter().map(|(mention, score)| OutputMention { mention, score: Some(score) }).collect())
}

#[derive(Clone, Debug)]
pub struct PredictOptions {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub format: CorpusFormat,
    pub scenario: Scenario,
    pub source_dataset: Option<String>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PredictSummary {
    pub sentences: usize,
    pub mentions: usize,
    /// Sentences written without predictions because the encoder could not
    /// take them.
    pub skipped: usize,
}

/// Annotates a corpus, writing one nested record per input sentence.
pub fn cmd_predict(options: &PredictOptions, out: &mut dyn Write) -> Result<PredictSummary> {
    let model = SruNer::load(&options.checkpoint)?;
    predict_with(&model, options, out)
}

pub fn predict_with(model: &SruNer, options: &PredictOptions, out: &mut dyn Write) -> Result<PredictSummary> {
    let registry = model.registry();
    if let Some(s) = &options.source_dataset {
        registry.dataset(s)?;
    }
    let examples = read_corpus(&options.input, options.format)?;
    let mut summary = PredictSummary::default();
    let io = |e| Error::io("<output>", e);
    for (i, ex) in examples.iter().enumerate() {
        summary.sentences += 1;
        let mentions = match model.predict(&ex.sentence) {
            Ok(p) => project_predictions(&p.decoded.mentions, options.scenario, options.source_dataset.as_deref(), registry)?,
            Err(e @ (Error::EmptySentence | Error::SentenceTooLong { .. })) => {
                log::warn!("{}: sentence {}: {e}; written without predictions", options.input.display(), i + 1);
                summary.skipped += 1;
                Vec::new()
            }
            Err(e) => return Err(e),
        };
        summary.mentions += mentions.len();
        writeln!(out, "{}", nested_line(&ex.sentence, &mentions)).map_err(io)?;
    }
    out.flush().map_err(io)?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct EvaluateOptions {
    /// Nested records, as written by `predict`.
    pub predictions: PathBuf,
    pub gold: PathBuf,
    pub gold_format: CorpusFormat,
    pub scenario: Scenario,
    /// Overrides any `dataset` field in the files.
    pub source_dataset: Option<String>,
}

/// Where the label registry for evaluation comes from.
pub fn registry_from_config(path: &Path) -> Result<LabelRegistry> {
    let config = Config::load(path)?;
    let mut specs = Vec::with_capacity(config.datasets.len());
    for d in &config.datasets {
        specs.push(match &d.types {
            Some(types) => DatasetSpec { name: d.name.clone(), types: types.clone(), ..Default::default() },
            None => load_dataset(d)?,
        });
    }
    registry_for(&specs)
}

/// Scores a prediction file against a gold file, sentence by sentence.
///
/// Without a registry the two files are treated as one dataset and labels
/// are compared verbatim, so both scenarios agree.
pub fn cmd_evaluate(options: &EvaluateOptions, registry: Option<&LabelRegistry>) -> Result<EvalReport> {
    let pred = read_nested(&options.predictions)?;
    let gold = read_corpus(&options.gold, options.gold_format)?;
    if pred.len() != gold.len() {
        return Err(Error::Invalid(format!(
            "{} has {} sentences but {} has {}",
            options.predictions.display(),
            pred.len(),
            options.gold.display(),
            gold.len()
        )));
    }
    for (i, (p, g)) in pred.iter().zip(&gold).enumerate() {
        if p.sentence.tokens != g.sentence.tokens {
            return Err(Error::Invalid(format!("sentence {}: tokens differ between prediction and gold", i + 1)));
        }
    }

    let built;
    let registry = match registry {
        Some(r) => r,
        None => {
            let name = options.source_dataset.clone().unwrap_or_else(|| "gold".into());
            let types = observed_types(gold.iter().chain(&pred));
            built = LabelRegistry::single(&name, &types)?;
            &built
        }
    };
    let fallback = match registry.datasets() {
        [only] => Some(only.name.as_str()),
        _ => None,
    };
    let mut sources = Vec::with_capacity(gold.len());
    for (i, (p, g)) in pred.iter().zip(&gold).enumerate() {
        let source = match options.source_dataset.as_deref() {
            Some(s) => {
                registry.dataset(s)?;
                s
            }
            None => [g.sentence.source_dataset.as_deref(), p.sentence.source_dataset.as_deref()]
                .into_iter()
                .flatten()
                .find(|s| registry.dataset(s).is_ok())
                .or(fallback)
                .ok_or_else(|| {
                    Error::Invalid(format!("sentence {}: no source dataset; pass --source-dataset", i + 1))
                })?,
        };
        sources.push(source);
    }
    // Unregistered bare labels in a single-dataset comparison are lifted to
    // their union form so the disjoint filter sees them.
    let lifted: Vec<Vec<Mention>> = pred
        .iter()
        .zip(&sources)
        .map(|(p, s)| {
            p.mentions
                .iter()
                .map(|m| match registry.union_label(s, &m.label) {
                    Ok(u) if !registry.contains(&m.label) && fallback.is_some() => Mention::new(m.start, m.end, u),
                    _ => m.clone(),
                })
                .collect()
        })
        .collect();
    let types: Vec<String> = sources
        .iter()
        .flat_map(|s| registry.dataset(s).map(|d| d.types.clone()).unwrap_or_default())
        .collect();
    let report = evaluate_corpus(
        lifted.iter().zip(&gold).zip(&sources).map(|((p, g), s)| Scored { pred: p, gold: &g.mentions, source_dataset: s }),
        options.scenario,
        registry,
    )?;
    Ok(report.with_types(&types))
}

/// Writes `report.json` and `report.txt` into `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("report.json"), &(serde_json::to_string_pretty(&report.to_json())? + "\n"))?;
    write_file(&dir.join("report.txt"), &report.to_table())
}

/// Writes the canonical action sequence of every sentence, one per line.
pub fn cmd_encode_actions(
    input: &Path,
    format: CorpusFormat,
    types: Option<&[String]>,
    out: &mut dyn Write,
) -> Result<usize> {
    let examples = read_corpus(input, format)?;
    let types = types.map(<[String]>::to_vec).unwrap_or_else(|| observed_types(&examples));
    let vocab = ActionVocabulary::new(types)?;
    for (i, ex) in examples.iter().enumerate() {
        let seq = encode_mentions(&ex.sentence, &ex.mentions, &vocab).map_err(|e| match e {
            Error::UnknownLabel(l) => Error::UnknownLabel(format!("{l} (sentence {})", i + 1)),
            e => e,
        })?;
        writeln!(out, "{}", seq.render(&vocab)).map_err(|e| Error::io("<output>", e))?;
    }
    Ok(examples.len())
}

#[derive(Clone, Debug)]
pub struct SplitOptions {
    pub dataset: DatasetConfig,
    pub types_a: Vec<String>,
    pub types_b: Vec<String>,
    pub names: (String, String),
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn extension(format: CorpusFormat) -> &'static str {
    match format {
        CorpusFormat::Bio => "bio",
        CorpusFormat::Nested => "jsonl",
    }
}

/// Writes the two partially annotated halves under `out_dir/<name>/`, their
/// statistics, and a `datasets.json` fragment that can be pasted into a
/// training config.
pub fn cmd_split(options: &SplitOptions) -> Result<(DatasetSpec, DatasetSpec)> {
    let source = load_dataset(&options.dataset)?;
    let (a, b) = synthetic_split(
        &source,
        &options.types_a,
        &options.types_b,
        (&options.names.0, &options.names.1),
        options.seed,
    )?;
    let format = options.dataset.format;
    let mut configs = Vec::new();
    let mut stats = String::new();
    for half in [&a, &b] {
        let dir = options.out_dir.join(&half.name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let train = dir.join(format!("train.{}", extension(format)));
        write_corpus(&train, format, &half.train)?;
        let dev = if half.dev.is_empty() {
            None
        } else {
            let p = dir.join(format!("dev.{}", extension(format)));
            write_corpus(&p, format, &half.dev)?;
            Some(p)
        };
        configs.push(DatasetConfig {
            name: half.name.clone(),
            format,
            train,
            dev,
            test: None,
            types: Some(half.types.clone()),
        });
        let csv = corpus_stats(half).to_csv(&half.name);
        stats.push_str(if stats.is_empty() { &csv } else { csv.split_once('\n').map_or("", |(_, rows)| rows) });
    }
    write_file(&options.out_dir.join("stats.csv"), &stats)?;
    write_file(&options.out_dir.join("datasets.json"), &(serde_json::to_string_pretty(&configs)? + "\n"))?;
    Ok((a, b))
}

/// Per-split, per-type mention counts of every dataset, as one CSV.
pub fn cmd_stats(datasets: &[DatasetConfig]) -> Result<String> {
    let mut out = String::new();
    for d in datasets {
        let spec = load_dataset(d)?;
        let csv = corpus_stats(&spec).to_csv(&spec.name);
        out.push_str(if out.is_empty() { &csv } else { csv.split_once('\n').map_or("", |(_, rows)| rows) });
    }
    if out.is_empty() {
        out.push_str("dataset,split,type,mentions\n");
    }
    Ok(out)
}
