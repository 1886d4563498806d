//! Corpus formats, dataset loading, statistics and the synthetic split tool.
//!
//! Flat corpora use the BIO column format: `token<TAB>tag` per line, blank
//! lines between sentences. Nested corpora use one JSON object per line:
//! `{"tokens": [...], "mentions": [{"start": 0, "end": 1, "type": "X"}]}`
//! with inclusive token spans.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{first_crossing_pair, Mention, Sentence};
use crate::error::{Error, Result};
use crate::trainer::{CorpusFormat, DatasetConfig};

/// A sentence with gold mentions in its dataset's own types.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub sentence: Sentence,
    pub mentions: Vec<Mention>,
}

#[derive(Serialize, Deserialize)]
struct NestedRecord {
    tokens: Vec<String>,
    #[serde(default)]
    mentions: Vec<NestedMention>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct NestedMention {
    start: usize,
    end: usize,
    #[serde(rename = "type")]
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

/// A mention with an optional confidence, as written by prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputMention {
    pub mention: Mention,
    pub score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub types: Vec<String>,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl DatasetSpec {
    pub fn splits(&self) -> [(&'static str, &[Example]); 3] {
        [("train", &self.train), ("dev", &self.dev), ("test", &self.test)]
    }

    /// Checks that every gold type is declared.
    pub fn validate(&self) -> Result<()> {
        for (split, examples) in self.splits() {
            for ex in examples {
                for m in &ex.mentions {
                    if !self.types.contains(&m.label) {
                        return Err(Error::UnknownLabel(format!("{} (in {}/{split})", m.label, self.name)));
                    }
                }
            }
        }
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufReader<std::fs::File>> {
    std::fs::File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

/// Reads a BIO file. An `I-X` that does not continue an `X` run opens a new
/// mention.
pub fn read_bio(path: &Path) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut tokens: Vec<String> = Vec::new();
    let mut tags: Vec<(usize, String)> = Vec::new();
    let flush = |tokens: &mut Vec<String>, tags: &mut Vec<(usize, String)>, out: &mut Vec<Example>| -> Result<()> {
        if tokens.is_empty() {
            return Ok(());
        }
        let mentions = bio_to_mentions(tags.iter().map(|(_, t)| t.as_str()))
            .map_err(|(i, msg)| parse_err(path, tags[i].0, msg))?;
        out.push(Example { sentence: Sentence::new(std::mem::take(tokens)), mentions });
        tags.clear();
        Ok(())
    };
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut tags, &mut out)?;
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let (token, tag) = match line.split_once('\t') {
            Some((tok, tag)) => (tok, tag.trim()),
            None => line
                .rsplit_once(char::is_whitespace)
                .map(|(tok, tag)| (tok.trim_end(), tag))
                .ok_or_else(|| parse_err(path, i + 1, "expected `token<TAB>tag`"))?,
        };
        tokens.push(token.to_string());
        tags.push((i + 1, tag.to_string()));
    }
    flush(&mut tokens, &mut tags, &mut out)?;
    Ok(out)
}

/// Flat mentions from a BIO tag sequence; errors carry the offending index.
pub fn bio_to_mentions<'a>(tags: impl IntoIterator<Item = &'a str>) -> std::result::Result<Vec<Mention>, (usize, String)> {
    let mut out = Vec::new();
    let mut open: Option<(usize, String)> = None;
    let mut n = 0;
    for (i, tag) in tags.into_iter().enumerate() {
        n = i + 1;
        let (kind, label) = match tag {
            "O" => ('O', ""),
            _ => match tag.split_once('-') {
                Some(("B", l)) if !l.is_empty() => ('B', l),
                Some(("I", l)) if !l.is_empty() => ('I', l),
                _ => return Err((i, format!("malformed tag `{tag}`"))),
            },
        };
        let continues = kind == 'I' && open.as_ref().is_some_and(|(_, l)| l == label);
        if !continues {
            if let Some((s, l)) = open.take() {
                out.push(Mention::new(s, i - 1, l));
            }
            if kind != 'O' {
                open = Some((i, label.to_string()));
            }
        }
    }
    if let Some((s, l)) = open {
        out.push(Mention::new(s, n - 1, l));
    }
    Ok(out)
}

/// BIO tags for flat mentions; nested or overlapping mentions are rejected.
pub fn mentions_to_bio(n_tokens: usize, mentions: &[Mention]) -> Result<Vec<String>> {
    let mut tags = vec!["O".to_string(); n_tokens];
    let mut sorted: Vec<&Mention> = mentions.iter().collect();
    sorted.sort();
    for m in sorted {
        if m.end >= n_tokens {
            return Err(Error::SpanOutOfRange { start: m.start, end: m.end, len: n_tokens });
        }
        if tags[m.start..=m.end].iter().any(|t| t != "O") {
            return Err(Error::Invalid(format!("mention {m} overlaps another; BIO holds only flat mentions")));
        }
        tags[m.start] = format!("B-{}", m.label);
        for t in &mut tags[m.start + 1..=m.end] {
            *t = format!("I-{}", m.label);
        }
    }
    Ok(tags)
}

pub fn write_bio(path: &Path, examples: &[Example]) -> Result<()> {
    let mut text = String::new();
    for (k, ex) in examples.iter().enumerate() {
        if k > 0 {
            text.push('\n');
        }
        let tags = mentions_to_bio(ex.sentence.len(), &ex.mentions)?;
        for (tok, tag) in ex.sentence.tokens.iter().zip(tags) {
            let _ = writeln!(text, "{tok}\t{tag}");
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads nested records with the optional per-mention scores written by
/// prediction. Crossing same-type pairs are kept (they still count for
/// scoring) but logged, since they cannot be trained on.
pub fn read_nested_with_scores(path: &Path) -> Result<Vec<(Example, Vec<Option<f64>>)>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: NestedRecord = serde_json::from_str(&line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        let n = rec.tokens.len();
        let mut seen = BTreeSet::new();
        let mut mentions = Vec::with_capacity(rec.mentions.len());
        let mut scores = Vec::with_capacity(rec.mentions.len());
        for m in rec.mentions {
            if m.start > m.end || m.end >= n {
                return Err(parse_err(path, i + 1, format!("span [{}, {}] out of range for {n} tokens", m.start, m.end)));
            }
            let mention = Mention::new(m.start, m.end, m.label);
            if !seen.insert(mention.clone()) {
                return Err(parse_err(path, i + 1, format!("duplicate mention {mention}")));
            }
            mentions.push(mention);
            scores.push(m.score);
        }
        if let Some((a, b)) = first_crossing_pair(&mentions) {
            log::warn!("{}:{}: crossing mentions {a} and {b} cannot be encoded", path.display(), i + 1);
        }
        let mut sentence = Sentence::new(rec.tokens);
        sentence.source_dataset = rec.dataset;
        out.push((Example { sentence, mentions }, scores));
    }
    Ok(out)
}

pub fn read_nested(path: &Path) -> Result<Vec<Example>> {
    Ok(read_nested_with_scores(path)?.into_iter().map(|(e, _)| e).collect())
}

/// One JSON record per sentence.
pub fn nested_line(sentence: &Sentence, mentions: &[OutputMention]) -> String {
    let rec = NestedRecord {
        tokens: sentence.tokens.clone(),
        mentions: mentions
            .iter()
            .map(|m| NestedMention {
                start: m.mention.start,
                end: m.mention.end,
                label: m.mention.label.clone(),
                score: m.score,
            })
            .collect(),
        dataset: sentence.source_dataset.clone(),
    };
    serde_json::to_string(&rec).expect("records serialize")
}

pub fn write_nested(path: &Path, examples: &[Example]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for ex in examples {
        let ms: Vec<OutputMention> = ex.mentions.iter().map(|m| OutputMention { mention: m.clone(), score: None }).collect();
        writeln!(file, "{}", nested_line(&ex.sentence, &ms)).map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<Example>> {
    match format {
        CorpusFormat::Bio => read_bio(path),
        CorpusFormat::Nested => read_nested(path),
    }
}

pub fn write_corpus(path: &Path, format: CorpusFormat, examples: &[Example]) -> Result<()> {
    match format {
        CorpusFormat::Bio => write_bio(path, examples),
        CorpusFormat::Nested => write_nested(path, examples),
    }
}

/// Sorted distinct mention types over the given examples.
pub fn observed_types<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Vec<String> {
    let set: BTreeSet<&str> = examples.into_iter().flat_map(|e| e.mentions.iter().map(|m| m.label.as_str())).collect();
    set.into_iter().map(String::from).collect()
}

pub fn load_dataset(config: &DatasetConfig) -> Result<DatasetSpec> {
    let read = |p: &Option<std::path::PathBuf>| match p {
        Some(p) => read_corpus(p, config.format),
        None => Ok(Vec::new()),
    };
    let train = read_corpus(&config.train, config.format)?;
    let dev = read(&config.dev)?;
    let test = read(&config.test)?;
    let types = match &config.types {
        Some(t) => t.clone(),
        None => observed_types(train.iter().chain(&dev)),
    };
    let mut spec = DatasetSpec { name: config.name.clone(), types, train, dev, test };
    for split in [&mut spec.train, &mut spec.dev, &mut spec.test] {
        for ex in split.iter_mut() {
            ex.sentence.source_dataset = Some(config.name.clone());
        }
    }
    spec.validate()?;
    Ok(spec)
}

/// Splits the train and dev sentences 50/50 at random; half `a` keeps only
/// `types_a` mentions, half `b` only `types_b`. The test split is left to the
/// fully annotated source, so both halves come back without one.
pub fn synthetic_split(
    dataset: &DatasetSpec,
    types_a: &[String],
    types_b: &[String],
    names: (&str, &str),
    seed: u64,
) -> Result<(DatasetSpec, DatasetSpec)> {
    if types_a.is_empty() || types_b.is_empty() {
        return Err(Error::Config("both sides of the type partition must be non-empty".into()));
    }
    if let Some(t) = types_a.iter().find(|t| types_b.contains(t)) {
        return Err(Error::Config(format!("type `{t}` is on both sides of the partition")));
    }
    if let Some(t) = types_a.iter().chain(types_b).find(|t| !dataset.types.contains(t)) {
        return Err(Error::UnknownLabel(format!("{t} (not a type of {})", dataset.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = DatasetSpec { name: names.0.into(), types: types_a.to_vec(), ..Default::default() };
    let mut b = DatasetSpec { name: names.1.into(), types: types_b.to_vec(), ..Default::default() };
    for (split, examples) in [("train", &dataset.train), ("dev", &dataset.dev)] {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let half = examples.len().div_ceil(2);
        let mut first: Vec<usize> = order[..half].to_vec();
        let mut second: Vec<usize> = order[half..].to_vec();
        first.sort_unstable();
        second.sort_unstable();
        let keep = |idx: &[usize], types: &[String], name: &str| -> Vec<Example> {
            idx.iter()
                .map(|&i| {
                    let ex = &examples[i];
                    let mut sentence = ex.sentence.clone();
                    sentence.source_dataset = Some(name.to_string());
                    Example {
                        sentence,
                        mentions: ex.mentions.iter().filter(|m| types.contains(&m.label)).cloned().collect(),
                    }
                })
                .collect()
        };
        let (ea, eb) = (keep(&first, types_a, names.0), keep(&second, types_b, names.1));
        if split == "train" {
            (a.train, b.train) = (ea, eb);
        } else {
            (a.dev, b.dev) = (ea, eb);
        }
    }
    Ok((a, b))
}

/// Mention counts per `(split, type)`, plus sentence counts per split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusStats {
    pub sentences: BTreeMap<String, usize>,
    pub mentions: BTreeMap<(String, String), usize>,
}

pub fn corpus_stats(dataset: &DatasetSpec) -> CorpusStats {
    let mut stats = CorpusStats::default();
    for (split, examples) in dataset.splits() {
        if examples.is_empty() {
            continue;
        }
        stats.sentences.insert(split.into(), examples.len());
        for m in examples.iter().flat_map(|e| &e.mentions) {
            *stats.mentions.entry((split.into(), m.label.clone())).or_default() += 1;
        }
    }
    stats
}

impl CorpusStats {
    /// CSV with header `dataset,split,type,mentions`, one row per split and
    /// type, in split order then type order.
    pub fn to_csv(&self, dataset: &str) -> String {
        let mut out = String::from("dataset,split,type,mentions\n");
        for split in ["train", "dev", "test"] {
            for ((s, t), n) in &self.mentions {
                if s == split {
                    let _ = writeln!(out, "{dataset},{s},{t},{n}");
                }
            }
        }
        out
    }

    pub fn total(&self, split: &str, entity_type: &str) -> usize {
        self.mentions.get(&(split.to_string(), entity_type.to_string())).copied().unwrap_or(0)
    }
}
