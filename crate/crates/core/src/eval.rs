//! Exact-match mention scoring under the two multi-dataset scenarios.
//!
//! Predictions carry disjoint-union labels (`BC5_Chemical`), gold mentions
//! carry the source dataset's own types (`Chemical`). In the disjoint
//! scenario only predictions whose label belongs to the source dataset are
//! kept. In the merged scenario every prediction has its dataset prefix
//! stripped and is kept if the bare type is one of the source's types;
//! identical spans produced this way count once.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::Mention;
use crate::error::{Error, Result};
use crate::trainer::LabelRegistry;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Disjoint,
    Merged,
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(Self::Disjoint),
            "merged" => Ok(Self::Merged),
            _ => Err(Error::Config(format!("unknown scenario `{s}` (expected disjoint or merged)"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Disjoint => "disjoint",
            Self::Merged => "merged",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalReport {
    pub scenario: Scenario,
    pub per_type: BTreeMap<String, Counts>,
    pub overall: Counts,
}

#[derive(Serialize)]
struct CountsRecord {
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    precision: f64,
    recall: f64,
    f1: f64,
}

impl From<Counts> for CountsRecord {
    fn from(c: Counts) -> Self {
        Self { tp: c.tp, fp: c.fp, fn_: c.fn_, precision: c.precision(), recall: c.recall(), f1: c.f1() }
    }
}

#[derive(Serialize)]
struct ReportRecord {
    scenario: Scenario,
    overall: CountsRecord,
    per_type: BTreeMap<String, CountsRecord>,
}

impl EvalReport {
    pub fn new(scenario: Scenario) -> Self {
        Self { scenario, per_type: BTreeMap::new(), overall: Counts::default() }
    }

    pub fn precision(&self) -> f64 {
        self.overall.precision()
    }

    pub fn recall(&self) -> f64 {
        self.overall.recall()
    }

    pub fn f1(&self) -> f64 {
        self.overall.f1()
    }

    /// Scores one sentence. Both sides must already use bare types.
    pub fn add_sentence(&mut self, pred: &BTreeSet<Mention>, gold: &BTreeSet<Mention>) {
        for m in pred {
            let c = self.per_type.entry(m.label.clone()).or_default();
            if gold.contains(m) {
                c.tp += 1;
                self.overall.tp += 1;
            } else {
                c.fp += 1;
                self.overall.fp += 1;
            }
        }
        for m in gold.difference(pred) {
            self.per_type.entry(m.label.clone()).or_default().fn_ += 1;
            self.overall.fn_ += 1;
        }
    }

    /// Adds another report's counts into this one.
    pub fn absorb(&mut self, other: &EvalReport) {
        for (t, c) in &other.per_type {
            self.per_type.entry(t.clone()).or_default().add(*c);
        }
        self.overall.add(other.overall);
    }

    /// Makes sure every listed type has a row, even with zero counts.
    pub fn with_types<'a>(mut self, types: impl IntoIterator<Item = &'a String>) -> Self {
        for t in types {
            self.per_type.entry(t.clone()).or_default();
        }
        self
    }

    pub fn to_json(&self) -> serde_json::Value {
        let record = ReportRecord {
            scenario: self.scenario,
            overall: self.overall.into(),
            per_type: self.per_type.iter().map(|(k, v)| (k.clone(), (*v).into())).collect(),
        };
        serde_json::to_value(record).expect("report serializes")
    }

    /// Aligned text table with percentages.
    pub fn to_table(&self) -> String {
        let width = self.per_type.keys().map(String::len).chain([7]).max().unwrap_or(7);
        let mut out = String::new();
        let _ = writeln!(out, "scenario: {}", self.scenario);
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>6}  {:>9}  {:>7}  {:>7}",
            "type", "tp", "fp", "fn", "precision", "recall", "f1"
        );
        let row = |out: &mut String, name: &str, c: &Counts| {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6}  {:>6}  {:>6}  {:>9.2}  {:>7.2}  {:>7.2}",
                name,
                c.tp,
                c.fp,
                c.fn_,
                100.0 * c.precision(),
                100.0 * c.recall(),
                100.0 * c.f1()
            );
        };
        for (t, c) in &self.per_type {
            row(&mut out, t, c);
        }
        row(&mut out, "overall", &self.overall);
        out
    }
}

/// Predictions that survive the scenario filter, rewritten to bare types.
///
/// Labels unknown to the registry are taken to be bare types already (for
/// instance output written in the merged scenario); the disjoint scenario
/// drops them.
pub fn filter_predictions(
    pred: &[Mention],
    source_dataset: &str,
    scenario: Scenario,
    registry: &LabelRegistry,
) -> Result<BTreeSet<Mention>> {
    let source = registry.dataset(source_dataset)?;
    let mut kept = BTreeSet::new();
    for m in pred {
        let bare = match scenario {
            Scenario::Disjoint => match registry.dataset_of(&m.label) {
                Some(d) if d == source_dataset => registry.merge(&m.label).expect("registered"),
                _ => continue,
            },
            Scenario::Merged => {
                let bare = registry.merge(&m.label).unwrap_or(&m.label);
                if !source.types.iter().any(|t| t == bare) {
                    continue;
                }
                bare
            }
        };
        kept.insert(Mention::new(m.start, m.end, bare));
    }
    Ok(kept)
}

fn evaluate(
    pred: &[Mention],
    gold: &[Mention],
    source_dataset: &str,
    scenario: Scenario,
    registry: &LabelRegistry,
) -> Result<EvalReport> {
    let kept = filter_predictions(pred, source_dataset, scenario, registry)?;
    let gold: BTreeSet<Mention> = gold.iter().cloned().collect();
    let mut report = EvalReport::new(scenario);
    report.add_sentence(&kept, &gold);
    Ok(report)
}

pub fn evaluate_disjoint(
    pred: &[Mention],
    gold: &[Mention],
    source_dataset: &str,
    registry: &LabelRegistry,
) -> Result<EvalReport> {
    evaluate(pred, gold, source_dataset, Scenario::Disjoint, registry)
}

pub fn evaluate_merged(
    pred: &[Mention],
    gold: &[Mention],
    source_dataset: &str,
    registry: &LabelRegistry,
) -> Result<EvalReport> {
    evaluate(pred, gold, source_dataset, Scenario::Merged, registry)
}

/// One sentence to score: union-labelled predictions, bare gold, source.
pub struct Scored<'a> {
    pub pred: &'a [Mention],
    pub gold: &'a [Mention],
    pub source_dataset: &'a str,
}

/// Micro-averaged report over many sentences.
pub fn evaluate_corpus<'a>(
    items: impl IntoIterator<Item = Scored<'a>>,
    scenario: Scenario,
    registry: &LabelRegistry,
) -> Result<EvalReport> {
    let mut report = EvalReport::new(scenario);
    for s in items {
        report.absorb(&evaluate(s.pred, s.gold, s.source_dataset, scenario, registry)?);
    }
    Ok(report)
}
