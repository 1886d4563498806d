use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::codec::{Action, ActionVocabulary, Mention};
use crate::error::{Error, Result};

/// Separator between dataset name and entity type in disjoint-union labels.
pub const LABEL_SEPARATOR: char = '_';

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetLabels {
    pub name: String,
    pub types: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct UnionLabel {
    dataset: usize,
    entity_type: String,
}

/// Disjoint union of per-dataset entity types.
///
/// Type `e` of dataset `D` becomes the label `D_e`, so identically named
/// types from different corpora stay distinct during training. The merge map
/// drops the prefix again.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RegistryRecord", into = "RegistryRecord")]
pub struct LabelRegistry {
    datasets: Vec<DatasetLabels>,
    labels: Vec<String>,
    entries: Vec<UnionLabel>,
    index: HashMap<String, usize>,
    vocab: ActionVocabulary,
}

#[derive(Serialize, Deserialize)]
struct RegistryRecord {
    datasets: Vec<DatasetLabels>,
}

impl TryFrom<RegistryRecord> for LabelRegistry {
    type Error = Error;

    fn try_from(r: RegistryRecord) -> Result<Self> {
        LabelRegistry::new(r.datasets)
    }
}

impl From<LabelRegistry> for RegistryRecord {
    fn from(r: LabelRegistry) -> Self {
        RegistryRecord { datasets: r.datasets }
    }
}

impl LabelRegistry {
    pub fn new(datasets: Vec<DatasetLabels>) -> Result<Self> {
        let mut names = BTreeSet::new();
        let mut labels = Vec::new();
        let mut entries = Vec::new();
        let mut index = HashMap::new();
        for (d, ds) in datasets.iter().enumerate() {
            if ds.name.is_empty() {
                return Err(Error::Config("dataset names must be non-empty".into()));
            }
            if !names.insert(&ds.name) {
                return Err(Error::Config(format!("dataset `{}` listed twice", ds.name)));
            }
            let mut seen = BTreeSet::new();
            for t in &ds.types {
                if !seen.insert(t) {
                    return Err(Error::Config(format!("type `{t}` listed twice for `{}`", ds.name)));
                }
                let label = format!("{}{LABEL_SEPARATOR}{t}", ds.name);
                if index.insert(label.clone(), labels.len()).is_some() {
                    return Err(Error::Config(format!("disjoint-union label `{label}` is ambiguous")));
                }
                labels.push(label);
                entries.push(UnionLabel { dataset: d, entity_type: t.clone() });
            }
        }
        let vocab = ActionVocabulary::new(labels.clone())?;
        Ok(Self { datasets, labels, entries, index, vocab })
    }

    pub fn single(name: &str, types: &[String]) -> Result<Self> {
        Self::new(vec![DatasetLabels { name: name.into(), types: types.to_vec() }])
    }

    pub fn datasets(&self) -> &[DatasetLabels] {
        &self.datasets
    }

    pub fn dataset_index(&self, name: &str) -> Result<usize> {
        self.datasets.iter().position(|d| d.name == name).ok_or_else(|| Error::UnknownDataset(name.into()))
    }

    pub fn dataset(&self, name: &str) -> Result<&DatasetLabels> {
        Ok(&self.datasets[self.dataset_index(name)?])
    }

    /// All disjoint-union labels, in vocabulary order.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Action vocabulary over the disjoint-union labels.
    pub fn vocab(&self) -> &ActionVocabulary {
        &self.vocab
    }

    pub fn union_label(&self, dataset: &str, entity_type: &str) -> Result<String> {
        let ds = self.dataset(dataset)?;
        if !ds.types.iter().any(|t| t == entity_type) {
            return Err(Error::UnknownLabel(format!("{entity_type} (dataset {dataset})")));
        }
        Ok(format!("{dataset}{LABEL_SEPARATOR}{entity_type}"))
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(label)
    }

    /// Dataset that owns a disjoint-union label.
    pub fn dataset_of(&self, label: &str) -> Option<&str> {
        self.index.get(label).map(|&i| self.datasets[self.entries[i].dataset].name.as_str())
    }

    /// The merge map: strips the dataset prefix.
    pub fn merge(&self, label: &str) -> Option<&str> {
        self.index.get(label).map(|&i| self.entries[i].entity_type.as_str())
    }

    /// Rewrites source-typed mentions into disjoint-union labels.
    pub fn to_union(&self, dataset: &str, mentions: &[Mention]) -> Result<Vec<Mention>> {
        mentions
            .iter()
            .map(|m| Ok(Mention::new(m.start, m.end, self.union_label(dataset, &m.label)?)))
            .collect()
    }

    /// Per-action flags: `SH`, `EOA` and the `TR`/`RE` of the dataset's own
    /// types are in-task.
    pub fn task_mask(&self, dataset: &str) -> Result<Vec<bool>> {
        let d = self.dataset_index(dataset)?;
        Ok(self
            .vocab
            .actions()
            .map(|a| match a {
                Action::Shift | Action::End => true,
                Action::Open(l) | Action::Close(l) => self.entries[l].dataset == d,
            })
            .collect())
    }
}
