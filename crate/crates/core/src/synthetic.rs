//! Small generated corpora for smoke runs and tests.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{Mention, Sentence};
use crate::corpus::{DatasetSpec, Example};

fn example(dataset: &str, text: &str, mentions: &[(usize, usize, &str)]) -> Example {
    let mut sentence = Sentence::new(text.split(' '));
    sentence.source_dataset = Some(dataset.into());
    Example { sentence, mentions: mentions.iter().map(|&(s, e, l)| Mention::new(s, e, l)).collect() }
}

/// Eight nested sentences over two datasets: `gene` (DNA, Protein) and
/// `cell` (CellLine, CellType). Training and dev splits are identical.
pub fn toy_nested_corpus() -> (DatasetSpec, DatasetSpec) {
    let gene = vec![
        example(
            "gene",
            "a defective NF - chi B site was completely",
            &[(2, 6, "DNA"), (2, 5, "Protein"), (4, 5, "DNA")],
        ),
        example(
            "gene",
            "the IL - 2 promoter binds NF - kappa B",
            &[(1, 4, "DNA"), (1, 3, "Protein"), (6, 9, "Protein")],
        ),
        example("gene", "expression of the c - fos gene was induced", &[(3, 6, "DNA"), (3, 5, "Protein")]),
        example("gene", "GATA - 1 binds the globin enhancer", &[(0, 2, "Protein"), (5, 6, "DNA"), (5, 5, "Protein")]),
    ];
    let cell = vec![
        example(
            "cell",
            "human T cells and Jurkat T cells were stimulated",
            &[(0, 2, "CellType"), (1, 2, "CellType"), (4, 6, "CellLine")],
        ),
        example("cell", "in peripheral blood monocytes the response was weak", &[(1, 3, "CellType")]),
        example(
            "cell",
            "HeLa cells and activated B cells differ",
            &[(0, 1, "CellLine"), (3, 5, "CellType"), (4, 5, "CellType")],
        ),
        example("cell", "U937 cells lack the receptor", &[(0, 1, "CellLine")]),
    ];
    let spec = |name: &str, types: &[&str], examples: Vec<Example>| DatasetSpec {
        name: name.into(),
        types: types.iter().map(|t| t.to_string()).collect(),
        train: examples.clone(),
        dev: examples,
        test: Vec::new(),
    };
    (spec("gene", &["DNA", "Protein"], gene), spec("cell", &["CellLine", "CellType"], cell))
}

const CHEMICALS: &[&str] = &[
    "cisplatin",
    "doxorubicin",
    "lithium",
    "haloperidol",
    "nicotine",
    "cocaine",
    "morphine",
    "heparin",
    "warfarin",
    "caffeine",
    "tamoxifen",
    "ketamine",
    "methotrexate",
    "amiodarone",
    "gentamicin",
    "valproic acid",
    "sodium nitrite",
    "carbon tetrachloride",
];

const DISEASES: &[&str] = &[
    "hepatitis",
    "nephrotoxicity",
    "heart failure",
    "hypertension",
    "seizures",
    "renal failure",
    "cardiomyopathy",
    "acute kidney injury",
    "bradycardia",
    "delirium",
    "liver injury",
    "neutropenia",
    "parkinsonism",
    "arrhythmia",
    "tardive dyskinesia",
];

const TEMPLATES: &[&str] = &[
    "{C} induced {D} in {N} patients .",
    "the risk of {D} after {C} therapy was assessed .",
    "{C} treatment was associated with {D} and {D} .",
    "we report a case of {D} following {C} overdose .",
    "rats received {C} and developed {D} within {N} days .",
    "no {D} was observed in the {C} group .",
    "{C} and {C} reduced {D} .",
    "patients with {D} were given {C} .",
    "two cases of {X} toxicity were reported .",
    "{X} poisoning caused {D} in {N} children .",
    "the mechanism of {C} action remains unclear .",
    "{D} is a common complication in elderly patients .",
];

/// Builds one sentence from a template; `{X}` yields a chemical nested in a
/// disease mention spanning it and the next word.
fn fill(template: &str, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<Mention>) {
    let mut tokens: Vec<String> = Vec::new();
    let mut mentions = Vec::new();
    for slot in template.split(' ') {
        let start = tokens.len();
        match slot {
            "{C}" | "{D}" | "{X}" => {
                let pool = if slot == "{D}" { DISEASES } else { CHEMICALS };
                let name = pool.choose(rng).expect("non-empty pool");
                tokens.extend(name.split(' ').map(String::from));
                let end = tokens.len() - 1;
                let label = if slot == "{D}" { "Disease" } else { "Chemical" };
                mentions.push(Mention::new(start, end, label));
                if slot == "{X}" {
                    mentions.push(Mention::new(start, end + 1, "Disease"));
                }
            }
            "{N}" => tokens.push(rng.random_range(2..60).to_string()),
            word => tokens.push(word.to_string()),
        }
    }
    mentions.sort();
    mentions.dedup();
    (tokens, mentions)
}

/// A templated two-type corpus (`Chemical`, `Disease`) with the given split
/// sizes. Deterministic per seed.
pub fn chemical_disease_corpus(name: &str, sizes: (usize, usize, usize), seed: u64) -> DatasetSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |n: usize| -> Vec<Example> {
        (0..n)
            .map(|_| {
                let template = TEMPLATES.choose(&mut rng).expect("non-empty templates");
                let (tokens, mentions) = fill(template, &mut rng);
                let mut sentence = Sentence::new(tokens);
                sentence.source_dataset = Some(name.into());
                Example { sentence, mentions }
            })
            .collect()
    };
    let train = make(sizes.0);
    let dev = make(sizes.1);
    let test = make(sizes.2);
    DatasetSpec { name: name.into(), types: vec!["Chemical".into(), "Disease".into()], train, dev, test }
}
