mod common;

use approx::assert_abs_diff_eq;
use sru_ner::eval::{evaluate_disjoint, evaluate_merged, Counts};

use common::four_corpus_fixture;

#[test]
fn four_corpus_fixture_counts() {
    let (registry, gold, pred) = four_corpus_fixture();
    let disjoint = evaluate_disjoint(&pred, &gold, "BC5", &registry).unwrap();
    assert_eq!(disjoint.overall, Counts { tp: 1, fp: 1, fn_: 2 });
    let merged = evaluate_merged(&pred, &gold, "BC5", &registry).unwrap();
    assert_eq!(merged.overall, Counts { tp: 2, fp: 2, fn_: 1 });
    assert_eq!(merged.per_type["Chemical"], Counts { tp: 1, fp: 1, fn_: 0 });
    assert_eq!(merged.per_type["Disease"], Counts { tp: 1, fp: 1, fn_: 1 });
    assert!(!merged.per_type.contains_key("Protein"));
}

#[test]
fn merged_recall_exceeds_disjoint_on_the_fixture() {
    let (registry, gold, pred) = four_corpus_fixture();
    let d = evaluate_disjoint(&pred, &gold, "BC5", &registry).unwrap();
    let m = evaluate_merged(&pred, &gold, "BC5", &registry).unwrap();
    assert!(m.recall() > d.recall());
    assert_abs_diff_eq!(d.f1(), 0.4, epsilon = 1e-12);
    assert_abs_diff_eq!(m.f1(), 4.0 / 7.0, epsilon = 1e-12);
}
