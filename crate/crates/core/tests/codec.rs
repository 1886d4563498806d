mod common;

use proptest::prelude::*;
use sru_ner::codec::{decode_actions, encode_mentions, ActionSequence, ActionVocabulary, Mention, Sentence};
use sru_ner::trainer::pack_actions;

use common::{all_nested_sets, genia, mention_set, GENIA_ACTIONS};

#[test]
fn genia_sentence_encodes_to_the_reference_sequence() {
    let (s, m, v) = genia();
    let seq = encode_mentions(&s, &m, &v).unwrap();
    assert_eq!(seq.render(&v), GENIA_ACTIONS);
    let back = decode_actions(&seq, &s, &v);
    assert_eq!(mention_set(&back.mention_list()), mention_set(&m));
    assert!(back.diagnostics.is_clean());
}

#[test]
fn mention_order_does_not_change_the_encoding() {
    let (s, mut m, v) = genia();
    m.reverse();
    assert_eq!(encode_mentions(&s, &m, &v).unwrap().render(&v), GENIA_ACTIONS);
}

#[test]
fn exhaustive_round_trip_up_to_four_tokens() {
    let mut checked = 0;
    for labels in [vec!["X"], vec!["X", "Y"]] {
        let vocab = ActionVocabulary::new(labels.clone()).unwrap();
        for n in 1..=4 {
            let sentence = Sentence::new((0..n).map(|i| format!("w{i}")));
            for set in all_nested_sets(n, &labels) {
                let seq = encode_mentions(&sentence, &set, &vocab).unwrap();
                let decoded = decode_actions(&seq, &sentence, &vocab);
                assert!(decoded.diagnostics.is_clean(), "{set:?}");
                assert_eq!(mention_set(&decoded.mention_list()), mention_set(&set), "n={n}");
                let again = encode_mentions(&sentence, &decoded.mention_list(), &vocab).unwrap();
                assert_eq!(again, seq);
                checked += 1;
            }
        }
    }
    // 1 + 2 + 5 + 14 non-crossing span sets for one label, far more for two.
    assert!(checked > 10_000, "only {checked} sets");
}

#[test]
fn packed_rows_follow_the_shift_schedule() {
    let (s, m, v) = genia();
    let seq = encode_mentions(&s, &m, &v).unwrap();
    let g = pack_actions(seq.actions(), &v);
    assert_eq!(g.ncols(), v.len());
    assert_eq!(g.row(g.nrows() - 1)[ActionVocabulary::END], 1.0);
    let shifts = g.rows().into_iter().filter(|r| r[ActionVocabulary::SHIFT] == 1.0).count();
    assert_eq!(shifts, s.len());
}

fn arb_case() -> impl Strategy<Value = (usize, Vec<Mention>)> {
    (1usize..12).prop_flat_map(|n| {
        let span = (0..n).prop_flat_map(move |s| (Just(s), s..n));
        let mention = (span, prop_oneof![Just("A"), Just("B"), Just("C")]).prop_map(|((s, e), l)| Mention::new(s, e, l));
        (Just(n), proptest::collection::vec(mention, 0..8))
    })
}

fn crossing(a: &Mention, b: &Mention) -> bool {
    (a.start < b.start && b.start <= a.end && a.end < b.end) || (b.start < a.start && a.start <= b.end && b.end < a.end)
}

proptest! {
    #[test]
    fn encode_decode_is_identity_on_nested_sets((n, raw) in arb_case()) {
        let mut set: Vec<Mention> = Vec::new();
        for m in raw {
            if !set.iter().any(|o| crossing(o, &m) || *o == m) {
                set.push(m);
            }
        }
        let vocab = ActionVocabulary::new(["A", "B", "C"]).unwrap();
        let sentence = Sentence::new((0..n).map(|i| format!("t{i}")));
        let seq = encode_mentions(&sentence, &set, &vocab).unwrap();
        let shifts = seq.actions().iter().filter(|a| **a == sru_ner::codec::Action::Shift).count();
        prop_assert_eq!(shifts, n);
        prop_assert_eq!(seq.len(), n + 1 + 2 * set.len());
        let decoded = decode_actions(&seq, &sentence, &vocab);
        prop_assert_eq!(mention_set(&decoded.mention_list()), mention_set(&set));
        let text = seq.render(&vocab);
        prop_assert_eq!(ActionSequence::parse(&text, &vocab).unwrap(), seq);
    }
}
