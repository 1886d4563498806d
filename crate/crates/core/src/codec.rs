//! Conversion between nested typed mentions and transition action sequences.
//!
//! The action set over `M` entity types has `2M + 2` members: `SH` consumes a
//! word, `EOA` terminates, `TR(e)` opens a mention of type `e` at the word
//! cursor and `RE(e)` closes the most recently opened mention of type `e` at
//! the last shifted word. Each entity type has its own stack, so mentions of
//! different types may overlap freely while same-type mentions must nest.

use std::collections::{HashMap, HashSet};
use std::fmt;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability above which a `TR`/`RE` entry in a decoded row fires.
pub const ACTION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_dataset: Option<String>,
}

impl Sentence {
    pub fn new<S: Into<String>>(tokens: impl IntoIterator<Item = S>) -> Self {
        Self { tokens: tokens.into_iter().map(Into::into).collect(), source_dataset: None }
    }

    pub fn with_source(mut self, dataset: impl Into<String>) -> Self {
        self.source_dataset = Some(dataset.into());
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A typed token span with inclusive bounds.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mention {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub label: String,
}

impl Mention {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Self { start, end, label: label.into() }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// True when the two spans overlap without one containing the other.
    pub fn crosses(&self, other: &Mention) -> bool {
        let (a, b) = if self.start <= other.start { (self, other) } else { (other, self) };
        a.start < b.start && b.start <= a.end && a.end < b.end
    }
}

impl fmt::Display for Mention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{},{}]", self.label, self.start, self.end)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Shift,
    End,
    Open(usize),
    Close(usize),
}

/// The ordered action set for a list of entity labels.
///
/// Column layout: `SH`, `EOA`, then `TR(e)`, `RE(e)` for each label in order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct ActionVocabulary {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for ActionVocabulary {
    fn from(labels: Vec<String>) -> Self {
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self { labels, index }
    }
}

impl From<ActionVocabulary> for Vec<String> {
    fn from(v: ActionVocabulary) -> Self {
        v.labels
    }
}

impl ActionVocabulary {
    pub const SHIFT: usize = 0;
    pub const END: usize = 1;

    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l) {
                return Err(Error::Invalid(format!("duplicate label `{l}` in vocabulary")));
            }
        }
        Ok(labels.into())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    /// `2M + 2`.
    pub fn len(&self) -> usize {
        2 * self.labels.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    pub fn index_of(&self, action: Action) -> usize {
        match action {
            Action::Shift => Self::SHIFT,
            Action::End => Self::END,
            Action::Open(e) => 2 + 2 * e,
            Action::Close(e) => 3 + 2 * e,
        }
    }

    pub fn action(&self, idx: usize) -> Action {
        assert!(idx < self.len(), "action index {idx} out of range");
        match idx {
            Self::SHIFT => Action::Shift,
            Self::END => Action::End,
            i if i % 2 == 0 => Action::Open((i - 2) / 2),
            i => Action::Close((i - 3) / 2),
        }
    }

    pub fn actions(&self) -> impl Iterator<Item = Action> + '_ {
        (0..self.len()).map(|i| self.action(i))
    }

    pub fn format_action(&self, action: Action) -> String {
        match action {
            Action::Shift => "SH".into(),
            Action::End => "EOA".into(),
            Action::Open(e) => format!("TR:{}", self.labels[e]),
            Action::Close(e) => format!("RE:{}", self.labels[e]),
        }
    }

    pub fn parse_action(&self, token: &str) -> Result<Action> {
        let lookup = |l: &str| self.label_index(l).ok_or_else(|| Error::UnknownLabel(l.into()));
        match token {
            "SH" => Ok(Action::Shift),
            "EOA" => Ok(Action::End),
            t => match t.split_once(':') {
                Some(("TR", l)) => Ok(Action::Open(lookup(l)?)),
                Some(("RE", l)) => Ok(Action::Close(lookup(l)?)),
                _ => Err(Error::UnknownAction(t.into())),
            },
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ActionSequence(pub Vec<Action>);

impl ActionSequence {
    pub fn actions(&self) -> &[Action] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Whitespace-separated `SH`, `EOA`, `TR:<label>`, `RE:<label>` tokens.
    pub fn render(&self, vocab: &ActionVocabulary) -> String {
        self.0.iter().map(|a| vocab.format_action(*a)).collect::<Vec<_>>().join(" ")
    }

    pub fn parse(text: &str, vocab: &ActionVocabulary) -> Result<Self> {
        text.split_whitespace().map(|t| vocab.parse_action(t)).collect::<Result<Vec<_>>>().map(Self)
    }
}

/// Checks span bounds, label membership, duplicates and same-type crossings.
pub fn validate_mentions(n_tokens: usize, mentions: &[Mention], vocab: &ActionVocabulary) -> Result<()> {
    let mut seen = HashSet::new();
    for m in mentions {
        if m.start > m.end || m.end >= n_tokens {
            return Err(Error::SpanOutOfRange { start: m.start, end: m.end, len: n_tokens });
        }
        if vocab.label_index(&m.label).is_none() {
            return Err(Error::UnknownLabel(m.label.clone()));
        }
        if !seen.insert(m) {
            return Err(Error::DuplicateMention { start: m.start, end: m.end, label: m.label.clone() });
        }
    }
    if let Some((a, b)) = first_crossing_pair(mentions) {
        return Err(Error::CrossingSpans {
            label: a.label.clone(),
            a_start: a.start,
            a_end: a.end,
            b_start: b.start,
            b_end: b.end,
        });
    }
    Ok(())
}

/// First pair of same-type mentions that partially overlap, if any.
pub fn first_crossing_pair(mentions: &[Mention]) -> Option<(&Mention, &Mention)> {
    for (i, a) in mentions.iter().enumerate() {
        for b in &mentions[i + 1..] {
            if a.label == b.label && a.crosses(b) {
                return Some((a, b));
            }
        }
    }
    None
}

/// Encodes mentions into the canonical action sequence.
///
/// Before the `SH` of word `i` come the `TR`s of mentions starting at `i`,
/// longest first; after the `SH` of word `j` come the `RE`s of mentions ending
/// at `j`, shortest first. Equal lengths fall back to vocabulary label order.
pub fn encode_mentions(sentence: &Sentence, mentions: &[Mention], vocab: &ActionVocabulary) -> Result<ActionSequence> {
    let n = sentence.len();
    if n == 0 {
        return Err(Error::EmptySentence);
    }
    validate_mentions(n, mentions, vocab)?;

    let keyed: Vec<(usize, usize, usize)> = mentions
        .iter()
        .map(|m| (m.start, m.end, vocab.label_index(&m.label).expect("validated")))
        .collect();

    let mut actions = Vec::with_capacity(n + 2 * mentions.len() + 1);
    for word in 0..n {
        let mut opens: Vec<_> = keyed.iter().filter(|m| m.0 == word).collect();
        opens.sort_by_key(|&&(s, e, l)| (std::cmp::Reverse(e - s), l));
        actions.extend(opens.into_iter().map(|&(_, _, l)| Action::Open(l)));

        actions.push(Action::Shift);

        let mut closes: Vec<_> = keyed.iter().filter(|m| m.1 == word).collect();
        closes.sort_by_key(|&&(s, e, l)| (e - s, l));
        actions.extend(closes.into_iter().map(|&(_, _, l)| Action::Close(l)));
    }
    actions.push(Action::End);
    Ok(ActionSequence(actions))
}

/// Counters for input the decoder tolerated rather than rejected.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeDiagnostics {
    /// `RE(e)` with no open span of type `e`.
    pub ignored_reduces: usize,
    /// Spans still open when decoding stopped.
    pub unclosed_spans: usize,
    /// `RE(e)` that would close a span before any word of it was shifted.
    pub empty_spans: usize,
    /// `SH` beyond the last word.
    pub excess_shifts: usize,
}

impl DecodeDiagnostics {
    pub fn is_clean(&self) -> bool {
        *self == Self::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredMention {
    #[serde(flatten)]
    pub mention: Mention,
    pub score: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Decoded {
    pub mentions: Vec<ScoredMention>,
    pub diagnostics: DecodeDiagnostics,
}

impl Decoded {
    pub fn mention_list(&self) -> Vec<Mention> {
        self.mentions.iter().map(|m| m.mention.clone()).collect()
    }
}

struct StackDecoder<'v> {
    vocab: &'v ActionVocabulary,
    n: usize,
    cursor: usize,
    stacks: Vec<Vec<(usize, f64)>>,
    seen: HashSet<Mention>,
    out: Decoded,
}

impl<'v> StackDecoder<'v> {
    fn new(vocab: &'v ActionVocabulary, n: usize) -> Self {
        Self {
            vocab,
            n,
            cursor: 0,
            stacks: vec![Vec::new(); vocab.num_labels()],
            seen: HashSet::new(),
            out: Decoded::default(),
        }
    }

    fn shift(&mut self) {
        if self.cursor < self.n {
            self.cursor += 1;
        } else {
            self.out.diagnostics.excess_shifts += 1;
        }
    }

    fn open(&mut self, label: usize, score: f64) {
        self.stacks[label].push((self.cursor, score));
    }

    fn close(&mut self, label: usize, score: f64) {
        let Some((start, open_score)) = self.stacks[label].pop() else {
            self.out.diagnostics.ignored_reduces += 1;
            return;
        };
        if self.cursor <= start {
            self.out.diagnostics.empty_spans += 1;
            return;
        }
        let mention = Mention::new(start, self.cursor - 1, self.vocab.label(label));
        if self.seen.insert(mention.clone()) {
            self.out.mentions.push(ScoredMention { mention, score: 0.5 * (open_score + score) });
        }
    }

    fn finish(mut self) -> Decoded {
        self.out.diagnostics.unclosed_spans += self.stacks.iter().map(Vec::len).sum::<usize>();
        self.out
    }
}

/// Replays an action sequence against per-type stacks.
pub fn decode_actions(sequence: &ActionSequence, sentence: &Sentence, vocab: &ActionVocabulary) -> Decoded {
    let mut dec = StackDecoder::new(vocab, sentence.len());
    for action in sequence.actions() {
        match *action {
            Action::Shift => dec.shift(),
            Action::End => break,
            Action::Open(l) => dec.open(l, 1.0),
            Action::Close(l) => dec.close(l, 1.0),
        }
    }
    dec.finish()
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Decodes per-step sigmoid probabilities (`T × |actions|`) into mentions.
///
/// Rows are read until one whose argmax is `EOA`. In every other row each
/// `RE` above [`ACTION_THRESHOLD`] is applied, then each `TR` above it, and
/// finally the cursor advances if the row's argmax is `SH`.
pub fn decode_probabilities(probs: ArrayView2<'_, f64>, sentence: &Sentence, vocab: &ActionVocabulary) -> Decoded {
    assert_eq!(probs.ncols(), vocab.len(), "probability rows must span the action vocabulary");
    let mut dec = StackDecoder::new(vocab, sentence.len());
    for row in probs.rows() {
        let best = argmax(row.iter().copied());
        if best == ActionVocabulary::END {
            break;
        }
        for l in 0..vocab.num_labels() {
            let p = row[vocab.index_of(Action::Close(l))];
            if p > ACTION_THRESHOLD {
                dec.close(l, p);
            }
        }
        for l in 0..vocab.num_labels() {
            let p = row[vocab.index_of(Action::Open(l))];
            if p > ACTION_THRESHOLD {
                dec.open(l, p);
            }
        }
        if best == ActionVocabulary::SHIFT {
            dec.shift();
        }
    }
    dec.finish()
}
