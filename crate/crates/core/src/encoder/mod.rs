//! Contextual sentence encoders and subword max-pooling.
//!
//! An [`Encoder`] turns a word's text into subword ids and runs a forward pass
//! over `[CLS] pieces… [SEP]`. [`encode_sentence`] pools the subword rows of
//! each word into one row, producing the `(N + 2) × d` matrix consumed by the
//! action generator.

mod bert;
mod toy;
mod wordpiece;

use std::path::PathBuf;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::codec::Sentence;
use crate::error::{Error, Result};

pub use bert::{BertConfig, BertEncoder};
pub use toy::ToyEncoder;
pub use wordpiece::WordPiece;

/// Default encoder window, including the two special positions.
pub const DEFAULT_MAX_TOKENS: usize = 405;

pub trait Encoder: Send + Sync {
    /// Embedding width `d_enc`.
    fn dim(&self) -> usize;

    /// Largest accepted sequence length, counting `[CLS]` and `[SEP]`.
    fn max_positions(&self) -> usize;

    /// Subword ids for one word. Never empty.
    fn tokenize_word(&self, word: &str) -> Vec<usize>;

    /// Runs the encoder over `[CLS] pieces [SEP]` and returns one row per
    /// position; row 0 is `[CLS]` and the last row is `[SEP]`.
    fn forward(&self, g: &mut Graph<'_>, pieces: &[usize], rng: Option<&mut ChaCha8Rng>) -> Var;

    /// Everything besides parameter tensors needed to rebuild this encoder.
    fn assets(&self) -> serde_json::Value;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Toy,
    Pretrained,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Free-form model name, recorded in manifests.
    pub name: String,
    pub d_enc: usize,
    /// Directory holding `config.json`, `vocab.txt` and `model.safetensors`
    /// for the pretrained kind.
    pub path: Option<PathBuf>,
    pub max_tokens: usize,
    /// Toy encoder: number of hashed lookup rows.
    pub buckets: usize,
    /// Toy encoder: characters per subword piece.
    pub piece_chars: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Toy,
            name: "toy".into(),
            d_enc: 32,
            path: None,
            max_tokens: DEFAULT_MAX_TOKENS,
            buckets: 2048,
            piece_chars: 4,
        }
    }
}

/// Builds an encoder and registers its parameters in `store`.
///
/// With `assets` (taken from a checkpoint) the pretrained kind is rebuilt
/// without touching the original model directory; the parameter values are
/// expected to be overwritten by the caller.
pub fn build_encoder(
    config: &EncoderConfig,
    store: &mut ParamStore,
    seed: u64,
    assets: Option<&serde_json::Value>,
) -> Result<Box<dyn Encoder>> {
    match config.kind {
        EncoderKind::Toy => Ok(Box::new(ToyEncoder::new(config, store, seed)?)),
        EncoderKind::Pretrained => match assets {
            Some(a) => Ok(Box::new(BertEncoder::from_assets(a, config.max_tokens, store)?)),
            None => {
                let dir = config
                    .path
                    .as_ref()
                    .ok_or_else(|| Error::Config("encoder.path is required for the pretrained kind".into()))?;
                let enc = BertEncoder::load(dir, config.max_tokens, store)?;
                if enc.dim() != config.d_enc {
                    log::warn!("encoder.d_enc = {} but the model width is {}; using the model width", config.d_enc, enc.dim());
                }
                Ok(Box::new(enc))
            }
        },
    }
}

/// The encoded sentence `S`: rows `[CLS, w_1, …, w_N, SEP]`.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSentence {
    pub matrix: Var,
    pub n_words: usize,
}

impl EncodedSentence {
    pub fn rows(&self) -> usize {
        self.n_words + 2
    }
}

/// Row groups for pooling: `[CLS]`, one contiguous group per word, `[SEP]`.
pub fn word_groups(piece_counts: &[usize]) -> Vec<(usize, usize)> {
    let mut groups = Vec::with_capacity(piece_counts.len() + 2);
    groups.push((0, 1));
    let mut at = 1;
    for &c in piece_counts {
        groups.push((at, at + c));
        at += c;
    }
    groups.push((at, at + 1));
    groups
}

pub fn encode_sentence(
    g: &mut Graph<'_>,
    sentence: &Sentence,
    encoder: &dyn Encoder,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<EncodedSentence> {
    if sentence.is_empty() {
        return Err(Error::EmptySentence);
    }
    let per_word: Vec<Vec<usize>> = sentence.tokens.iter().map(|w| encoder.tokenize_word(w)).collect();
    let counts: Vec<usize> = per_word.iter().map(Vec::len).collect();
    debug_assert!(counts.iter().all(|&c| c > 0));
    let needed = counts.iter().sum::<usize>() + 2;
    if needed > encoder.max_positions() {
        return Err(Error::SentenceTooLong { needed, limit: encoder.max_positions() });
    }
    let pieces: Vec<usize> = per_word.into_iter().flatten().collect();
    let hidden = encoder.forward(g, &pieces, rng);
    let matrix = g.max_pool_rows(hidden, &word_groups(&counts));
    Ok(EncodedSentence { matrix, n_words: sentence.len() })
}
