use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use super::{Encoder, EncoderConfig};
use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

/// A small trainable stand-in for a pretrained encoder.
///
/// Words are cut into pieces of `piece_chars` characters (continuations are
/// prefixed with `##`), each piece is hashed into a seeded lookup table, fixed
/// sinusoidal positions are added, and one residual self-attention layer
/// mixes the sequence.
pub struct ToyEncoder {
    dim: usize,
    buckets: usize,
    piece_chars: usize,
    max_positions: usize,
    lookup: ParamId,
    special: ParamId,
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Transformer-style fixed position table, `n × d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(pos, i)| {
        let angle = pos as f64 / 10_000f64.powf((i / 2 * 2) as f64 / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

impl ToyEncoder {
    pub fn new(config: &EncoderConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        if config.d_enc < 2 {
            return Err(Error::Config("encoder.d_enc must be at least 2".into()));
        }
        if config.buckets == 0 || config.piece_chars == 0 {
            return Err(Error::Config("encoder.buckets and encoder.piece_chars must be positive".into()));
        }
        let d = config.d_enc;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746f_795f_656e_63);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let attn = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
        let mut sample = |r: usize, c: usize, dist: &Normal<f64>| Array2::from_shape_fn((r, c), |_| dist.sample(&mut rng));

        let lookup = store.add("encoder.lookup", ParamGroup::Encoder, sample(config.buckets, d, &unit))?;
        let special = store.add("encoder.special", ParamGroup::Encoder, sample(2, d, &unit))?;
        let query = store.add("encoder.attn.query", ParamGroup::Encoder, sample(d, d, &attn))?;
        let key = store.add("encoder.attn.key", ParamGroup::Encoder, sample(d, d, &attn))?;
        let value = store.add("encoder.attn.value", ParamGroup::Encoder, sample(d, d, &attn))?;
        Ok(Self {
            dim: d,
            buckets: config.buckets,
            piece_chars: config.piece_chars,
            max_positions: config.max_tokens,
            lookup,
            special,
            query,
            key,
            value,
        })
    }

    /// The string pieces a word is split into.
    pub fn pieces(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        if chars.is_empty() {
            return vec![String::new()];
        }
        chars
            .chunks(self.piece_chars)
            .enumerate()
            .map(|(i, c)| {
                let s: String = c.iter().collect();
                if i == 0 {
                    s
                } else {
                    format!("##{s}")
                }
            })
            .collect()
    }
}

impl Encoder for ToyEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn max_positions(&self) -> usize {
        self.max_positions
    }

    fn tokenize_word(&self, word: &str) -> Vec<usize> {
        self.pieces(word).iter().map(|p| (fnv1a(p.as_bytes()) % self.buckets as u64) as usize).collect()
    }

    fn forward(&self, g: &mut Graph<'_>, pieces: &[usize], _rng: Option<&mut ChaCha8Rng>) -> Var {
        let lookup = g.param(self.lookup);
        let special = g.param(self.special);
        let cls = g.gather_rows(special, vec![0]);
        let sep = g.gather_rows(special, vec![1]);
        let body = g.gather_rows(lookup, pieces.to_vec());
        let x = g.stack_rows(vec![cls, body, sep]);
        let positions = g.constant(sinusoidal_positions(pieces.len() + 2, self.dim));
        let x = g.add(x, positions);

        let (wq, wk, wv) = (g.param(self.query), g.param(self.key), g.param(self.value));
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let scores = g.matmul_t(q, k);
        let scores = g.scale_const(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = g.softmax_rows(scores);
        let mixed = g.matmul(attn, v);
        g.add(x, mixed)
    }

    fn assets(&self) -> serde_json::Value {
        json!({ "buckets": self.buckets, "piece_chars": self.piece_chars })
    }
}
