//! BERT-family encoder loaded from a local Hugging Face style directory
//! (`config.json`, `vocab.txt`, `model.safetensors`).

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Encoder, WordPiece};
use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BertConfig {
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_dropout")]
    pub hidden_dropout_prob: f64,
    #[serde(default = "default_act")]
    pub hidden_act: String,
    pub vocab_size: usize,
}

fn default_type_vocab() -> usize {
    2
}
fn default_ln_eps() -> f64 {
    1e-12
}
fn default_dropout() -> f64 {
    0.1
}
fn default_act() -> String {
    "gelu".into()
}

struct Linear {
    weight: ParamId,
    bias: ParamId,
}

struct Norm {
    gain: ParamId,
    bias: ParamId,
}

struct Layer {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_norm: Norm,
    inter: Linear,
    out: Linear,
    out_norm: Norm,
}

pub struct BertEncoder {
    config: BertConfig,
    tokenizer: WordPiece,
    max_positions: usize,
    word_emb: ParamId,
    pos_emb: ParamId,
    type_emb: ParamId,
    emb_norm: Norm,
    layers: Vec<Layer>,
}

type TensorSource<'a> = dyn FnMut(&str, (usize, usize)) -> Result<Array2<f64>> + 'a;

impl BertEncoder {
    pub fn load(dir: &Path, max_tokens: usize, store: &mut ParamStore) -> Result<Self> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read(&p).map_err(|e| Error::io(p, e))
        };
        let config: BertConfig = serde_json::from_slice(&read("config.json")?)?;
        if config.hidden_act != "gelu" {
            return Err(Error::Config(format!("unsupported activation `{}`", config.hidden_act)));
        }
        let lowercase = match std::fs::read(dir.join("tokenizer_config.json")) {
            Ok(bytes) => serde_json::from_slice::<serde_json::Value>(&bytes)?
                .get("do_lower_case")
                .and_then(|v| v.as_bool())
                .unwrap_or(true),
            Err(_) => true,
        };
        let tokenizer = WordPiece::from_file(&dir.join("vocab.txt"), lowercase)?;
        let bytes = read("model.safetensors")?;
        let tensors = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Config(format!("model.safetensors: {e}")))?;
        let names: HashMap<String, String> = tensors
            .names()
            .into_iter()
            .map(|n| (n.strip_prefix("bert.").unwrap_or(n).to_string(), n.to_string()))
            .collect();
        let mut source = |name: &str, shape: (usize, usize)| -> Result<Array2<f64>> {
            let full = names
                .get(name)
                .or_else(|| names.get(&name.replace(".weight", ".gamma").replace("LayerNorm.bias", "LayerNorm.beta")))
                .ok_or_else(|| Error::Config(format!("model.safetensors lacks `{name}`")))?;
            let view = tensors.tensor(full).map_err(|e| Error::Config(format!("{full}: {e}")))?;
            let data = to_f64(view.dtype(), view.data()).ok_or_else(|| {
                Error::Config(format!("{full}: unsupported dtype {:?}", view.dtype()))
            })?;
            let numel: usize = view.shape().iter().product();
            if numel != shape.0 * shape.1 {
                return Err(Error::Config(format!("{full}: shape {:?}, expected {shape:?}", view.shape())));
            }
            Ok(Array2::from_shape_vec(shape, data).expect("element count checked"))
        };
        Self::build(config, tokenizer, max_tokens, store, &mut source)
    }

    pub fn from_assets(assets: &serde_json::Value, max_tokens: usize, store: &mut ParamStore) -> Result<Self> {
        let config: BertConfig = serde_json::from_value(assets["bert"].clone())?;
        let vocab: Vec<String> = serde_json::from_value(assets["vocab"].clone())?;
        let lowercase = assets["lowercase"].as_bool().unwrap_or(true);
        let tokenizer = WordPiece::new(vocab, lowercase)?;
        Self::build(config, tokenizer, max_tokens, store, &mut |_, shape| Ok(Array2::zeros(shape)))
    }

    fn build(
        config: BertConfig,
        tokenizer: WordPiece,
        max_tokens: usize,
        store: &mut ParamStore,
        source: &mut TensorSource<'_>,
    ) -> Result<Self> {
        let d = config.hidden_size;
        if d % config.num_attention_heads != 0 {
            return Err(Error::Config("hidden_size must be divisible by num_attention_heads".into()));
        }
        let mut add = |name: &str, shape: (usize, usize)| -> Result<ParamId> {
            let value = source(name, shape)?;
            store.add(&format!("encoder.bert.{name}"), ParamGroup::Encoder, value)
        };
        let word_emb = add("embeddings.word_embeddings.weight", (config.vocab_size, d))?;
        let pos_emb = add("embeddings.position_embeddings.weight", (config.max_position_embeddings, d))?;
        let type_emb = add("embeddings.token_type_embeddings.weight", (config.type_vocab_size, d))?;
        let emb_norm = norm_params(&mut add, "embeddings.LayerNorm", d)?;
        let mut layers = Vec::with_capacity(config.num_hidden_layers);
        for i in 0..config.num_hidden_layers {
            let p = format!("encoder.layer.{i}");
            layers.push(Layer {
                query: linear_params(&mut add, &format!("{p}.attention.self.query"), d, d)?,
                key: linear_params(&mut add, &format!("{p}.attention.self.key"), d, d)?,
                value: linear_params(&mut add, &format!("{p}.attention.self.value"), d, d)?,
                attn_out: linear_params(&mut add, &format!("{p}.attention.output.dense"), d, d)?,
                attn_norm: norm_params(&mut add, &format!("{p}.attention.output.LayerNorm"), d)?,
                inter: linear_params(&mut add, &format!("{p}.intermediate.dense"), config.intermediate_size, d)?,
                out: linear_params(&mut add, &format!("{p}.output.dense"), d, config.intermediate_size)?,
                out_norm: norm_params(&mut add, &format!("{p}.output.LayerNorm"), d)?,
            });
        }
        let max_positions = max_tokens.min(config.max_position_embeddings);
        Ok(Self { config, tokenizer, max_positions, word_emb, pos_emb, type_emb, emb_norm, layers })
    }

    pub fn tokenizer(&self) -> &WordPiece {
        &self.tokenizer
    }

    fn linear(g: &mut Graph<'_>, x: Var, l: &Linear) -> Var {
        let w = g.param(l.weight);
        let b = g.param(l.bias);
        let y = g.matmul_t(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph<'_>, x: Var, n: &Norm) -> Var {
        let gain = g.param(n.gain);
        let bias = g.param(n.bias);
        g.layer_norm_rows(x, gain, bias, self.config.layer_norm_eps)
    }
}

fn linear_params(
    add: &mut impl FnMut(&str, (usize, usize)) -> Result<ParamId>,
    prefix: &str,
    out: usize,
    inp: usize,
) -> Result<Linear> {
    Ok(Linear { weight: add(&format!("{prefix}.weight"), (out, inp))?, bias: add(&format!("{prefix}.bias"), (1, out))? })
}

fn norm_params(add: &mut impl FnMut(&str, (usize, usize)) -> Result<ParamId>, prefix: &str, d: usize) -> Result<Norm> {
    Ok(Norm { gain: add(&format!("{prefix}.weight"), (1, d))?, bias: add(&format!("{prefix}.bias"), (1, d))? })
}

fn to_f64(dtype: Dtype, bytes: &[u8]) -> Option<Vec<f64>> {
    match dtype {
        Dtype::F64 => Some(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
        Dtype::F32 => Some(bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect()),
        Dtype::BF16 => Some(
            bytes
                .chunks_exact(2)
                .map(|c| f64::from(f32::from_bits(u32::from(u16::from_le_bytes([c[0], c[1]])) << 16)))
                .collect(),
        ),
        _ => None,
    }
}

impl Encoder for BertEncoder {
    fn dim(&self) -> usize {
        self.config.hidden_size
    }

    fn max_positions(&self) -> usize {
        self.max_positions
    }

    fn tokenize_word(&self, word: &str) -> Vec<usize> {
        self.tokenizer.tokenize_word(word)
    }

    fn forward(&self, g: &mut Graph<'_>, pieces: &[usize], mut rng: Option<&mut ChaCha8Rng>) -> Var {
        let n = pieces.len() + 2;
        let mut ids = Vec::with_capacity(n);
        ids.push(self.tokenizer.cls());
        ids.extend_from_slice(pieces);
        ids.push(self.tokenizer.sep());

        let words = g.param(self.word_emb);
        let positions = g.param(self.pos_emb);
        let types = g.param(self.type_emb);
        let w = g.gather_rows(words, ids);
        let p = g.gather_rows(positions, (0..n).collect());
        let t = g.gather_rows(types, vec![0; n]);
        let x = g.add(w, p);
        let x = g.add(x, t);
        let x = self.norm(g, x, &self.emb_norm);
        let mut x = g.dropout(x, self.config.hidden_dropout_prob, rng.as_deref_mut());

        let heads = self.config.num_attention_heads;
        let dh = self.config.hidden_size / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let q = Self::linear(g, x, &layer.query);
            let k = Self::linear(g, x, &layer.key);
            let v = Self::linear(g, x, &layer.value);
            let mut ctx = None;
            for h in 0..heads {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let scores = g.matmul_t(qh, kh);
                let scores = g.scale_const(scores, scale);
                let attn = g.softmax_rows(scores);
                let out = g.matmul(attn, vh);
                ctx = Some(match ctx {
                    None => out,
                    Some(prev) => g.concat_cols(prev, out),
                });
            }
            let attn_out = Self::linear(g, ctx.expect("at least one head"), &layer.attn_out);
            let attn_out = g.dropout(attn_out, self.config.hidden_dropout_prob, rng.as_deref_mut());
            let res = g.add(x, attn_out);
            let h1 = self.norm(g, res, &layer.attn_norm);
            let inter = Self::linear(g, h1, &layer.inter);
            let inter = g.gelu(inter);
            let out = Self::linear(g, inter, &layer.out);
            let out = g.dropout(out, self.config.hidden_dropout_prob, rng.as_deref_mut());
            let res = g.add(h1, out);
            x = self.norm(g, res, &layer.out_norm);
        }
        x
    }

    fn assets(&self) -> serde_json::Value {
        json!({
            "bert": self.config,
            "vocab": self.tokenizer.vocab(),
            "lowercase": self.tokenizer.lowercase(),
        })
    }
}
