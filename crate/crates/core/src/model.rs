//! The assembled recognizer: encoder, SRU and action generator over one
//! parameter store, plus checkpoint persistence.

use std::borrow::Cow;
use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use safetensors::{Dtype, SafeTensors, View};

use crate::autograd::{Gradients, Graph, ParamStore};
use crate::codec::{decode_probabilities, Decoded, Mention, Sentence};
use crate::corpus::Example;
use crate::encoder::{build_encoder, encode_sentence, Encoder};
use crate::error::{Error, Result};
use crate::eval::{evaluate_corpus, EvalReport, Scenario, Scored};
use crate::generator::{generate, GeneratorParams, Mode};
use crate::sru::SruParams;
use crate::trainer::{sample_loss, Config, GoldActionMatrix, LabelRegistry};

const CHECKPOINT_FORMAT: &str = "sru-ner-checkpoint/1";

/// Mixes a base seed with a path of integers into an independent seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    path.iter().fold(splitmix(base), |acc, &p| splitmix(acc.rotate_left(17) ^ splitmix(p.wrapping_add(1))))
}

pub struct SruNer {
    config: Config,
    registry: LabelRegistry,
    store: ParamStore,
    encoder: Box<dyn Encoder>,
    sru: SruParams,
    generator: GeneratorParams,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub decoded: Decoded,
    /// `σ(U)` for every generated step.
    pub probabilities: Array2<f64>,
    /// Generation stopped at the step cap rather than on `EOA`.
    pub truncated: bool,
}

/// Loss and gradients of one teacher-forced training pass.
pub struct SampleResult {
    pub loss: f64,
    pub grads: Gradients,
    pub rows: usize,
    pub inserted: usize,
}

impl SruNer {
    /// Freshly initialised model; all randomness derives from `config.seed`.
    pub fn new(config: Config, registry: LabelRegistry) -> Result<Self> {
        Self::build(config, registry, None)
    }

    fn build(config: Config, registry: LabelRegistry, assets: Option<&serde_json::Value>) -> Result<Self> {
        let mut store = ParamStore::new();
        let encoder = build_encoder(&config.encoder, &mut store, derive_seed(config.seed, &[1]), assets)?;
        let d = encoder.dim();
        let n_actions = registry.vocab().len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[2]));
        let sru = SruParams::register(&mut store, d, n_actions, &config.sru, &mut rng)?;
        let generator = GeneratorParams::register(&mut store, d, n_actions, &config.generator, &mut rng)?;
        Ok(Self { config, registry, store, encoder, sru, generator })
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn registry(&self) -> &LabelRegistry {
        &self.registry
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &dyn Encoder {
        &*self.encoder
    }

    pub fn sru(&self) -> &SruParams {
        &self.sru
    }

    pub fn generator(&self) -> &GeneratorParams {
        &self.generator
    }

    /// Greedy inference on one sentence, without dropout.
    pub fn predict(&self, sentence: &Sentence) -> Result<Prediction> {
        let mut g = Graph::new(&self.store);
        let encoded = encode_sentence(&mut g, sentence, &*self.encoder, None)?;
        let out = generate(&mut g, &encoded, &self.generator, &self.sru, Mode::Inference, None);
        let probabilities = out.probabilities(&g);
        let decoded = decode_probabilities(probabilities.view(), sentence, self.registry.vocab());
        Ok(Prediction { decoded, probabilities, truncated: out.truncated })
    }

    pub fn predict_all(&self, sentences: &[Sentence]) -> Result<Vec<Prediction>> {
        sentences.par_iter().map(|s| self.predict(s)).collect()
    }

    /// One teacher-forced pass. Dropout is active only when `rng` is given.
    pub fn sample_gradients(
        &self,
        sentence: &Sentence,
        gold: &GoldActionMatrix,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<SampleResult> {
        let mut g = Graph::new(&self.store);
        let mut gold = gold.clone();
        let encoded = encode_sentence(&mut g, sentence, &*self.encoder, rng.as_deref_mut())?;
        let out = generate(&mut g, &encoded, &self.generator, &self.sru, Mode::Training(&mut gold), rng);
        let logits = out.logit_matrix(&mut g);
        let loss = sample_loss(&mut g, logits, &gold);
        Ok(SampleResult { loss: g.scalar(loss), grads: g.backward(loss), rows: gold.rows(), inserted: gold.inserted() })
    }

    /// Predicts every example and scores it against its own source dataset.
    pub fn evaluate(&self, examples: &[Example], scenario: Scenario) -> Result<EvalReport> {
        let sentences: Vec<Sentence> = examples.iter().map(|e| e.sentence.clone()).collect();
        let preds: Vec<Vec<Mention>> = self.predict_all(&sentences)?.into_iter().map(|p| p.decoded.mention_list()).collect();
        let mut sources = Vec::with_capacity(examples.len());
        for e in examples {
            sources.push(e.sentence.source_dataset.as_deref().ok_or_else(|| {
                Error::Invalid("every evaluated sentence needs a source dataset".into())
            })?);
        }
        let types = sources
            .iter()
            .filter_map(|s| self.registry.dataset(s).ok())
            .flat_map(|d| d.types.iter())
            .collect::<Vec<_>>();
        let report = evaluate_corpus(
            examples.iter().zip(&preds).zip(&sources).map(|((e, p), s)| Scored {
                pred: p,
                gold: &e.mentions,
                source_dataset: s,
            }),
            scenario,
            &self.registry,
        )?;
        Ok(report.with_types(types))
    }

    /// Writes a single safetensors archive: every parameter as an `F64`
    /// tensor, with config, registry and encoder assets in the header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert("registry".to_string(), serde_json::to_string(&self.registry)?);
        meta.insert("encoder_assets".to_string(), serde_json::to_string(&self.encoder.assets())?);
        let tensors: Vec<(String, F64Tensor)> =
            self.store.iter().map(|(_, p)| (p.name.clone(), F64Tensor::new(&p.value))).collect();
        let bytes = safetensors::serialize(tensors, Some(meta))
            .map_err(|e| Error::Checkpoint(format!("serialization failed: {e}")))?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
        let meta = checkpoint_metadata(path, &bytes)?;
        let config: Config = serde_json::from_str(&meta["config"])?;
        let registry: LabelRegistry = serde_json::from_str(&meta["registry"])?;
        let assets: serde_json::Value = serde_json::from_str(&meta["encoder_assets"])?;
        let mut model = Self::build(config, registry, Some(&assets))?;

        let tensors = SafeTensors::deserialize(&bytes).map_err(|e| bad(e.to_string()))?;
        let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let view = tensors.tensor(&name).map_err(|_| bad(format!("missing tensor `{name}`")))?;
            let expected = model.store.value(id).dim();
            if view.dtype() != Dtype::F64 || view.shape() != [expected.0, expected.1] {
                return Err(bad(format!("tensor `{name}` has {:?} {:?}, expected F64 {expected:?}", view.dtype(), view.shape())));
            }
            let data: Vec<f64> =
                view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            *model.store.value_mut(id) = Array2::from_shape_vec(expected, data).expect("shape checked");
        }
        if tensors.len() != model.store.len() {
            return Err(bad(format!("{} tensors for {} parameters", tensors.len(), model.store.len())));
        }
        Ok(model)
    }
}

fn checkpoint_metadata(path: &Path, bytes: &[u8]) -> Result<HashMap<String, String>> {
    let bad = |m: String| Error::Checkpoint(format!("{}: {m}", path.display()));
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let meta = header.metadata().clone().ok_or_else(|| bad("missing header metadata".into()))?;
    for key in ["format", "config", "registry", "encoder_assets"] {
        if !meta.contains_key(key) {
            return Err(bad(format!("missing `{key}`")));
        }
    }
    if meta["format"] != CHECKPOINT_FORMAT {
        return Err(bad(format!("unsupported format `{}`", meta["format"])));
    }
    Ok(meta)
}

/// The label registry stored in a checkpoint, without building the model.
pub fn checkpoint_registry(path: &Path) -> Result<LabelRegistry> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&checkpoint_metadata(path, &bytes)?["registry"])?)
}

struct F64Tensor {
    shape: [usize; 2],
    bytes: Vec<u8>,
}

impl F64Tensor {
    fn new(a: &Array2<f64>) -> Self {
        let bytes = a.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self { shape: [a.nrows(), a.ncols()], bytes }
    }
}

impl View for F64Tensor {
    fn dtype(&self) -> Dtype {
        Dtype::F64
    }

    fn shape(&self) -> &[usize] {
        &self.shape
    }

    fn data(&self) -> Cow<'_, [u8]> {
        Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_differ_by_path() {
        let a = derive_seed(7, &[1, 2]);
        assert_eq!(a, derive_seed(7, &[1, 2]));
        assert_ne!(a, derive_seed(7, &[2, 1]));
        assert_ne!(a, derive_seed(8, &[1, 2]));
        assert_ne!(derive_seed(0, &[]), derive_seed(0, &[0]));
    }
}
