#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sru_ner::autograd::{Graph, ParamStore};
use sru_ner::codec::{ActionVocabulary, Mention, Sentence};
use sru_ner::encoder::encode_sentence;
use sru_ner::generator::{generate, Mode};
use sru_ner::sru::{sru_output, sru_update, SruConfig, SruParams, SruState};
use sru_ner::trainer::{build_gold_matrix, sample_loss, Config, DatasetLabels, LabelRegistry};
use sru_ner::SruNer;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn toy_config_path() -> PathBuf {
    repo_root().join("configs/toy.json")
}

pub const GENIA_ACTIONS: &str = "SH SH TR:DNA TR:Protein SH SH TR:DNA SH SH RE:DNA RE:Protein SH RE:DNA SH SH EOA";

pub fn genia() -> (Sentence, Vec<Mention>, ActionVocabulary) {
    let s = Sentence::new("a defective NF - chi B site was completely".split(' '));
    let m = vec![Mention::new(2, 6, "DNA"), Mention::new(2, 5, "Protein"), Mention::new(4, 5, "DNA")];
    (s, m, ActionVocabulary::new(["DNA", "Protein"]).unwrap())
}

/// Four datasets, a ten-word BC5 sentence with three gold mentions and six
/// union-labelled predictions from different heads.
pub fn four_corpus_fixture() -> (LabelRegistry, Vec<Mention>, Vec<Mention>) {
    let ds = |name: &str, types: &[&str]| DatasetLabels {
        name: name.into(),
        types: types.iter().map(|t| t.to_string()).collect(),
    };
    let registry = LabelRegistry::new(vec![
        ds("BC5", &["Chemical", "Disease"]),
        ds("BC4", &["Chemical"]),
        ds("NCBI", &["Disease"]),
        ds("JNLPBA", &["Protein"]),
    ])
    .unwrap();
    let gold = vec![Mention::new(0, 0, "Chemical"), Mention::new(2, 3, "Disease"), Mention::new(5, 5, "Disease")];
    let pred = vec![
        Mention::new(0, 0, "BC5_Chemical"),
        Mention::new(0, 0, "BC4_Chemical"),
        Mention::new(2, 2, "BC5_Disease"),
        Mention::new(5, 5, "NCBI_Disease"),
        Mention::new(7, 7, "BC4_Chemical"),
        Mention::new(9, 9, "JNLPBA_Protein"),
    ];
    (registry, gold, pred)
}

fn crosses(a: &Mention, b: &Mention) -> bool {
    (a.start < b.start && b.start <= a.end && a.end < b.end) || (b.start < a.start && a.start <= b.end && b.end < a.end)
}

/// Every set of pairwise non-crossing mentions over `n` tokens and `labels`.
pub fn all_nested_sets(n: usize, labels: &[&str]) -> Vec<Vec<Mention>> {
    let mut candidates = Vec::new();
    for s in 0..n {
        for e in s..n {
            for l in labels {
                candidates.push(Mention::new(s, e, *l));
            }
        }
    }
    fn extend(i: usize, cands: &[Mention], cur: &mut Vec<Mention>, out: &mut Vec<Vec<Mention>>) {
        if i == cands.len() {
            out.push(cur.clone());
            return;
        }
        extend(i + 1, cands, cur, out);
        if !cur.iter().any(|m| crosses(m, &cands[i])) {
            cur.push(cands[i].clone());
            extend(i + 1, cands, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    extend(0, &candidates, &mut Vec::new(), &mut out);
    out
}

/// Random non-crossing mentions over `n` tokens.
pub fn random_nested(rng: &mut impl Rng, n: usize, labels: &[String], tries: usize) -> Vec<Mention> {
    let mut out: Vec<Mention> = Vec::new();
    for _ in 0..tries {
        let s = rng.random_range(0..n);
        let e = rng.random_range(s..n.min(s + 4));
        let m = Mention::new(s, e, labels[rng.random_range(0..labels.len())].clone());
        if !out.iter().any(|o| crosses(o, &m) || *o == m) {
            out.push(m);
        }
    }
    out.sort();
    out
}

pub struct SruInstance {
    pub c: Array2<f64>,
    pub omega: Array2<f64>,
    pub p: usize,
    pub store: ParamStore,
    pub params: SruParams,
}

/// A random SRU with `q` slots of width `d`, every parameter perturbed away
/// from its initial value.
pub fn random_sru(seed: u64, q: usize, d: usize) -> SruInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cfg = SruConfig { latent_multiplier: 1, half_context: 2, train_alpha: true, ..SruConfig::default() };
    let params = SruParams::register(&mut store, d, 4, &cfg, &mut rng).unwrap();
    let mut noise = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
    *store.value_mut(params.d1) = noise(1, d);
    *store.value_mut(params.d2) = noise(1, d);
    *store.value_mut(params.latent) = noise(4, d);
    *store.value_mut(params.positions) = noise(5, d);
    *store.value_mut(params.alpha) = noise(1, 1) + 1.0;
    let c = noise(q, d);
    let omega = noise(1, d);
    let p = (seed as usize) % q;
    SruInstance { c, omega, p, store, params }
}

/// Plain-loop read-out: returns `(h, w)`.
pub fn reference_sru(inst: &SruInstance, c: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let s = &inst.store;
    let (l, d1, d2) = (s.value(inst.params.latent), s.value(inst.params.d1), s.value(inst.params.d2));
    let (pos, alpha) = (s.value(inst.params.positions), s.value(inst.params.alpha)[[0, 0]]);
    let h_ctx = inst.params.half_context as i64;
    let (q, d) = c.dim();
    let mut scores = vec![f64::NEG_INFINITY; q];
    for (slot, score) in scores.iter_mut().enumerate() {
        let r = ((slot as i64 - inst.p as i64).clamp(-h_ctx, h_ctx) + h_ctx) as usize;
        for j in 0..l.nrows() {
            let mut a = 0.0;
            for k in 0..d {
                a += l[[j, k]] * d2[[0, k]] * (alpha * c[[slot, k]] + pos[[r, k]]);
            }
            *score = score.max(a);
        }
    }
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
    let w: Vec<f64> = scores.iter().map(|s| (s - m).exp() / z).collect();
    let mut h = vec![0.0; d];
    for slot in 0..q {
        for k in 0..d {
            h[k] += w[slot] * c[[slot, k]] * d1[[0, k]];
        }
    }
    (h, w)
}

/// `Σ h ⊙ r` after updating slot `p` with `Ω`, for a fixed random `r`.
fn probe_loss(inst: &SruInstance, c: &Array2<f64>, r: &Array2<f64>) -> f64 {
    let mut g = Graph::new(&inst.store);
    let cv = g.constant(c.clone());
    let omega = g.constant(inst.omega.clone());
    let state = sru_update(&mut g, SruState::new(cv), omega, inst.p);
    let out = sru_output::<ChaCha8Rng>(&mut g, state, inst.p, &inst.params, None);
    (g.value(out.h) * r).sum()
}

fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Worst relative error between analytic and central-difference gradients
/// of a linear probe of `h`, per tensor `C, L, D1, D2, α`.
pub fn sru_gradient_errors(seed: u64) -> [(&'static str, f64); 5] {
    let mut inst = random_sru(seed, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let r = Array2::from_shape_fn((1, 3), |_| rng.random_range(-1.0..1.0));

    let (dc, grads) = {
        let mut g = Graph::new(&inst.store);
        let cv = g.constant(inst.c.clone());
        let omega = g.constant(inst.omega.clone());
        let state = sru_update(&mut g, SruState::new(cv), omega, inst.p);
        let out = sru_output::<ChaCha8Rng>(&mut g, state, inst.p, &inst.params, None);
        let rv = g.constant(r.clone());
        let prod = g.mul(out.h, rv);
        let loss = g.sum_all(prod);
        (g.backward_vars(loss, &[cv]).remove(0), g.backward(loss))
    };

    let eps = 1e-6;
    let numeric = |inst: &mut SruInstance, which: Option<sru_ner::autograd::ParamId>| -> Array2<f64> {
        let shape = match which {
            Some(id) => inst.store.value(id).dim(),
            None => inst.c.dim(),
        };
        let mut out = Array2::zeros(shape);
        for idx in ndarray::indices(shape) {
            let at = |delta: f64, inst: &mut SruInstance| {
                match which {
                    Some(id) => inst.store.value_mut(id)[idx] += delta,
                    None => inst.c[idx] += delta,
                }
                let v = probe_loss(inst, &inst.c, &r);
                match which {
                    Some(id) => inst.store.value_mut(id)[idx] -= delta,
                    None => inst.c[idx] -= delta,
                }
                v
            };
            out[idx] = (at(eps, inst) - at(-eps, inst)) / (2.0 * eps);
        }
        out
    };

    let p = inst.params.clone();
    let analytic = |id| grads.get(id).cloned().expect("trainable parameter");
    [
        ("C", rel_err(&dc, &numeric(&mut inst, None))),
        ("L", rel_err(&analytic(p.latent), &numeric(&mut inst, Some(p.latent)))),
        ("D1", rel_err(&analytic(p.d1), &numeric(&mut inst, Some(p.d1)))),
        ("D2", rel_err(&analytic(p.d2), &numeric(&mut inst, Some(p.d2)))),
        ("alpha", rel_err(&analytic(p.alpha), &numeric(&mut inst, Some(p.alpha)))),
    ]
}

pub struct AlgebraCheck {
    pub locality: bool,
    pub weight_sum_err: f64,
    pub dual_err: f64,
}

pub fn sru_algebra(seed: u64) -> AlgebraCheck {
    let inst = random_sru(seed, 4, 3);
    let mut g = Graph::new(&inst.store);
    let cv = g.constant(inst.c.clone());
    let omega = g.constant(inst.omega.clone());
    let state = sru_update(&mut g, SruState::new(cv), omega, inst.p);
    let updated = g.value(state.memory).clone();
    let locality = (0..inst.c.nrows()).all(|q| {
        if q == inst.p {
            updated.row(q) == &inst.c.row(q) + &inst.omega.row(0)
        } else {
            updated.row(q) == inst.c.row(q)
        }
    });
    let out = sru_output::<ChaCha8Rng>(&mut g, state, inst.p, &inst.params, None);
    let (h_ref, w_ref) = reference_sru(&inst, &updated);
    let w = g.value(out.weights);
    let h = g.value(out.h);
    let dual_err = w
        .iter()
        .zip(&w_ref)
        .chain(h.iter().zip(&h_ref))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    AlgebraCheck { locality, weight_sum_err: (w.sum() - 1.0).abs(), dual_err }
}

pub struct MaskingCheck {
    pub max_out_of_task: f64,
    pub max_in_task: f64,
    pub samples: usize,
}

/// Gradients of the sample loss with respect to the logit matrix on random
/// sentences from two datasets with disjoint label sets.
pub fn masking_check(seed: u64, samples: usize) -> MaskingCheck {
    let registry = LabelRegistry::new(vec![
        DatasetLabels { name: "A".into(), types: vec!["X".into(), "Y".into()] },
        DatasetLabels { name: "B".into(), types: vec!["Z".into()] },
    ])
    .unwrap();
    let mut config = Config { seed, ..Config::default() };
    config.encoder.d_enc = 16;
    config.generator.hidden = Some(32);
    let model = SruNer::new(config, registry.clone()).unwrap();
    let words = ["alpha", "beta", "gamma", "delta", "kinase", "cell", "of", "the"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = MaskingCheck { max_out_of_task: 0.0, max_in_task: 0.0, samples };
    for i in 0..samples {
        let dataset = if i % 2 == 0 { "A" } else { "B" };
        let types = registry.dataset(dataset).unwrap().types.clone();
        let n = rng.random_range(2..9);
        let sentence = Sentence::new((0..n).map(|_| words[rng.random_range(0..words.len())]));
        let mentions = random_nested(&mut rng, n, &types, 3);
        let mentions = registry.to_union(dataset, &mentions).unwrap();
        let mut gold = build_gold_matrix(&sentence, &mentions, dataset, &registry).unwrap();

        let mut g = Graph::new(model.store());
        let encoded = encode_sentence(&mut g, &sentence, model.encoder(), Some(&mut rng)).unwrap();
        let out = generate(&mut g, &encoded, model.generator(), model.sru(), Mode::Training(&mut gold), Some(&mut rng));
        let logits = out.logit_matrix(&mut g);
        let loss = sample_loss(&mut g, logits, &gold);
        let grad = g.backward_vars(loss, &[logits]).remove(0);
        let mask = registry.task_mask(dataset).unwrap();
        for ((_, col), v) in grad.indexed_iter() {
            let slot = if mask[col] { &mut check.max_in_task } else { &mut check.max_out_of_task };
            *slot = slot.max(v.abs());
        }
    }
    check
}

pub fn mention_set(mentions: &[Mention]) -> BTreeSet<Mention> {
    mentions.iter().cloned().collect()
}
