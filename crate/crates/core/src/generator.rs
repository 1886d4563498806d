//! The action generation loop.
//!
//! Each step reads the encoded sentence at the next unparsed word, queries
//! the SRU memory, and scores every action with a small MLP. The logits of a
//! step are folded back into the memory through a gated mixture of action
//! embeddings: every action scoring at least as high as `SH` contributes its
//! embedding weighted by its logit.

use ndarray::{Array2, ArrayView1};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::codec::{argmax, ActionVocabulary};
use crate::encoder::EncodedSentence;
use crate::error::Result;
use crate::sru::{sru_output, sru_update, SruParams, SruState};
use crate::trainer::GoldActionMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// MLP hidden width; `None` means `d_enc`.
    pub hidden: Option<usize>,
    /// Dropout applied to the MLP input.
    pub dropout_logits: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { hidden: None, dropout_logits: 0.1 }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorParams {
    pub action_embeddings: ParamId,
    pub boa: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dropout_logits: f64,
    pub n_actions: usize,
}

impl GeneratorParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        d: usize,
        n_actions: usize,
        config: &GeneratorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = config.hidden.unwrap_or(d);
        // Unit-norm in expectation, so Ω stays on the scale of the logits.
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).unwrap();
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).unwrap();
            Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
        };
        let w1 = uniform(2 * d, hidden, 2 * d);
        let b1 = uniform(1, hidden, 2 * d);
        let w2 = uniform(hidden, n_actions, hidden);
        let b2 = uniform(1, n_actions, hidden);
        let emb = Array2::from_shape_fn((n_actions, d), |_| normal.sample(rng));
        let boa = Array2::from_shape_fn((1, d), |_| normal.sample(rng));
        Ok(Self {
            action_embeddings: store.add("generator.action_embeddings", ParamGroup::Head, emb)?,
            boa: store.add("generator.boa", ParamGroup::Head, boa)?,
            w1: store.add("generator.mlp.w1", ParamGroup::Head, w1)?,
            b1: store.add("generator.mlp.b1", ParamGroup::Head, b1)?,
            w2: store.add("generator.mlp.w2", ParamGroup::Head, w2)?,
            b2: store.add("generator.mlp.b2", ParamGroup::Head, b2)?,
            dropout_logits: config.dropout_logits,
            n_actions,
        })
    }
}

/// Number of rows whose argmax action is `SH`.
pub fn word_cursor<'a>(rows: impl IntoIterator<Item = ArrayView1<'a, f64>>) -> usize {
    rows.into_iter().filter(|r| argmax(r.iter().copied()) == ActionVocabulary::SHIFT).count()
}

/// Gate for the action mixture: 1 where `u_a ≥ u_SH`, else 0.
pub fn mixture_gate(u: ArrayView1<'_, f64>) -> Array2<f64> {
    let sh = u[ActionVocabulary::SHIFT];
    Array2::from_shape_fn((1, u.len()), |(_, a)| if u[a] >= sh { 1.0 } else { 0.0 })
}

/// `Ω = Σ_a β_a ā_a` for a `1 × |actions|` logit row.
pub fn gated_action_mixture(g: &mut Graph<'_>, u: Var, params: &GeneratorParams) -> Var {
    let gate = mixture_gate(g.value(u).row(0));
    let beta = g.mul_const(u, gate);
    let emb = g.param(params.action_embeddings);
    g.matmul(beta, emb)
}

/// One generation step: updates the memory with `(omega_prev, p)` and scores
/// all actions from the next word's row and the memory read-out.
#[allow(clippy::too_many_arguments)]
pub fn step_logits(
    g: &mut Graph<'_>,
    encoded: &EncodedSentence,
    state: SruState,
    p: usize,
    omega_prev: Var,
    params: &GeneratorParams,
    sru: &SruParams,
    mut rng: Option<&mut ChaCha8Rng>,
) -> (Var, SruState) {
    assert!(p <= encoded.n_words, "cursor {p} beyond {} words", encoded.n_words);
    let state = sru_update(g, state, omega_prev, p);
    let read = sru_output(g, state, p, sru, rng.as_deref_mut());
    let token = g.gather_rows(encoded.matrix, vec![p + 1]);
    let input = g.concat_cols(token, read.h);
    let input = g.dropout(input, params.dropout_logits, rng.as_deref_mut());
    let (w1, b1, w2, b2) = (g.param(params.w1), g.param(params.b1), g.param(params.w2), g.param(params.b2));
    let hidden = g.matmul(input, w1);
    let hidden = g.add_row(hidden, b1);
    let hidden = g.tanh(hidden);
    let out = g.matmul(hidden, w2);
    (g.add_row(out, b2), state)
}

/// Inference step cap for an `n`-word sentence.
pub fn max_steps(n_words: usize) -> usize {
    8 * n_words + 16
}

pub enum Mode<'a> {
    /// Free-running: the cursor follows argmax `SH`, stopping once
    /// `σ(u_EOA) > 0.5` or at [`max_steps`].
    Inference,
    /// Teacher-forced against a gold matrix that is augmented in place.
    Training(&'a mut GoldActionMatrix),
}

#[derive(Clone, Debug)]
pub struct Generation {
    /// One `1 × |actions|` logit row per step, in order.
    pub rows: Vec<Var>,
    /// Cursor value fed into each step.
    pub cursors: Vec<usize>,
    /// The inference cap was hit before `EOA`.
    pub truncated: bool,
}

impl Generation {
    /// The logit matrix `U`.
    pub fn logit_matrix(&self, g: &mut Graph<'_>) -> Var {
        g.stack_rows(self.rows.clone())
    }

    /// `σ(U)` as a plain array.
    pub fn probabilities(&self, g: &Graph<'_>) -> Array2<f64> {
        let width = self.rows.first().map(|r| g.shape(*r).1).unwrap_or(0);
        let mut out = Array2::zeros((self.rows.len(), width));
        for (t, r) in self.rows.iter().enumerate() {
            out.row_mut(t).assign(&g.value(*r).row(0).mapv(sigmoid));
        }
        out
    }
}

/// Runs the generation cycle over an encoded sentence.
pub fn generate(
    g: &mut Graph<'_>,
    encoded: &EncodedSentence,
    params: &GeneratorParams,
    sru: &SruParams,
    mode: Mode<'_>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Generation {
    let n = encoded.n_words;
    let mut state = SruState::new(encoded.matrix);
    let mut omega = g.param(params.boa);
    let mut p = 0;
    let mut out = Generation { rows: Vec::new(), cursors: Vec::new(), truncated: false };

    match mode {
        Mode::Inference => {
            let cap = max_steps(n);
            loop {
                let (u, next) = step_logits(g, encoded, state, p, omega, params, sru, rng.as_deref_mut());
                state = next;
                out.rows.push(u);
                out.cursors.push(p);
                let row = g.value(u).row(0);
                if sigmoid(row[ActionVocabulary::END]) > 0.5 {
                    break;
                }
                if out.rows.len() >= cap {
                    out.truncated = true;
                    break;
                }
                if argmax(row.iter().copied()) == ActionVocabulary::SHIFT && p < n {
                    p += 1;
                }
                omega = gated_action_mixture(g, u, params);
            }
        }
        Mode::Training(gold) => {
            let row_cap = gold.rows() + max_steps(n);
            let mut t = 0;
            while t < gold.rows() {
                let (u, next) = step_logits(g, encoded, state, p, omega, params, sru, rng.as_deref_mut());
                state = next;
                out.rows.push(u);
                out.cursors.push(p);
                gold.augment(g.value(u).row(0), t, gold.rows() < row_cap);
                if gold.is_shift_row(t) && p < n {
                    p += 1;
                }
                omega = gated_action_mixture(g, u, params);
                t += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn cursor_counts_shift_argmaxes() {
        let rows: Vec<Array2<f64>> = vec![];
        assert_eq!(word_cursor(rows.iter().map(|r| r.row(0))), 0);
        let u = array![[3.0, 0.0, 1.0, 0.0], [0.0, 0.0, 2.0, 1.0], [1.0, -1.0, 0.0, 0.5]];
        assert_eq!(word_cursor(u.rows()), 2);
    }

    #[test]
    fn gate_keeps_actions_at_or_above_shift() {
        let gate = mixture_gate(array![0.5, 0.2, 0.5, 0.9, -1.0, 0.49].view());
        assert_eq!(gate, array![[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]]);
    }

    #[test]
    fn mixture_with_only_shift_is_scaled_shift_embedding() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let params = GeneratorParams::register(&mut store, 3, 4, &GeneratorConfig::default(), &mut rng).unwrap();
        let emb = store.value(params.action_embeddings).clone();
        let mut g = Graph::new(&store);
        let u = g.constant(array![[2.0, 1.0, -0.5, 1.9]]);
        let omega = gated_action_mixture(&mut g, u, &params);
        let expect = emb.row(0).mapv(|v| 2.0 * v);
        assert_eq!(g.value(omega).row(0), expect);

        let u = g.constant(array![[0.7, 0.7, 0.7, 0.7]]);
        let omega = gated_action_mixture(&mut g, u, &params);
        let expect = emb.sum_axis(ndarray::Axis(0)).mapv(|v| 0.7 * v);
        for (a, b) in g.value(omega).row(0).iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

}
