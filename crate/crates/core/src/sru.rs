//! Slot-based Recurrent Unit.
//!
//! The state is a `Q × d` slot memory `C`. An update adds the input vector to
//! one slot; the output attends over all slots using trained latent
//! embeddings, with slot rows enhanced by relative positional embeddings
//! centred on the current slot:
//!
//! ```text
//! C'    = C + δ_p Ωᵀ
//! C_pos = α·C' + Dropout(P(p))
//! A     = Dropout(L) · D2 · C_posᵀ          (J × Q)
//! s_q   = max_j A_jq,   w = softmax(s)
//! h     = wᵀ · (C' · D1)
//! ```

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SruConfig {
    /// `J / |actions|`.
    pub latent_multiplier: usize,
    /// Relative distances are clamped to `[-H, H]`.
    pub half_context: usize,
    pub dropout_pos: f64,
    pub dropout_latent: f64,
    /// When false, `α` is fixed at 1.
    pub train_alpha: bool,
}

impl Default for SruConfig {
    fn default() -> Self {
        Self { latent_multiplier: 2, half_context: 150, dropout_pos: 0.2, dropout_latent: 0.2, train_alpha: false }
    }
}

impl SruConfig {
    /// Settings used for single-task nested (GENIA-style) training.
    pub fn nested_preset() -> Self {
        Self { latent_multiplier: 10, half_context: 240, train_alpha: true, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct SruParams {
    pub d1: ParamId,
    pub d2: ParamId,
    pub latent: ParamId,
    pub positions: ParamId,
    pub alpha: ParamId,
    pub half_context: usize,
    pub dropout_pos: f64,
    pub dropout_latent: f64,
}

impl SruParams {
    /// Registers SRU parameters for width `d` and `n_actions` actions.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        d: usize,
        n_actions: usize,
        config: &SruConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.latent_multiplier == 0 {
            return Err(Error::Config("sru.latent_multiplier must be positive".into()));
        }
        let j = config.latent_multiplier * n_actions;
        let h = config.half_context;
        let scale = 1.0 / (d as f64).sqrt();
        let latent_dist = Normal::new(0.0, scale).unwrap();
        let pos_dist = Normal::new(0.0, 1.0).unwrap();
        let latent = Array2::from_shape_fn((j, d), |_| latent_dist.sample(rng));
        let positions = Array2::from_shape_fn((2 * h + 1, d), |_| pos_dist.sample(rng));
        let params = Self {
            d1: store.add("sru.d1", ParamGroup::Head, Array2::ones((1, d)))?,
            d2: store.add("sru.d2", ParamGroup::Head, Array2::ones((1, d)))?,
            latent: store.add("sru.latent", ParamGroup::Head, latent)?,
            positions: store.add("sru.positions", ParamGroup::Head, positions)?,
            alpha: store.add("sru.alpha", ParamGroup::Head, Array2::ones((1, 1)))?,
            half_context: h,
            dropout_pos: config.dropout_pos,
            dropout_latent: config.dropout_latent,
        };
        store.set_trainable(params.alpha, config.train_alpha);
        Ok(params)
    }

    pub fn num_latent(&self, store: &ParamStore) -> usize {
        store.value(self.latent).nrows()
    }
}

/// Slot memory `C` inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct SruState {
    pub memory: Var,
}

impl SruState {
    pub fn new(memory: Var) -> Self {
        Self { memory }
    }

    pub fn slots(&self, g: &Graph<'_>) -> usize {
        g.shape(self.memory).0
    }
}

/// `C + δ_p Ωᵀ`.
pub fn sru_update(g: &mut Graph<'_>, state: SruState, omega: Var, p: usize) -> SruState {
    assert!(p < state.slots(g), "slot {p} out of range for {} slots", state.slots(g));
    SruState { memory: g.add_to_row(state.memory, omega, p) }
}

/// Positional table row for each slot: `clamp(q - p, -H, H) + H`.
pub fn relative_position_indices(p: usize, slots: usize, half_context: usize) -> Vec<usize> {
    let h = half_context as i64;
    (0..slots).map(|q| ((q as i64 - p as i64).clamp(-h, h) + h) as usize).collect()
}

/// `P(p)`: the `Q × d` relative positional rows around slot `p`.
pub fn relative_position_rows(g: &mut Graph<'_>, p: usize, slots: usize, params: &SruParams) -> Var {
    let table = g.param(params.positions);
    g.gather_rows(table, relative_position_indices(p, slots, params.half_context))
}

#[derive(Clone, Copy, Debug)]
pub struct SruOutput {
    pub h: Var,
    pub weights: Var,
}

/// Attention read-out `h` of the memory around slot `p`. Dropout is applied to
/// `L` and `P(p)` only when `rng` is given.
pub fn sru_output<R: Rng>(
    g: &mut Graph<'_>,
    state: SruState,
    p: usize,
    params: &SruParams,
    mut rng: Option<&mut R>,
) -> SruOutput {
    let slots = state.slots(g);
    assert!(p < slots, "slot {p} out of range for {slots} slots");
    let alpha = g.param(params.alpha);
    let scaled = g.scale(state.memory, alpha);
    let pos = relative_position_rows(g, p, slots, params);
    let pos = g.dropout(pos, params.dropout_pos, rng.as_deref_mut());
    let enhanced = g.add(scaled, pos);

    let latent = g.param(params.latent);
    let latent = g.dropout(latent, params.dropout_latent, rng.as_deref_mut());
    let d2 = g.param(params.d2);
    let keyed = g.mul_row(latent, d2);
    let scores = g.matmul_t(keyed, enhanced);
    let slot_scores = g.col_max(scores);
    let weights = g.softmax_rows(slot_scores);

    let d1 = g.param(params.d1);
    let values = g.mul_row(state.memory, d1);
    let h = g.matmul(weights, values);
    SruOutput { h, weights }
}
