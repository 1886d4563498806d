use crate::autograd::{Graph, Var};

use super::GoldActionMatrix;

/// `L = mean_t mean_a BCE(σ(U_ta), G_ta)`, with `G` held constant.
pub fn sample_loss(g: &mut Graph<'_>, logits: Var, gold: &GoldActionMatrix) -> Var {
    assert_eq!(
        g.shape(logits).0,
        gold.rows(),
        "logit rows and gold rows must align"
    );
    g.bce_with_logits_mean(logits, gold.matrix().clone())
}
