use std::collections::HashMap;

use ndarray::{Array2, Zip};

use super::OptimizerConfig;
use crate::autograd::{Gradients, ParamGroup, ParamId, ParamStore};

/// AdamW over one parameter group, with decoupled weight decay and a linear
/// warm-up to a constant learning rate.
#[derive(Clone, Debug)]
pub struct AdamW {
    group: ParamGroup,
    lr: f64,
    weight_decay: f64,
    betas: (f64, f64),
    eps: f64,
    warmup_steps: usize,
    step: usize,
    moments: HashMap<ParamId, (Array2<f64>, Array2<f64>)>,
}

impl AdamW {
    pub fn new(group: ParamGroup, config: &OptimizerConfig, betas: (f64, f64), eps: f64, steps_per_epoch: usize) -> Self {
        Self {
            group,
            lr: config.lr,
            weight_decay: config.weight_decay,
            betas,
            eps,
            warmup_steps: (config.warmup_epochs * steps_per_epoch as f64).round() as usize,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Learning rate used for optimizer step `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let lr = self.lr_at(self.step);
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<ParamId> = store
            .iter()
            .filter(|(_, p)| p.group == self.group && p.trainable)
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let value = store.value_mut(id);
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Array2::zeros(value.dim()), Array2::zeros(value.dim())));
            let (eps, decay) = (self.eps, 1.0 - lr * self.weight_decay);
            Zip::from(value).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *p *= decay;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn warmup_is_linear_then_constant() {
        let cfg = OptimizerConfig { lr: 1.0, weight_decay: 0.0, warmup_epochs: 0.5 };
        let opt = AdamW::new(ParamGroup::Head, &cfg, (0.9, 0.98), 1e-6, 8);
        assert_eq!(opt.lr_at(1), 0.25);
        assert_eq!(opt.lr_at(4), 1.0);
        assert_eq!(opt.lr_at(100), 1.0);
    }

    #[test]
    fn matches_a_hand_computed_step() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Head, array![[1.0, -2.0]]).unwrap();
        let frozen = store.add("f", ParamGroup::Head, array![[5.0]]).unwrap();
        store.set_trainable(frozen, false);
        let enc = store.add("e", ParamGroup::Encoder, array![[3.0]]).unwrap();
        let mut grads = Gradients::zeros_like(&store);
        grads.accumulate_param(id, &array![[0.5, -1.0]]);
        grads.accumulate_param(frozen, &array![[1.0]]);
        grads.accumulate_param(enc, &array![[1.0]]);
        let cfg = OptimizerConfig { lr: 0.1, weight_decay: 0.01, warmup_epochs: 0.0 };
        let mut opt = AdamW::new(ParamGroup::Head, &cfg, (0.9, 0.98), 1e-6, 1);
        opt.apply(&mut store, &grads);
        // First bias-corrected step moves each weight by lr·g/(|g|+eps) after decay.
        let expect0 = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-6);
        let expect1 = -2.0 * (1.0 - 0.1 * 0.01) + 0.1 * 1.0 / (1.0 + 1e-6);
        let w = store.value(id);
        assert!((w[[0, 0]] - expect0).abs() < 1e-12);
        assert!((w[[0, 1]] - expect1).abs() < 1e-12);
        assert_eq!(store.value(frozen)[[0, 0]], 5.0);
        assert_eq!(store.value(enc)[[0, 0]], 3.0);
    }
}
