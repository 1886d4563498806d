use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};

/// Draws `(dataset, sentence)` pairs with dataset `i` chosen with probability
/// proportional to `1 / |D_i|`, then a uniform sentence from it.
#[derive(Clone, Debug)]
pub struct DatasetSampler {
    sizes: Vec<usize>,
    probabilities: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl DatasetSampler {
    pub fn new(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::Config("every training dataset needs at least one sentence".into()));
        }
        let inv: Vec<f64> = sizes.iter().map(|&s| 1.0 / s as f64).collect();
        let total: f64 = inv.iter().sum();
        let probabilities = inv.iter().map(|w| w / total).collect();
        let index = WeightedIndex::new(&inv).expect("positive weights");
        Ok(Self { sizes: sizes.to_vec(), probabilities, index })
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// Samples per epoch: the mean dataset size, rounded to nearest.
    pub fn epoch_len(&self) -> usize {
        let sum: usize = self.sizes.iter().sum();
        let k = self.sizes.len();
        (sum + k / 2) / k
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> (usize, usize) {
        let d = self.index.sample(rng);
        (d, rng.random_range(0..self.sizes[d]))
    }

    pub fn epoch<R: Rng>(&self, rng: &mut R) -> Vec<(usize, usize)> {
        (0..self.epoch_len()).map(|_| self.draw(rng)).collect()
    }
}
