use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::Distribution;

use super::charset::Charset;
use crate::error::{Error, Result};

/// Per-sample oversampling weight: the largest character weight in the
/// text, or 1 for text without known characters.
pub fn sample_weight(text: &str, charset: &Charset) -> f64 {
    text.chars()
        .filter_map(|c| charset.weight(c))
        .fold(1.0, f64::max)
}

/// Draws sample indices with probability proportional to their weights.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    weights: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl BalancedSampler {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let dist = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("sampler weights: {e}")))?;
        Ok(BalancedSampler { weights, dist })
    }

    pub fn from_texts<S: AsRef<str>>(texts: &[S], charset: &Charset) -> Result<Self> {
        Self::new(texts.iter().map(|t| sample_weight(t.as_ref(), charset)).collect())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn probability(&self, i: usize) -> f64 {
        self.weights[i] / self.weights.iter().sum::<f64>()
    }

    pub fn draw(&self, rng: &mut impl Rng) -> usize {
        self.dist.sample(rng)
    }

    /// `n` draws with replacement, forming one balanced epoch order.
    pub fn epoch(&self, n: usize, rng: &mut impl Rng) -> Vec<usize> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}
