//! Coding-time probability models: the learned per-channel factorized prior
//! for the hyperprior and the per-element conditional Gaussian for latent
//! residuals.

use crate::entropy::coder::CdfTable;
use crate::entropy::math::{gaussian_bin_prob_folded, P_MIN, SIGMA_MIN};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Learned factorized distribution over the fixed integer support
/// `[-support, support]`, one distribution per channel.
///
/// Probabilities are softmaxed logits, floored at [`P_MIN`] and renormalized
/// so that rate estimates and coding tables agree.
#[derive(Clone, Debug)]
pub struct FactorizedModel {
    support: i32,
    probs: Vec<Vec<f64>>,
}

impl FactorizedModel {
    /// Builds the model from a logits parameter of shape [C, 2S+1, 1, 1].
    pub fn from_logits<T: Scalar>(logits: &Tensor<T>) -> Result<Self> {
        let [channels, bins, h, w] = logits.shape();
        if h != 1 || w != 1 || bins % 2 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "factorized logits must be [C, 2S+1, 1, 1], got {:?}",
                logits.shape()
            )));
        }
        let support = (bins as i32 - 1) / 2;
        let mut probs = Vec::with_capacity(channels);
        for c in 0..channels {
            let row: Vec<f64> =
                (0..bins).map(|k| logits.at(c, k, 0, 0).as_f64()).collect();
            probs.push(softmax_floored(&row));
        }
        Ok(FactorizedModel { support, probs })
    }

    pub fn support(&self) -> i32 {
        self.support
    }

    pub fn channels(&self) -> usize {
        self.probs.len()
    }

    pub fn bins(&self) -> usize {
        2 * self.support as usize + 1
    }

    /// Probability of integer symbol `k` in channel `c`; zero outside support.
    pub fn prob(&self, c: usize, k: i32) -> f64 {
        if k < -self.support || k > self.support {
            return 0.0;
        }
        self.probs[c][(k + self.support) as usize]
    }

    /// Clamp a quantized value into the coded support.
    pub fn clamp_symbol(&self, k: i32) -> i32 {
        k.clamp(-self.support, self.support)
    }

    /// CDF table over `[lo, hi]` for channel `c`, with out-of-range mass
    /// folded into the edge bins.
    pub fn table_for_range(&self, c: usize, lo: i32, hi: i32) -> Result<CdfTable> {
        if lo > hi {
            return Err(Error::Contract(format!("empty symbol range [{lo}, {hi}]")));
        }
        let row = &self.probs[c];
        let s = self.support;
        let mut bins = Vec::with_capacity((hi - lo + 1) as usize);
        for k in lo..=hi {
            let mut p = if k < -s || k > s { 0.0 } else { row[(k + s) as usize] };
            if k == lo {
                for j in -s..lo.min(s + 1) {
                    p += row[(j + s) as usize];
                }
            }
            if k == hi {
                for j in (hi + 1).max(-s)..=s {
                    p += row[(j + s) as usize];
                }
            }
            bins.push(p);
        }
        CdfTable::from_probs(lo, &bins)
    }
}

fn softmax_floored(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let mut probs: Vec<f64> = exps.iter().map(|&e| (e / sum).max(P_MIN)).collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    probs
}

/// Per-element conditional Gaussian for latent residuals.
///
/// Residuals are mean-centered at quantization time, so each element is
/// modeled as a zero-mean Gaussian with its own scale.
#[derive(Clone, Debug)]
pub struct GaussianConditional {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl GaussianConditional {
    pub fn new<T: Scalar>(mu: &Tensor<T>, sigma: &Tensor<T>) -> Result<Self> {
        if mu.shape() != sigma.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mu {:?} vs sigma {:?}",
                mu.shape(),
                sigma.shape()
            )));
        }
        Ok(GaussianConditional {
            mu: mu.data().iter().map(|v| v.as_f64()).collect(),
            sigma: sigma.data().iter().map(|v| v.as_f64().max(SIGMA_MIN)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// One CDF table per element over `[lo, hi]`, tails folded.
    pub fn build_tables(&self, lo: i32, hi: i32) -> Result<Vec<CdfTable>> {
        let width = (hi - lo + 1) as usize;
        let mut tables = Vec::with_capacity(self.sigma.len());
        let mut bins = vec![0.0f64; width];
        for &s in &self.sigma {
            for (i, b) in bins.iter_mut().enumerate() {
                *b = gaussian_bin_prob_folded(s, lo + i as i32, lo, hi);
            }
            tables.push(CdfTable::from_probs(lo, &bins)?);
        }
        Ok(tables)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::coder::{rc_decode, rc_encode};

    #[test]
    fn factorized_probs_sum_to_one() {
        let logits = Tensor::<f32>::new(
            [2, 5, 1, 1],
            vec![0.0, 1.0, 2.0, 1.0, 0.0, -3.0, 0.0, 3.0, 0.0, -3.0],
        )
        .unwrap();
        let m = FactorizedModel::from_logits(&logits).unwrap();
        assert_eq!(m.support(), 2);
        for c in 0..2 {
            let total: f64 = (-2..=2).map(|k| m.prob(c, k)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        assert_eq!(m.prob(0, 3), 0.0);
    }

    #[test]
    fn folded_table_covers_subrange() {
        let logits = Tensor::<f64>::zeros([1, 65, 1, 1]);
        let m = FactorizedModel::from_logits(&logits).unwrap();
        let t = m.table_for_range(0, -2, 2).unwrap();
        assert_eq!(t.bins(), 5);
        // Edge bins absorb the folded tails of the uniform distribution.
        assert!(t.prob(-2) > t.prob(0));
        assert!(t.prob(2) > t.prob(0));
    }

    #[test]
    fn gaussian_chunk_roundtrip() {
        let mu = Tensor::<f32>::zeros([1, 2, 2, 2]);
        let sigma = Tensor::<f32>::new(
            [1, 2, 2, 2],
            vec![0.3, 0.8, 1.5, 2.0, 0.05, 4.0, 1.0, 0.7],
        )
        .unwrap();
        let g = GaussianConditional::new(&mu, &sigma).unwrap();
        let symbols = vec![0, -1, 2, 5, 0, -4, 1, 0];
        let (lo, hi) = (-4, 5);
        let tables = g.build_tables(lo, hi).unwrap();
        let chunk = rc_encode(&symbols, lo, hi, |i| i, &tables).unwrap();
        let tables2 = g.build_tables(chunk.symbol_min as i32, chunk.symbol_max as i32).unwrap();
        let back = rc_decode(&chunk, symbols.len(), |i| i, &tables2).unwrap();
        assert_eq!(back, symbols);
    }
}
