//! Inference-time rate estimation from rounded symbols and their models.
//!
//! The differentiable training-time estimates live in the graph ops; these
//! functions price the actual coded symbols and must track the range coder
//! to within 1% plus a small per-chunk constant.

use crate::entropy::math::bits_of;
use crate::entropy::models::{FactorizedModel, GaussianConditional};

/// Total bits for Gaussian-coded residuals: sum of `-log2 p(k; 0, sigma)`.
pub fn estimate_rate_gaussian(residuals: &[i32], model: &GaussianConditional) -> f64 {
    debug_assert_eq!(residuals.len(), model.len());
    let mut bits = 0.0;
    for (&k, &s) in residuals.iter().zip(model.sigma()) {
        bits += bits_of(crate::entropy::math::gaussian_bin_prob(0.0, s, k as f64));
    }
    bits
}

/// Total bits for factorized-coded symbols, `channel_of(i)` selecting the
/// per-channel distribution.
pub fn estimate_rate_factorized(
    symbols: &[i32],
    channel_of: impl Fn(usize) -> usize,
    model: &FactorizedModel,
) -> f64 {
    let mut bits = 0.0;
    for (i, &k) in symbols.iter().enumerate() {
        bits += bits_of(model.prob(channel_of(i), k));
    }
    bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn single_standard_normal_symbol() {
        let mu = Tensor::<f64>::zeros([1, 1, 1, 1]);
        let sigma = Tensor::<f64>::full([1, 1, 1, 1], 1.0);
        let g = GaussianConditional::new(&mu, &sigma).unwrap();
        let bits = estimate_rate_gaussian(&[0], &g);
        assert!((bits - 1.3848665).abs() < 1e-6, "bits = {bits}");
    }

    #[test]
    fn uniform_factorized_is_log2_bins() {
        let logits = Tensor::<f64>::zeros([1, 65, 1, 1]);
        let m = FactorizedModel::from_logits(&logits).unwrap();
        let bits = estimate_rate_factorized(&[5], |_| 0, &m);
        assert!((bits - (65.0f64).log2()).abs() < 1e-9, "bits = {bits}");
        assert!((bits - 6.0224).abs() < 1e-3);
    }

    #[test]
    fn empty_tensor_is_zero_bits() {
        let mu = Tensor::<f64>::zeros([0, 1, 1, 1]);
        let sigma = Tensor::<f64>::zeros([0, 1, 1, 1]);
        let g = GaussianConditional::new(&mu, &sigma).unwrap();
        assert_eq!(estimate_rate_gaussian(&[], &g), 0.0);
        let logits = Tensor::<f64>::zeros([1, 65, 1, 1]);
        let m = FactorizedModel::from_logits(&logits).unwrap();
        assert_eq!(estimate_rate_factorized(&[], |_| 0, &m), 0.0);
    }

    #[test]
    fn zero_probability_is_floored_not_infinite() {
        let logits = Tensor::<f64>::zeros([1, 5, 1, 1]);
        let m = FactorizedModel::from_logits(&logits).unwrap();
        let bits = estimate_rate_factorized(&[100], |_| 0, &m);
        assert!((bits - 16.0).abs() < 1e-9);
    }
}
