//! Gaussian bin masses and their derivatives, shared by rate estimation,
//! coding-table construction, and the differentiable training-time rate ops.

use std::f64::consts::SQRT_2;

/// Lower bound on the scale of the conditional Gaussian. Values below this
/// are clamped, never rejected.
pub const SIGMA_MIN: f64 = 0.11;

/// Probability floor per bin, matching the 16-bit coding tables.
pub const P_MIN: f64 = 1.0 / 65536.0;

#[inline]
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

#[inline]
pub fn std_normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Gaussian mass of the unit bin `[k-0.5, k+0.5]` around `mu`.
pub fn gaussian_bin_prob(mu: f64, sigma: f64, k: f64) -> f64 {
    let s = sigma.max(SIGMA_MIN);
    std_normal_cdf((k - mu + 0.5) / s) - std_normal_cdf((k - mu - 0.5) / s)
}

/// Bin mass of a zero-mean Gaussian over `[lo, hi]` with the tails folded
/// into the edge bins. `k` must lie in `[lo, hi]`.
pub fn gaussian_bin_prob_folded(sigma: f64, k: i32, lo: i32, hi: i32) -> f64 {
    let s = sigma.max(SIGMA_MIN);
    let upper = if k == hi { 1.0 } else { std_normal_cdf((k as f64 + 0.5) / s) };
    let lower = if k == lo { 0.0 } else { std_normal_cdf((k as f64 - 0.5) / s) };
    upper - lower
}

/// `-log2(max(p, P_MIN))`.
#[inline]
pub fn bits_of(p: f64) -> f64 {
    -(p.max(P_MIN)).log2()
}

/// Partial derivatives of `-log2 p(v; mu, sigma)` where
/// `p = Phi((v-mu+0.5)/s) - Phi((v-mu-0.5)/s)`, with respect to `v`, `mu`,
/// and `sigma`. Zero once the probability floor is active.
pub fn gaussian_bits_grad(v: f64, mu: f64, sigma: f64) -> (f64, f64, f64) {
    let s = sigma.max(SIGMA_MIN);
    let a = (v - mu + 0.5) / s;
    let b = (v - mu - 0.5) / s;
    let p = std_normal_cdf(a) - std_normal_cdf(b);
    if p <= P_MIN {
        return (0.0, 0.0, 0.0);
    }
    let pa = std_normal_pdf(a);
    let pb = std_normal_pdf(b);
    let ln2 = std::f64::consts::LN_2;
    // d bits / d p = -1 / (p ln2)
    let dbits_dp = -1.0 / (p * ln2);
    let dp_dv = (pa - pb) / s;
    let dp_dmu = -(pa - pb) / s;
    let dp_dsigma = if sigma <= SIGMA_MIN { 0.0 } else { (-pa * a + pb * b) / s };
    (dbits_dp * dp_dv, dbits_dp * dp_dmu, dbits_dp * dp_dsigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_center_bin() {
        // Mass of [-0.5, 0.5] under N(0,1).
        let p = gaussian_bin_prob(0.0, 1.0, 0.0);
        assert!((p - 0.382925).abs() < 1e-6, "p = {p}");
    }

    #[test]
    fn bin_prob_symmetry() {
        for k in 1..=5 {
            let p = gaussian_bin_prob(0.0, 1.0, k as f64);
            let q = gaussian_bin_prob(0.0, 1.0, -k as f64);
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn folded_mass_sums_to_one() {
        for &sigma in &[0.05, 0.11, 0.7, 3.0, 25.0] {
            let (lo, hi) = (-40, 40);
            let mut total = 0.0;
            for k in lo..=hi {
                total += gaussian_bin_prob_folded(sigma, k, lo, hi);
            }
            assert!((total - 1.0).abs() < 1e-9, "sigma {sigma} total {total}");
        }
    }

    #[test]
    fn sigma_below_floor_is_clamped() {
        let p = gaussian_bin_prob(0.0, 1e-9, 0.0);
        let q = gaussian_bin_prob(0.0, SIGMA_MIN, 0.0);
        assert_eq!(p, q);
    }

    #[test]
    fn bits_grad_matches_finite_differences() {
        let h = 1e-6;
        for &(v, mu, sigma) in &[(0.3, 0.1, 0.9), (-1.2, 0.4, 2.3), (2.0, -0.5, 0.5)] {
            let f = |v: f64, mu: f64, s: f64| bits_of(gaussian_bin_prob(mu, s, v));
            let (dv, dmu, ds) = gaussian_bits_grad(v, mu, sigma);
            let ndv = (f(v + h, mu, sigma) - f(v - h, mu, sigma)) / (2.0 * h);
            let ndmu = (f(v, mu + h, sigma) - f(v, mu - h, sigma)) / (2.0 * h);
            let nds = (f(v, mu, sigma + h) - f(v, mu, sigma - h)) / (2.0 * h);
            assert!((dv - ndv).abs() < 1e-5 * (1.0 + ndv.abs()));
            assert!((dmu - ndmu).abs() < 1e-5 * (1.0 + ndmu.abs()));
            assert!((ds - nds).abs() < 1e-5 * (1.0 + nds.abs()));
        }
    }
}
