//! Probability models and the bit-exact integer range coder.
//!
//! Latent residuals are coded with per-element conditional Gaussians; the
//! hyperprior is coded with a learned per-channel factorized distribution.
//! Both are lowered to 16-bit quantized CDF tables consumed by a 32-bit
//! range coder with byte-wise renormalization.

pub mod coder;
pub mod math;
pub mod models;
pub mod rate;

pub use coder::{rc_decode, rc_encode, CdfTable, CodedChunk, RangeDecoder, RangeEncoder};
pub use math::{gaussian_bin_prob, P_MIN, SIGMA_MIN};
pub use models::{FactorizedModel, GaussianConditional};
pub use rate::{estimate_rate_factorized, estimate_rate_gaussian};
