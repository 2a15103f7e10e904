//! Entropy coding: range coder, probability quantization, and the
//! factorized latent model.

pub mod factorized;
pub mod range_coder;

pub use factorized::{decode_latents, encode_latents, FactorizedModel, DEFAULT_HALF_RANGE};
pub use range_coder::{quantize_prob, QuantProb, RangeDecoder, RangeEncoder};

use crate::error::Result;

/// Ideal cost in bits of `bits` under `probs` (probability of a 1), after
/// the same 16-bit quantization the coder applies.
pub fn rate_estimate(probs: &[f32], bits: &[bool]) -> Result<f64> {
    let mut total = 0.0;
    for (&p, &b) in probs.iter().zip(bits) {
        total += quantize_prob(p as f64)?.cost(b);
    }
    Ok(total)
}
