//! Signed fixed-point encoding into the plaintext ring `Z_n`.

use num_bigint::BigUint;
use num_traits::ToPrimitive;

use crate::error::{Error, Result};

pub const DEFAULT_SCALE_BITS: u32 = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedPoint {
    pub scale_bits: u32,
}

impl Default for FixedPoint {
    fn default() -> Self {
        FixedPoint {
            scale_bits: DEFAULT_SCALE_BITS,
        }
    }
}

impl FixedPoint {
    pub fn limit(&self) -> f64 {
        2f64.powi(63 - self.scale_bits as i32)
    }

    /// `round(x 2^s)`; negatives wrap to `n - |v|`.
    pub fn encode(&self, x: f64, n: &BigUint) -> Result<BigUint> {
        if !x.is_finite() || x.abs() >= self.limit() {
            return Err(Error::Range(format!(
                "value {x} is outside the fixed-point range ±2^{}",
                63 - self.scale_bits
            )));
        }
        let v = (x * 2f64.powi(self.scale_bits as i32)).round() as i64;
        let mag = BigUint::from(v.unsigned_abs());
        Ok(if v < 0 { n - mag } else { mag })
    }

    /// Inverse of `encode` for a product of `depth` encoded factors.
    pub fn decode(&self, m: &BigUint, n: &BigUint, depth: u32) -> f64 {
        let half = n >> 1usize;
        let signed = if *m > half {
            -(n - m).to_f64().unwrap_or(f64::INFINITY)
        } else {
            m.to_f64().unwrap_or(f64::INFINITY)
        };
        signed / 2f64.powi((self.scale_bits * depth) as i32)
    }

    /// Encodes every element, naming the first one that overflows.
    pub fn encode_all(&self, xs: &[f64], n: &BigUint) -> Result<Vec<BigUint>> {
        xs.iter()
            .enumerate()
            .map(|(k, &x)| {
                self.encode(x, n)
                    .map_err(|e| Error::Range(format!("element {k}: {e}")))
            })
            .collect()
    }
}
