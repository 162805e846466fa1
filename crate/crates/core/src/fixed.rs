//! Fixed-point codec over the ring Z/2^64.
//!
//! Secure aggregation masks ring words rather than floats, so mask
//! cancellation is bit-exact and independent of summation order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::param::{Layer, ParamVec};

pub const DEFAULT_SCALE_BITS: u32 = 24;
pub const MIN_SCALE_BITS: u32 = 8;
pub const MAX_SCALE_BITS: u32 = 40;

#[derive(Debug, Error, PartialEq)]
pub enum FixedError {
    #[error("scale_bits {0} outside [8, 40]")]
    Scale(u32),
    #[error("value {value} at index {index} does not fit in the ring at scale 2^{scale_bits}")]
    Overflow {
        index: usize,
        value: f64,
        scale_bits: u32,
    },
    #[error("ring vectors differ: {0}")]
    Mismatch(String),
    #[error("divisor must be at least 1")]
    Divisor,
}

/// Fixed-point words modulo 2^64, plus the layout of the vector they encode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingVec {
    pub words: Vec<u64>,
    pub scale_bits: u32,
    pub layout: Vec<Layer>,
}

impl RingVec {
    pub fn zeros(len: usize, scale_bits: u32, layout: Vec<Layer>) -> Self {
        Self {
            words: vec![0; len],
            scale_bits,
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    fn check(&self, other: &RingVec) -> Result<(), FixedError> {
        if self.words.len() != other.words.len() {
            return Err(FixedError::Mismatch(format!(
                "length {} vs {}",
                self.words.len(),
                other.words.len()
            )));
        }
        if self.scale_bits != other.scale_bits {
            return Err(FixedError::Mismatch(format!(
                "scale {} vs {}",
                self.scale_bits, other.scale_bits
            )));
        }
        Ok(())
    }

    /// `self += other (mod 2^64)`.
    pub fn add_assign(&mut self, other: &RingVec) -> Result<(), FixedError> {
        self.check(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a = a.wrapping_add(*b);
        }
        Ok(())
    }

    /// `self -= other (mod 2^64)`.
    pub fn sub_assign(&mut self, other: &RingVec) -> Result<(), FixedError> {
        self.check(other)?;
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a = a.wrapping_sub(*b);
        }
        Ok(())
    }
}

fn check_scale(scale_bits: u32) -> Result<(), FixedError> {
    if (MIN_SCALE_BITS..=MAX_SCALE_BITS).contains(&scale_bits) {
        Ok(())
    } else {
        Err(FixedError::Scale(scale_bits))
    }
}

/// Encodes each value as `round(v * 2^scale_bits)` in two's complement.
pub fn encode_fixed(p: &ParamVec, scale_bits: u32) -> Result<RingVec, FixedError> {
    check_scale(scale_bits)?;
    let limit = 2f64.powi(63 - scale_bits as i32);
    let factor = 2f64.powi(scale_bits as i32);
    let words = p
        .values()
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if !(value.abs() < limit) {
                return Err(FixedError::Overflow {
                    index,
                    value,
                    scale_bits,
                });
            }
            Ok((value * factor).round() as i64 as u64)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RingVec {
        words,
        scale_bits,
        layout: p.layout().to_vec(),
    })
}

/// Reads each word as a signed ring element and divides by `2^scale_bits * divisor`.
pub fn decode_fixed(r: &RingVec, divisor: u64) -> Result<ParamVec, FixedError> {
    if divisor == 0 {
        return Err(FixedError::Divisor);
    }
    check_scale(r.scale_bits)?;
    let denom = 2f64.powi(r.scale_bits as i32) * divisor as f64;
    let values = r.words.iter().map(|&w| (w as i64) as f64 / denom).collect();
    ParamVec::new(values, r.layout.clone())
        .map_err(|e| FixedError::Mismatch(e.to_string()))
}

/// Snaps every value onto the fixed-point grid (`decode(encode(p), 1)`).
pub fn quantize(p: &ParamVec, scale_bits: u32) -> Result<ParamVec, FixedError> {
    decode_fixed(&encode_fixed(p, scale_bits)?, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::RngCore;

    fn scalar(v: f64) -> ParamVec {
        ParamVec::new(vec![v], vec![Layer::new("x", &[1])]).unwrap()
    }

    fn vector(values: Vec<f64>) -> ParamVec {
        let n = values.len();
        ParamVec::new(values, vec![Layer::new("x", &[n])]).unwrap()
    }

    #[test]
    fn encode_one_and_minus_one() {
        assert_eq!(encode_fixed(&scalar(1.0), 24).unwrap().words, vec![16_777_216]);
        assert_eq!(
            encode_fixed(&scalar(-1.0), 24).unwrap().words,
            vec![0u64.wrapping_sub(16_777_216)]
        );
    }

    #[test]
    fn decode_with_divisor() {
        let r = RingVec {
            words: vec![100_663_296],
            scale_bits: 24,
            layout: vec![Layer::new("x", &[1])],
        };
        assert_eq!(decode_fixed(&r, 3).unwrap().values(), &[2.0]);
    }

    #[test]
    fn decode_zero_words() {
        let r = RingVec::zeros(5, 24, vec![Layer::new("x", &[5])]);
        assert!(decode_fixed(&r, 7).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn brute_force_round_trip() {
        let mut rng = derive_rng(11, "fixed/round-trip");
        let xs: Vec<f64> = (0..1000).map(|_| rng.uniform(-100.0, 100.0)).collect();
        let back = decode_fixed(&encode_fixed(&vector(xs.clone()), 24).unwrap(), 1).unwrap();
        let worst = xs
            .iter()
            .zip(back.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 2f64.powi(-25), "worst {worst}");
    }

    #[test]
    fn overflow_and_scale_errors() {
        assert!(matches!(
            encode_fixed(&scalar(2f64.powi(40)), 24),
            Err(FixedError::Overflow { index: 0, .. })
        ));
        assert!(matches!(encode_fixed(&scalar(f64::NAN), 24), Err(FixedError::Overflow { .. })));
        assert_eq!(encode_fixed(&scalar(1.0), 7).unwrap_err(), FixedError::Scale(7));
        assert_eq!(encode_fixed(&scalar(1.0), 41).unwrap_err(), FixedError::Scale(41));
        let r = encode_fixed(&scalar(1.0), 24).unwrap();
        assert_eq!(decode_fixed(&r, 0).unwrap_err(), FixedError::Divisor);
    }

    #[test]
    fn sum_is_order_independent() {
        let mut rng = derive_rng(3, "fixed/assoc");
        for trial in 0..100 {
            let n = 2 + (trial % 7);
            let vecs: Vec<RingVec> = (0..n)
                .map(|_| RingVec {
                    words: (0..16).map(|_| rng.next_u64()).collect(),
                    scale_bits: 24,
                    layout: vec![Layer::new("x", &[16])],
                })
                .collect();
            let sum = |order: &[usize]| {
                let mut acc = RingVec::zeros(16, 24, vec![Layer::new("x", &[16])]);
                for &i in order {
                    acc.add_assign(&vecs[i]).unwrap();
                }
                acc
            };
            let mut order: Vec<usize> = (0..n).collect();
            let forward = sum(&order);
            order.shuffle(&mut rng);
            assert_eq!(forward, sum(&order));
        }
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(
            xs in proptest::collection::vec(-1.0e6f64..1.0e6, 1..64),
            scale in 8u32..=30,
        ) {
            let back = decode_fixed(&encode_fixed(&vector(xs.clone()), scale).unwrap(), 1).unwrap();
            let half = 2f64.powi(-(scale as i32) - 1);
            for (a, b) in xs.iter().zip(back.values()) {
                prop_assert!((a - b).abs() <= half);
            }
        }
    }
}
