//! Non-zero-sum masked aggregation.
//!
//! Every silo derives the same masks `R_1..R_N` from the shared seed. Silo
//! `i < N` submits `W_i + R_i`; silo `N` submits `W_N - (R_1 + .. + R_{N-1}) + R_N`.
//! The ring sum the aggregator sees is therefore `sum(W) + R_N`, which hides
//! the global model as well as the local ones. Silos remove `R_N` and divide
//! by `N` while decoding.

use std::collections::BTreeMap;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fixed::{decode_fixed, FixedError, RingVec};
use crate::param::{layout_numel, Layer, ParamVec};
use crate::rng::derive_rng;

#[derive(Debug, Error, PartialEq)]
pub enum SecAggError {
    #[error("need at least one silo")]
    NoSilos,
    #[error("silo index {index} outside 1..={n}")]
    SiloIndex { index: usize, n: usize },
    #[error("duplicate submission from silo {0}")]
    Duplicate(usize),
    #[error("missing submission from silo {0}")]
    Missing(usize),
    #[error("submission for round {got} in round {expected}")]
    WrongRound { expected: u64, got: u64 },
    #[error(transparent)]
    Fixed(#[from] FixedError),
}

/// Masks for one round, identical on every silo.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundMasks {
    pub round: u64,
    pub masks: Vec<RingVec>,
}

impl RoundMasks {
    pub fn silos(&self) -> usize {
        self.masks.len()
    }
}

/// The aggregator-visible artifact of one silo in one round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedModel {
    pub silo: usize,
    pub round: u64,
    pub words: RingVec,
}

pub fn mask_label(round: u64, i: usize) -> String {
    format!("masks/r={round}/i={i}")
}

/// Uniform ring masks `R_i` from `derive_rng(seed, "masks/r=<round>/i=<i>")`.
pub fn gen_round_masks(
    seed: u64,
    round: u64,
    n: usize,
    layout: &[Layer],
    scale_bits: u32,
) -> Result<RoundMasks, SecAggError> {
    if n == 0 {
        return Err(SecAggError::NoSilos);
    }
    let dim = layout_numel(layout);
    let masks = (1..=n)
        .map(|i| {
            let mut rng = derive_rng(seed, mask_label(round, i));
            RingVec {
                words: (0..dim).map(|_| rng.next_u64()).collect(),
                scale_bits,
                layout: layout.to_vec(),
            }
        })
        .collect();
    Ok(RoundMasks { round, masks })
}

/// Masks silo `i`'s (1-based) encoded model.
pub fn mask_local(model: &RingVec, i: usize, rm: &RoundMasks) -> Result<MaskedModel, SecAggError> {
    let n = rm.silos();
    if i == 0 || i > n {
        return Err(SecAggError::SiloIndex { index: i, n });
    }
    let mut words = model.clone();
    if i < n {
        words.add_assign(&rm.masks[i - 1])?;
    } else {
        for earlier in &rm.masks[..n - 1] {
            words.sub_assign(earlier)?;
        }
        words.add_assign(&rm.masks[n - 1])?;
    }
    Ok(MaskedModel {
        silo: i,
        round: rm.round,
        words,
    })
}

/// Ring sum of exactly one submission per silo `1..=n`.
pub fn aggregate_masked(submissions: &[MaskedModel], n: usize) -> Result<RingVec, SecAggError> {
    let first = submissions.first().ok_or(SecAggError::Missing(1))?;
    let mut seen = BTreeMap::new();
    for s in submissions {
        if s.silo == 0 || s.silo > n {
            return Err(SecAggError::SiloIndex { index: s.silo, n });
        }
        if s.round != first.round {
            return Err(SecAggError::WrongRound {
                expected: first.round,
                got: s.round,
            });
        }
        if seen.insert(s.silo, s).is_some() {
            return Err(SecAggError::Duplicate(s.silo));
        }
    }
    if let Some(missing) = (1..=n).find(|i| !seen.contains_key(i)) {
        return Err(SecAggError::Missing(missing));
    }
    let mut sum = RingVec::zeros(first.words.len(), first.words.scale_bits, first.words.layout.clone());
    for s in seen.values() {
        sum.add_assign(&s.words)?;
    }
    Ok(sum)
}

/// `(masked_sum - R_N)` decoded with divisor `N`: the plain mean of the
/// silos' encoded models.
pub fn unmask_global(masked_sum: &RingVec, rm: &RoundMasks) -> Result<ParamVec, SecAggError> {
    let n = rm.silos();
    let mut plain = masked_sum.clone();
    plain.sub_assign(&rm.masks[n - 1])?;
    Ok(decode_fixed(&plain, n as u64)?)
}
