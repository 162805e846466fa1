//! Reconstruction attack on plaintext latents.
//!
//! A decoder is fitted from latent vectors back to the inputs that produced
//! them; a low held-out error shows that unmasked embeddings leak their
//! inputs. The reference architecture for 112×112 face crops is a fully
//! connected projection of the 512-d latent followed by a stack of
//! transposed convolutions ending in `tanh` over pixels normalised to
//! `[-1, 1]`. Inputs here are feature vectors, so the decoder is a dense
//! stack with the same `tanh` output over min-max scaled features.
//!
//! Only plain latent matrices are accepted. Masked uploads cannot be fed in
//! without a silo's private left inverse.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, DenseSpec, DenseStack};
use crate::param::{ParamError, ParamVec};
use crate::rng::derive_rng;

pub const MIN_PAIRS: usize = 10;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("need at least {MIN_PAIRS} training pairs, got {0}")]
    TooFewPairs(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl DecoderConfig {
    pub fn stack(&self) -> DenseStack {
        let mut layers = Vec::new();
        let mut fan_in = self.embed_dim;
        for (i, &h) in self.hidden_dims.iter().enumerate() {
            layers.push(DenseSpec {
                name: format!("dec.{i}"),
                fan_in,
                fan_out: h,
                activation: self.hidden_activation,
            });
            fan_in = h;
        }
        layers.push(DenseSpec {
            name: "out".into(),
            fan_in,
            fan_out: self.output_dim,
            activation: self.output_activation,
        });
        DenseStack { layers }
    }
}

/// Per-feature affine map onto `[-1, 1]`, fitted on training inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let lo = x.fold_axis(Axis(0), f64::INFINITY, |a, &b| a.min(b)).to_vec();
        let hi = x.fold_axis(Axis(0), f64::NEG_INFINITY, |a, &b| a.max(b)).to_vec();
        Self { lo, hi }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                let span = (self.hi[j] - self.lo[j]).max(1e-12);
                *v = 2.0 * (*v - self.lo[j]) / span - 1.0;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// `0.5 * mean squared error` per element and its gradient.
fn mse_and_grad(stack: &DenseStack, values: &[f64], z: Array2<f64>, target: &Array2<f64>) -> (f64, Vec<f64>) {
    let cache = stack.forward(values, z);
    let diff = cache.last() - target;
    let count = diff.len() as f64;
    let loss = 0.5 * diff.iter().map(|d| d * d).sum::<f64>() / count;
    let mut grad = vec![0.0; values.len()];
    stack.backward(values, &cache, diff / count, &mut grad);
    (loss, grad)
}

/// Fits a decoder by seeded mini-batch SGD. Returns parameters and the
/// per-epoch mean training loss.
pub fn train_decoder(
    latents: ArrayView2<f64>,
    inputs: ArrayView2<f64>,
    cfg: &DecoderConfig,
    train: DecoderTraining,
) -> Result<(ParamVec, Vec<f64>), AttackError> {
    let n = latents.nrows();
    if n < MIN_PAIRS {
        return Err(AttackError::TooFewPairs(n));
    }
    if inputs.nrows() != n || latents.ncols() != cfg.embed_dim || inputs.ncols() != cfg.output_dim {
        return Err(AttackError::Dimension(format!(
            "latents {}x{}, inputs {}x{}",
            n,
            latents.ncols(),
            inputs.nrows(),
            inputs.ncols()
        )));
    }
    let stack = cfg.stack();
    let mut rng = derive_rng(train.seed, "attack/decoder");
    let mut values = stack.init_values(&mut rng.child("init"));
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(train.epochs);
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0);
        for chunk in order.chunks(train.batch_size.max(1)) {
            let zb = latents.select(Axis(0), chunk);
            let xb = inputs.select(Axis(0), chunk);
            let (loss, grad) = mse_and_grad(&stack, &values, zb, &xb);
            for (v, g) in values.iter_mut().zip(&grad) {
                *v -= train.lr * g;
            }
            total += loss;
            batches += 1;
        }
        history.push(total / batches as f64);
    }
    Ok((ParamVec::new(values, stack.layout())?, history))
}

pub fn decode(decoder: &ParamVec, cfg: &DecoderConfig, latents: ArrayView2<f64>) -> Array2<f64> {
    cfg.stack()
        .forward(decoder.values(), latents.to_owned())
        .outputs
        .pop()
        .unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub rel_mse: f64,
    pub baseline_rel_mse: f64,
    pub mse: f64,
    pub baseline_mse: f64,
    pub n_pairs: usize,
}

fn mse(a: &Array2<f64>, b: ArrayView2<f64>) -> f64 {
    let d = a - &b;
    d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64
}

/// Held-out error relative to predicting the held-out mean input.
pub fn reconstruction_report(reconstructed: &Array2<f64>, inputs: ArrayView2<f64>) -> ReconstructionReport {
    let mean: Array1<f64> = inputs.mean_axis(Axis(0)).expect("non-empty held-out set");
    let baseline = Array2::from_shape_fn(inputs.raw_dim(), |(_, j)| mean[j]);
    let mse_model = mse(reconstructed, inputs);
    let mse_base = mse(&baseline, inputs);
    ReconstructionReport {
        rel_mse: mse_model / mse_base,
        baseline_rel_mse: mse_base / mse_base,
        mse: mse_model,
        baseline_mse: mse_base,
        n_pairs: inputs.nrows(),
    }
}
