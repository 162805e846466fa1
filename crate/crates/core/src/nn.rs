//! Dense layer stacks over a flat [`ParamVec`], with batched forward and
//! backward passes. Shared by the encoder and the attack decoder.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::param::{Layer, ParamVec};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        match self {
            Activation::Relu => x.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => x.mapv_inplace(f64::tanh),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` by the derivative, expressed through the layer output.
    fn backprop(self, output: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Relu => grad.zip_mut_with(output, |g, &y| {
                if y <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Tanh => grad.zip_mut_with(output, |g, &y| *g *= 1.0 - y * y),
            Activation::Identity => {}
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

/// An ordered stack of fully connected layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseStack {
    pub layers: Vec<DenseSpec>,
}

/// Activations recorded during a forward pass; `outputs[0]` is the input.
pub struct ForwardCache {
    pub outputs: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn last(&self) -> &Array2<f64> {
        self.outputs.last().expect("cache holds at least the input")
    }
}

impl DenseStack {
    pub fn layout(&self) -> Vec<Layer> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    Layer::new(format!("{}.weight", l.name), &[l.fan_out, l.fan_in]),
                    Layer::new(format!("{}.bias", l.name), &[l.fan_out]),
                ]
            })
            .collect()
    }

    pub fn numel(&self) -> usize {
        self.layers.iter().map(|l| l.fan_out * (l.fan_in + 1)).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    /// Uniform fan-in initialisation, weights and biases in `±1/sqrt(fan_in)`.
    pub fn init_values(&self, rng: &mut SeededRng) -> Vec<f64> {
        let mut values = Vec::with_capacity(self.numel());
        for l in &self.layers {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for _ in 0..l.fan_out * (l.fan_in + 1) {
                values.push(rng.uniform(-bound, bound));
            }
        }
        values
    }

    fn views<'a>(&self, values: &'a [f64]) -> Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let w_len = l.fan_out * l.fan_in;
                let w = ArrayView2::from_shape((l.fan_out, l.fan_in), &values[off..off + w_len])
                    .expect("layout sized by construction");
                off += w_len;
                let b = ArrayView1::from(&values[off..off + l.fan_out]);
                off += l.fan_out;
                (w, b)
            })
            .collect()
    }

    /// Runs the stack on a `batch x input_dim` matrix. `values` must hold
    /// exactly this stack's parameters.
    pub fn forward(&self, values: &[f64], input: Array2<f64>) -> ForwardCache {
        debug_assert_eq!(values.len(), self.numel());
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(input);
        for (spec, (w, b)) in self.layers.iter().zip(self.views(values)) {
            let mut y = outputs.last().unwrap().dot(&w.t());
            y += &b;
            spec.activation.apply(&mut y);
            outputs.push(y);
        }
        ForwardCache { outputs }
    }

    /// Back-propagates `grad_out` (gradient w.r.t. the stack output) and
    /// accumulates parameter gradients into `grad`. Returns the gradient with
    /// respect to the input.
    pub fn backward(
        &self,
        values: &[f64],
        cache: &ForwardCache,
        mut grad_out: Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let views = self.views(values);
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.fan_out * (l.fan_in + 1);
        }
        for (i, spec) in self.layers.iter().enumerate().rev() {
            let output = &cache.outputs[i + 1];
            let input = &cache.outputs[i];
            spec.activation.backprop(output, &mut grad_out);
            let gw = grad_out.t().dot(input);
            let gb = grad_out.sum_axis(Axis(0));
            let base = offsets[i];
            let w_len = spec.fan_out * spec.fan_in;
            for (dst, src) in grad[base..base + w_len].iter_mut().zip(gw.iter()) {
                *dst += src;
            }
            for (dst, src) in grad[base + w_len..base + w_len + spec.fan_out]
                .iter_mut()
                .zip(gb.iter())
            {
                *dst += src;
            }
            grad_out = grad_out.dot(&views[i].0);
        }
        grad_out
    }
}

/// Packs row vectors into a `rows x dim` matrix.
pub fn stack_rows(rows: &[&[f64]], dim: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), dim));
    for (mut dst, src) in m.rows_mut().into_iter().zip(rows) {
        dst.assign(&ArrayView1::from(*src));
    }
    m
}

pub fn row_vec(m: &Array2<f64>, i: usize) -> Vec<f64> {
    m.row(i).to_vec()
}

pub fn zeros_like(p: &ParamVec) -> Vec<f64> {
    vec![0.0; p.len()]
}

pub fn l2_norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn mean_rows(m: &Array2<f64>) -> Array1<f64> {
    m.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(m.ncols()))
}
