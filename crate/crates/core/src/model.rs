//! The per-silo embedding model: a fully connected encoder feeding a
//! classification head, trained with plain mini-batch SGD.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, DenseSpec, DenseStack};
use crate::param::{Layer, ParamError, ParamVec};
use crate::rng::SeededRng;

/// Norm guard for zero-length latents and class weights.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("expected input of length {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("class index {class} out of range for {num_classes} classes")]
    Label { class: usize, num_classes: usize },
    #[error("empty training data")]
    EmptyData,
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Softmax,
    AngularMargin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub activation: Activation,
    pub loss: LossKind,
    /// Additive angular margin `m` (radians).
    pub margin: f64,
    /// Logit scale `s` for the angular-margin head.
    pub scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 48,
            hidden_dims: vec![96],
            embed_dim: 64,
            num_classes: 60,
            activation: Activation::Relu,
            loss: LossKind::Softmax,
            margin: 0.2,
            scale: 16.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2");
        }
        if self.embed_dim < 2 {
            return bad("embed_dim must be at least 2");
        }
        if self.input_dim == 0 || self.hidden_dims.iter().any(|&h| h == 0) {
            return bad("layer widths must be positive");
        }
        if self.activation == Activation::Identity {
            return bad("hidden activation must be relu or tanh");
        }
        if !(self.margin >= 0.0) || !(self.scale > 0.0) {
            return bad("margin must be >= 0 and scale > 0");
        }
        Ok(())
    }

    /// Hidden layers plus the linear embedding layer.
    pub fn encoder_stack(&self) -> DenseStack {
        let mut layers = Vec::new();
        let mut fan_in = self.input_dim;
        for (i, &h) in self.hidden_dims.iter().enumerate() {
            layers.push(DenseSpec {
                name: format!("enc.{i}"),
                fan_in,
                fan_out: h,
                activation: self.activation,
            });
            fan_in = h;
        }
        layers.push(DenseSpec {
            name: "embed".into(),
            fan_in,
            fan_out: self.embed_dim,
            activation: Activation::Identity,
        });
        DenseStack { layers }
    }

    pub fn layout(&self) -> Vec<Layer> {
        let mut layout = self.encoder_stack().layout();
        layout.push(Layer::new("head.weight", &[self.num_classes, self.embed_dim]));
        layout.push(Layer::new("head.bias", &[self.num_classes]));
        layout
    }

    pub fn numel(&self) -> usize {
        self.encoder_stack().numel() + self.num_classes * (self.embed_dim + 1)
    }
}

/// Fresh parameters, uniform in `±1/sqrt(fan_in)` per layer.
pub fn init_model(cfg: &EncoderConfig, rng: &mut SeededRng) -> Result<ParamVec, ModelError> {
    cfg.validate()?;
    let mut values = cfg.encoder_stack().init_values(rng);
    let bound = 1.0 / (cfg.embed_dim as f64).sqrt();
    for _ in 0..cfg.num_classes * (cfg.embed_dim + 1) {
        values.push(rng.uniform(-bound, bound));
    }
    Ok(ParamVec::new(values, cfg.layout())?)
}

fn check_params(params: &ParamVec, cfg: &EncoderConfig) -> Result<(), ModelError> {
    if params.len() != cfg.numel() {
        return Err(ParamError::Length {
            expected: cfg.numel(),
            got: params.len(),
        }
        .into());
    }
    Ok(())
}

/// Latent vector (embedding-layer output) for a single input.
pub fn embed(params: &ParamVec, cfg: &EncoderConfig, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    if x.len() != cfg.input_dim {
        return Err(ModelError::Dimension {
            expected: cfg.input_dim,
            got: x.len(),
        });
    }
    let input = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("1 x n");
    Ok(embed_batch(params, cfg, input.view())?.row(0).to_vec())
}

/// Latents for every row of `x`.
pub fn embed_batch(
    params: &ParamVec,
    cfg: &EncoderConfig,
    x: ArrayView2<f64>,
) -> Result<Array2<f64>, ModelError> {
    check_params(params, cfg)?;
    if x.ncols() != cfg.input_dim {
        return Err(ModelError::Dimension {
            expected: cfg.input_dim,
            got: x.ncols(),
        });
    }
    let stack = cfg.encoder_stack();
    let enc = &params.values()[..stack.numel()];
    Ok(stack.forward(enc, x.to_owned()).outputs.pop().unwrap())
}

/// Mean cross-entropy over `(x, labels)` and its gradient.
pub fn loss_and_grad(
    params: &ParamVec,
    cfg: &EncoderConfig,
    x: ArrayView2<f64>,
    labels: &[usize],
) -> Result<(f64, ParamVec), ModelError> {
    check_params(params, cfg)?;
    if labels.is_empty() {
        return Err(ModelError::EmptyData);
    }
    if x.nrows() != labels.len() || x.ncols() != cfg.input_dim {
        return Err(ModelError::Dimension {
            expected: cfg.input_dim,
            got: x.ncols(),
        });
    }
    if let Some(&class) = labels.iter().find(|&&c| c >= cfg.num_classes) {
        return Err(ModelError::Label {
            class,
            num_classes: cfg.num_classes,
        });
    }

    let stack = cfg.encoder_stack();
    let n_enc = stack.numel();
    let c = cfg.num_classes;
    let f = cfg.embed_dim;
    let values = params.values();
    let w = ArrayView2::from_shape((c, f), &values[n_enc..n_enc + c * f]).expect("head shape");
    let b = Array1::from(values[n_enc + c * f..].to_vec());

    let cache = stack.forward(&values[..n_enc], x.to_owned());
    let z = cache.last();
    let mut grad = vec![0.0; values.len()];

    let (loss, grad_z) = match cfg.loss {
        LossKind::Softmax => {
            let logits = z.dot(&w.t()) + &b;
            let (loss, dlogits) = softmax_xent(logits, labels);
            let gw = dlogits.t().dot(z);
            let gb = dlogits.sum_axis(Axis(0));
            grad[n_enc..n_enc + c * f].copy_from_slice(gw.as_slice().expect("standard layout"));
            grad[n_enc + c * f..].copy_from_slice(gb.as_slice().expect("standard layout"));
            (loss, dlogits.dot(&w))
        }
        LossKind::AngularMargin => {
            // head.bias is unused by this head and keeps a zero gradient
            let (z_hat, z_norm) = normalize_rows(z);
            let (w_hat, w_norm) = normalize_rows(&w.to_owned());
            let cos = z_hat.dot(&w_hat.t());
            let (cos_m, sin_m) = (cfg.margin.cos(), cfg.margin.sin());
            let mut logits = cos.mapv(|v| cfg.scale * v);
            // cos(theta + m) = cos(theta) cos(m) - sin(theta) sin(m), theta in [0, pi]
            for (i, &y) in labels.iter().enumerate() {
                let ct = cos[[i, y]].clamp(-1.0, 1.0);
                let st = (1.0 - ct * ct).max(0.0).sqrt();
                logits[[i, y]] = cfg.scale * (ct * cos_m - st * sin_m);
            }
            let (loss, dlogits) = softmax_xent(logits, labels);
            let mut dcos = dlogits.mapv(|v| v * cfg.scale);
            for (i, &y) in labels.iter().enumerate() {
                let ct = cos[[i, y]].clamp(-1.0, 1.0);
                let st = (1.0 - ct * ct).max(NORM_EPS).sqrt();
                dcos[[i, y]] *= cos_m + sin_m * ct / st;
            }
            let d_zhat = dcos.dot(&w_hat);
            let d_what = dcos.t().dot(&z_hat);
            let gw = unnormalize_grad(&w_hat, &w_norm, d_what);
            grad[n_enc..n_enc + c * f].copy_from_slice(gw.as_slice().expect("standard layout"));
            (loss, unnormalize_grad(&z_hat, &z_norm, d_zhat))
        }
    };
    stack.backward(&values[..n_enc], &cache, grad_z, &mut grad[..n_enc]);
    Ok((loss, ParamVec::new(grad, params.layout().to_vec())?))
}

/// Mean cross-entropy and its gradient w.r.t. the logits.
fn softmax_xent(logits: Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let batch = labels.len() as f64;
    let mut probs = logits;
    let mut loss = 0.0;
    for (mut row, &y) in probs.rows_mut().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
        loss -= row[y].max(f64::MIN_POSITIVE).ln();
        row[y] -= 1.0;
        row.mapv_inplace(|v| v / batch);
    }
    (loss / batch, probs)
}

fn normalize_rows(m: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(NORM_EPS));
    let mut out = m.clone();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }
    (out, norms)
}

/// Chain rule through `v -> v / |v|` for each row.
fn unnormalize_grad(hat: &Array2<f64>, norms: &Array1<f64>, mut d_hat: Array2<f64>) -> Array2<f64> {
    for ((mut g, h), &n) in d_hat.rows_mut().into_iter().zip(hat.rows()).zip(norms.iter()) {
        let proj = g.dot(&h);
        g.zip_mut_with(&h, |gv, &hv| *gv = (*gv - proj * hv) / n);
    }
    d_hat
}

/// A local labelled training set: one row per sample.
#[derive(Clone, Debug)]
pub struct LabeledSet {
    pub x: Array2<f64>,
    pub y: Vec<usize>,
}

impl LabeledSet {
    pub fn new(rows: &[(&[f64], usize)], input_dim: usize) -> Self {
        let mut x = Array2::zeros((rows.len(), input_dim));
        for (mut dst, (src, _)) in x.rows_mut().into_iter().zip(rows) {
            dst.assign(&ndarray::ArrayView1::from(*src));
        }
        Self {
            x,
            y: rows.iter().map(|(_, y)| *y).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            batch_size: 32,
        }
    }
}

/// SGD for `epochs` passes with a fresh seeded shuffle per epoch.
/// Returns the new parameters and the mean batch loss of every epoch.
pub fn train_local(
    model: &ParamVec,
    cfg: &EncoderConfig,
    data: &LabeledSet,
    epochs: usize,
    sgd: SgdConfig,
    rng: &mut SeededRng,
) -> Result<(ParamVec, Vec<f64>), ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyData);
    }
    if epochs == 0 || sgd.batch_size == 0 {
        return Err(ModelError::Config("epochs and batch_size must be positive".into()));
    }
    let mut params = model.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(sgd.batch_size) {
            let xb = data.x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| data.y[i]).collect();
            let (loss, grad) = loss_and_grad(&params, cfg, xb.view(), &yb)?;
            params.add_scaled(&grad, -sgd.lr)?;
            total += loss;
            batches += 1;
        }
        history.push(total / batches as f64);
    }
    Ok((params, history))
}

/// Mean loss over a whole set without updating parameters.
pub fn evaluate_loss(params: &ParamVec, cfg: &EncoderConfig, data: &LabeledSet) -> Result<f64, ModelError> {
    Ok(loss_and_grad(params, cfg, data.x.view(), &data.y)?.0)
}

/// `M` independently seeded encoders with a shared architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub members: Vec<(EncoderConfig, ParamVec)>,
}

impl EnsembleModel {
    /// Member `m` is initialised from `rng.child("member=m")`.
    pub fn init(cfg: &EncoderConfig, size: usize, rng: &SeededRng) -> Result<Self, ModelError> {
        if size == 0 {
            return Err(ModelError::Config("ensemble needs at least one member".into()));
        }
        let members = (0..size)
            .map(|m| {
                let mut r = rng.child(&format!("member={m}"));
                Ok((cfg.clone(), init_model(cfg, &mut r)?))
            })
            .collect::<Result<_, ModelError>>()?;
        Ok(Self { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// All member parameters as one vector, layer names prefixed `m<i>.`.
    pub fn flatten(&self) -> ParamVec {
        let parts: Vec<ParamVec> = self.members.iter().map(|(_, p)| p.clone()).collect();
        let prefixes: Vec<String> = (0..parts.len()).map(|m| format!("m{m}.")).collect();
        ParamVec::concat(&parts, &prefixes)
    }

    /// Replaces member parameters from a vector produced by [`Self::flatten`].
    pub fn with_flat(&self, flat: &ParamVec) -> Result<Self, ModelError> {
        let layouts: Vec<Vec<Layer>> = self.members.iter().map(|(_, p)| p.layout().to_vec()).collect();
        let parts = flat.split(&layouts)?;
        Ok(Self {
            members: self
                .members
                .iter()
                .zip(parts)
                .map(|((cfg, _), p)| (cfg.clone(), p))
                .collect(),
        })
    }
}

/// One latent per ensemble member.
pub fn ensemble_embed(ens: &EnsembleModel, x: &[f64]) -> Result<Vec<Vec<f64>>, ModelError> {
    ens.members
        .iter()
        .map(|(cfg, params)| embed(params, cfg, x))
        .collect()
}
