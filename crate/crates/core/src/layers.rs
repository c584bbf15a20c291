//! Neural building blocks on top of the tape: convolution block, dense
//! layer, batch normalization, dropout, swish, average pooling and
//! dot-product attention.
//!
//! The tape-level blocks ([`ConvBlock`], [`DenseLayer`]) operate on batched
//! channels-last tensors. The free functions below run a single op on plain
//! tensors and are what the unit tests and oracles exercise.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Graph, NodeId, ParamId, ParamSet, Tensor};

pub const BATCH_NORM_EPSILON: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.99;
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Swish,
    Linear,
}

/// Conv 3×3 → batch norm → dropout → swish → average pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub filters: usize,
    pub pool: (usize, usize),
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub units: usize,
    pub activation: Activation,
}

/// Running per-channel statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

/// Mutable state threaded through one forward pass.
pub struct ForwardContext<'a> {
    pub mode: Mode,
    pub rng: Option<&'a mut dyn RngCore>,
    /// Batch statistics observed in training mode, keyed by buffer index.
    pub bn_updates: Vec<(usize, BatchStats)>,
}

impl<'a> ForwardContext<'a> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            rng: None,
            bn_updates: Vec::new(),
        }
    }

    pub fn train(rng: &'a mut dyn RngCore) -> Self {
        Self {
            mode: Mode::Train,
            rng: Some(rng),
            bn_updates: Vec::new(),
        }
    }
}

pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut dyn RngCore) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::raw(shape.to_vec(), data)
}

fn dropout_mask(len: usize, rate: f64, rng: &mut dyn RngCore) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub(crate) fn apply_dropout(
    g: &mut Graph,
    x: NodeId,
    rate: f64,
    ctx: &mut ForwardContext<'_>,
) -> Result<NodeId> {
    if ctx.mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let rng = ctx
        .rng
        .as_deref_mut()
        .ok_or_else(|| Error::Config("training-mode dropout needs an rng".into()))?;
    let mask = dropout_mask(g.value(x).len(), rate, rng);
    g.mask(x, mask)
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub spec: ConvBlockSpec,
    kernel: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    stats: usize,
}

impl ConvBlock {
    pub fn new(
        prefix: &str,
        in_channels: usize,
        spec: ConvBlockSpec,
        params: &mut ParamSet,
        buffers: &mut Vec<BatchNormStats>,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let f = spec.filters;
        let kernel = params.add(
            format!("{prefix}.conv.kernel"),
            glorot_uniform(&[3, 3, in_channels, f], 9 * in_channels, 9 * f, rng),
        )?;
        let bias = params.add(format!("{prefix}.conv.bias"), Tensor::zeros(&[f]))?;
        let gamma = params.add(format!("{prefix}.bn.gamma"), Tensor::full(&[f], 1.0))?;
        let beta = params.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[f]))?;
        buffers.push(BatchNormStats::new(format!("{prefix}.bn"), f));
        Ok(Self {
            spec,
            kernel,
            bias,
            gamma,
            beta,
            stats: buffers.len() - 1,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        buffers: &[BatchNormStats],
        x: NodeId,
        ctx: &mut ForwardContext<'_>,
    ) -> Result<NodeId> {
        let k = g.param(params, self.kernel)?;
        let b = g.param(params, self.bias)?;
        let y = g.conv2d(x, k, b)?;
        let gamma = g.param(params, self.gamma)?;
        let beta = g.param(params, self.beta)?;
        let y = match ctx.mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(y, gamma, beta, BATCH_NORM_EPSILON)?;
                ctx.bn_updates.push((self.stats, stats));
                y
            }
            Mode::Eval => {
                let s = &buffers[self.stats];
                g.batch_norm_eval(y, gamma, beta, &s.mean, &s.var, BATCH_NORM_EPSILON)?
            }
        };
        let y = apply_dropout(g, y, self.spec.dropout_rate, ctx)?;
        let y = g.swish(y)?;
        g.avg_pool(y, self.spec.pool.0, self.spec.pool.1)
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub spec: DenseSpec,
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
}

impl DenseLayer {
    pub fn new(
        prefix: &str,
        in_units: usize,
        spec: DenseSpec,
        params: &mut ParamSet,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let w = params.add(
            format!("{prefix}.kernel"),
            glorot_uniform(&[in_units, spec.units], in_units, spec.units, rng),
        )?;
        let b = params.add(format!("{prefix}.bias"), Tensor::zeros(&[spec.units]))?;
        Ok(Self { spec, w, b })
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: NodeId) -> Result<NodeId> {
        let w = g.param(params, self.w)?;
        let b = g.param(params, self.b)?;
        let y = g.dense(x, w, b)?;
        match self.spec.activation {
            Activation::Swish => g.swish(y),
            Activation::Linear => Ok(y),
        }
    }
}

fn batched(x: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.reshape(&shape)
}

fn unbatched(x: &Tensor) -> Result<Tensor> {
    x.reshape(&x.shape()[1..])
}

/// Same-padded 3×3 convolution of a single `[H,W,Cin]` image.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::dim(format!("conv2d expects [H,W,C], got {:?}", x.shape())));
    }
    let mut g = Graph::new();
    let xn = g.input(batched(x)?)?;
    let k = g.input(kernel.clone())?;
    let b = g.input(bias.clone())?;
    let y = g.conv2d(xn, k, b)?;
    unbatched(g.value(y))
}

/// Batch normalization of `[B, ..., C]` over all but the channel axis.
/// Training mode normalizes with batch statistics and updates `stats`.
pub fn batch_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mode: Mode,
    stats: &mut BatchNormStats,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.input(x.clone())?;
    let gn = g.input(gamma.clone())?;
    let bn = g.input(beta.clone())?;
    let y = match mode {
        Mode::Train => {
            let (y, batch) = g.batch_norm_train(xn, gn, bn, BATCH_NORM_EPSILON)?;
            stats.update(&batch, BATCH_NORM_MOMENTUM);
            y
        }
        Mode::Eval => g.batch_norm_eval(xn, gn, bn, &stats.mean, &stats.var, BATCH_NORM_EPSILON)?,
    };
    Ok(g.value(y).clone())
}

/// Inverted dropout. Identity in eval mode or at rate 0.
pub fn dropout(x: &Tensor, rate: f64, mode: Mode, rng: &mut dyn RngCore) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng);
    let data = x.data().iter().zip(mask).map(|(v, m)| v * m).collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

pub fn swish(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.input(x.clone())?;
    let y = g.swish(xn)?;
    Ok(g.value(y).clone())
}

/// Floor-semantics average pooling of a single `[H,W,C]` image.
pub fn avg_pool(x: &Tensor, pool: (usize, usize)) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::dim(format!("avg_pool expects [H,W,C], got {:?}", x.shape())));
    }
    let mut g = Graph::new();
    let xn = g.input(batched(x)?)?;
    let y = g.avg_pool(xn, pool.0, pool.1)?;
    unbatched(g.value(y))
}

pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor, activation: Activation) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.input(x.clone())?;
    let wn = g.input(w.clone())?;
    let bn = g.input(b.clone())?;
    let mut y = g.dense(xn, wn, bn)?;
    if activation == Activation::Swish {
        y = g.swish(y)?;
    }
    Ok(g.value(y).clone())
}

/// `mean_n(softmax(q kᵀ) v)` for `[N,D]` inputs, giving a `[D]` vector.
pub fn dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.ndim() != 2 {
        return Err(Error::dim(format!("attention expects [N,D], got {:?}", q.shape())));
    }
    let mut g = Graph::new();
    let qn = g.input(batched(q)?)?;
    let kn = g.input(batched(k)?)?;
    let vn = g.input(batched(v)?)?;
    let z = g.attention(qn, kn, vn)?;
    unbatched(g.value(z))
}
