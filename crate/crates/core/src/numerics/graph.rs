//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Each method evaluates
//! one operation eagerly, records what its backward rule needs, and returns a
//! [`NodeId`]. [`Graph::backward`] then walks the tape in reverse and returns
//! adjoints for every node that (transitively) depends on a parameter.
//!
//! All image-like tensors are channels-last: `[batch, height, width, channels]`.

use super::params::{ParamId, ParamSet};
use super::tensor::{matmul_into, softmax_row, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    MatMul(NodeId, NodeId),
    Dense {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Swish(NodeId),
    Conv2d {
        x: NodeId,
        k: NodeId,
        b: NodeId,
    },
    AvgPool {
        x: NodeId,
        ph: usize,
        pw: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Mask {
        x: NodeId,
        mask: Vec<f64>,
    },
    Expand(NodeId),
    Concat(Vec<NodeId>),
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        weights: Vec<f64>,
    },
    GaussianNll {
        out: NodeId,
        labels: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads[node.0].as_ref()
    }

    /// Adjoints of every parameter leaf, one entry per leaf occurrence.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|&(pid, nid)| self.grads[nid.0].as_ref().map(|g| (pid, g)))
    }
}

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps each flat index of `target` to the flat index of `src` under
/// broadcasting of unit axes.
fn expand_index_map(src: &[usize], target: &[usize]) -> Vec<usize> {
    let ts = strides(target);
    let ss = strides(src);
    let n: usize = target.iter().product();
    (0..n)
        .map(|flat| {
            let mut rem = flat;
            let mut idx = 0;
            for ax in 0..target.len() {
                let i = rem / ts[ax];
                rem %= ts[ax];
                if src[ax] != 1 {
                    idx += i * ss[ax];
                }
            }
            idx
        })
        .collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId], name: &str) -> Result<NodeId> {
        value.ensure_finite(name)?;
        let requires_grad = match op {
            Op::Leaf => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn needs(&self, node: NodeId) -> bool {
        self.nodes[node.0].requires_grad
    }

    /// A constant input. No adjoint is propagated into it.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, &[], "input")
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Result<NodeId> {
        let p = params.get(id);
        let value = p.value.clone();
        let name = p.name.clone();
        self.push(value, Op::Param(id), &[], &name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same_shape("add", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::raw(va.shape().to_vec(), data);
        self.push(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same_shape("mul", va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::raw(va.shape().to_vec(), data);
        self.push(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x], "sum")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x], "reshape")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = super::tensor::matmul(self.value(a), self.value(b))?;
        self.push(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// Affine map `x W + b` along the last axis of `x`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vw.ndim() != 2 {
            return Err(Error::dim(format!("dense kernel must be 2-D, got {:?}", vw.shape())));
        }
        let (din, dout) = (vw.shape()[0], vw.shape()[1]);
        let (rows, cols) = vx.rows_cols();
        if cols != din || vb.shape() != [dout] {
            return Err(Error::dim(format!(
                "dense: input {:?}, kernel {:?}, bias {:?}",
                vx.shape(),
                vw.shape(),
                vb.shape()
            )));
        }
        let mut out = Vec::with_capacity(rows * dout);
        for _ in 0..rows {
            out.extend_from_slice(vb.data());
        }
        matmul_into(vx.data(), vw.data(), &mut out, rows, din, dout);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        self.push(Tensor::raw(shape, out), Op::Dense { x, w, b }, &[x, w, b], "dense")
    }

    pub fn swish(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Swish(x), &[x], "swish")
    }

    /// Stride-1, zero-padded 3×3 convolution: `[B,H,W,Cin]` with kernel
    /// `[3,3,Cin,Cout]` and bias `[Cout]` gives `[B,H,W,Cout]`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vk, vb) = (self.value(x), self.value(k), self.value(b));
        if vx.ndim() != 4 || vk.ndim() != 4 || vk.shape()[..2] != [3, 3] {
            return Err(Error::dim(format!(
                "conv2d expects [B,H,W,C] input and [3,3,Cin,Cout] kernel, got {:?} and {:?}",
                vx.shape(),
                vk.shape()
            )));
        }
        let [bsz, h, w, cin] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let cout = vk.shape()[3];
        if vk.shape()[2] != cin || vb.shape() != [cout] {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input {:?}, kernel {:?}, bias {:?}",
                vx.shape(),
                vk.shape(),
                vb.shape()
            )));
        }
        let xd = vx.data();
        let kd = vk.data();
        let mut out = vec![0.0; bsz * h * w * cout];
        for n in 0..bsz {
            for i in 0..h {
                for j in 0..w {
                    let o0 = ((n * h + i) * w + j) * cout;
                    let orow = &mut out[o0..o0 + cout];
                    orow.copy_from_slice(vb.data());
                    for di in 0..3 {
                        let Some(ii) = (i + di).checked_sub(1).filter(|&ii| ii < h) else {
                            continue;
                        };
                        for dj in 0..3 {
                            let Some(jj) = (j + dj).checked_sub(1).filter(|&jj| jj < w) else {
                                continue;
                            };
                            let x0 = ((n * h + ii) * w + jj) * cin;
                            for ci in 0..cin {
                                let xv = xd[x0 + ci];
                                let k0 = ((di * 3 + dj) * cin + ci) * cout;
                                for (o, &kv) in orow.iter_mut().zip(&kd[k0..k0 + cout]) {
                                    *o += xv * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::raw(vec![bsz, h, w, cout], out);
        self.push(value, Op::Conv2d { x, k, b }, &[x, k, b], "conv2d")
    }

    /// Non-overlapping window mean over the two spatial axes; trailing
    /// rows and columns that do not fill a window are discarded.
    pub fn avg_pool(&mut self, x: NodeId, ph: usize, pw: usize) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.ndim() != 4 || ph == 0 || pw == 0 {
            return Err(Error::dim(format!("avg_pool expects [B,H,W,C], got {:?}", vx.shape())));
        }
        let [bsz, h, w, c] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let (oh, ow) = (h / ph, w / pw);
        if oh == 0 || ow == 0 {
            return Err(Error::dim(format!(
                "pool window {ph}x{pw} larger than input {h}x{w}"
            )));
        }
        let scale = 1.0 / (ph * pw) as f64;
        let xd = vx.data();
        let mut out = vec![0.0; bsz * oh * ow * c];
        for n in 0..bsz {
            for oi in 0..oh {
                for oj in 0..ow {
                    let o0 = ((n * oh + oi) * ow + oj) * c;
                    for di in 0..ph {
                        for dj in 0..pw {
                            let x0 = ((n * h + oi * ph + di) * w + oj * pw + dj) * c;
                            for ch in 0..c {
                                out[o0 + ch] += xd[x0 + ch];
                            }
                        }
                    }
                    for v in &mut out[o0..o0 + c] {
                        *v *= scale;
                    }
                }
            }
        }
        let value = Tensor::raw(vec![bsz, oh, ow, c], out);
        self.push(value, Op::AvgPool { x, ph, pw }, &[x], "avg_pool")
    }

    /// Batch normalization over every axis but the last, using statistics of
    /// the current batch. Returns the statistics so the caller can update its
    /// running averages.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchStats)> {
        let vx = self.value(x);
        if vx.shape()[0] < 2 {
            return Err(Error::DegenerateBatch(
                "training-mode batch norm needs at least 2 samples".into(),
            ));
        }
        let (rows, c) = vx.rows_cols();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for r in 0..rows {
            for ch in 0..c {
                mean[ch] += vx.data()[r * c + ch];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        for r in 0..rows {
            for ch in 0..c {
                let d = vx.data()[r * c + ch] - mean[ch];
                var[ch] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let node = self.batch_norm_with(x, gamma, beta, &mean, inv_std, true)?;
        Ok((node, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.batch_norm_with(x, gamma, beta, running_mean, inv_std, false)
    }

    fn batch_norm_with(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
    ) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, c) = vx.rows_cols();
        if vg.shape() != [c] || vb.shape() != [c] || mean.len() != c || inv_std.len() != c {
            return Err(Error::dim(format!(
                "batch_norm: input {:?} with scale {:?}, shift {:?}",
                vx.shape(),
                vg.shape(),
                vb.shape()
            )));
        }
        let mut xhat = vec![0.0; rows * c];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            for ch in 0..c {
                let i = r * c + ch;
                xhat[i] = (vx.data()[i] - mean[ch]) * inv_std[ch];
                out[i] = vg.data()[ch] * xhat[i] + vb.data()[ch];
            }
        }
        let value = Tensor::raw(vx.shape().to_vec(), out);
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        };
        self.push(value, op, &[x, gamma, beta], "batch_norm")
    }

    /// Elementwise multiplication by a constant mask (inverted dropout).
    pub fn mask(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let vx = self.value(x);
        if mask.len() != vx.len() {
            return Err(Error::dim("mask length differs from input"));
        }
        let data = vx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::raw(vx.shape().to_vec(), data);
        self.push(value, Op::Mask { x, mask }, &[x], "dropout")
    }

    /// Broadcasts unit axes of `x` up to `shape` (same rank).
    pub fn expand(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        if vx.ndim() != shape.len()
            || vx.shape().iter().zip(shape).any(|(&s, &t)| s != t && s != 1)
        {
            return Err(Error::dim(format!("cannot expand {:?} to {shape:?}", vx.shape())));
        }
        let map = expand_index_map(vx.shape(), shape);
        let data = map.iter().map(|&i| vx.data()[i]).collect();
        let value = Tensor::from_parts(shape.to_vec(), data)?;
        self.push(value, Op::Expand(x), &[x], "expand")
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = self.value(*inputs.first().ok_or_else(|| Error::dim("empty concat"))?);
        let lead = &first.shape()[..first.ndim() - 1];
        let rows = first.rows_cols().0;
        let mut widths = Vec::with_capacity(inputs.len());
        for &i in inputs {
            let v = self.value(i);
            if &v.shape()[..v.ndim() - 1] != lead {
                return Err(Error::dim(format!(
                    "concat: leading shapes {:?} and {:?} differ",
                    first.shape(),
                    v.shape()
                )));
            }
            widths.push(v.rows_cols().1);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &wd) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(i).data()[r * wd..(r + 1) * wd]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::raw(shape, out);
        self.push(value, Op::Concat(inputs.to_vec()), inputs, "concat")
    }

    /// Unscaled dot-product attention per batch item: `A = softmax(q kᵀ)`
    /// row-wise, context `A v`, averaged over the N axis. `[B,N,D]` inputs
    /// give a `[B,D]` output.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.ndim() != 3 || vq.shape() != vk.shape() || vq.shape() != vv.shape() {
            return Err(Error::dim(format!(
                "attention expects matching [B,N,D] inputs, got {:?}, {:?}, {:?}",
                vq.shape(),
                vk.shape(),
                vv.shape()
            )));
        }
        let [bsz, n, d] = [vq.shape()[0], vq.shape()[1], vq.shape()[2]];
        let mut weights = vec![0.0; bsz * n * n];
        let mut out = vec![0.0; bsz * d];
        for b in 0..bsz {
            let base = b * n * d;
            for i in 0..n {
                let row = &mut weights[(b * n + i) * n..(b * n + i + 1) * n];
                let qi = &vq.data()[base + i * d..base + (i + 1) * d];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &vk.data()[base + j * d..base + (j + 1) * d];
                    *s = qi.iter().zip(kj).map(|(a, c)| a * c).sum();
                }
                softmax_row(row);
            }
            // z = (1/N) Σ_i Σ_j A[i,j] v[j] = (1/N) Σ_j colsum_j v[j]
            let zrow = &mut out[b * d..(b + 1) * d];
            for j in 0..n {
                let colsum: f64 = (0..n).map(|i| weights[(b * n + i) * n + j]).sum();
                let vj = &vv.data()[base + j * d..base + (j + 1) * d];
                for (z, &x) in zrow.iter_mut().zip(vj) {
                    *z += colsum * x;
                }
            }
            zrow.iter_mut().for_each(|z| *z /= n as f64);
        }
        let value = Tensor::raw(vec![bsz, d], out);
        self.push(value, Op::Attention { q, k, v, weights }, &[q, k, v], "attention")
    }

    /// Mean Gaussian negative log-likelihood (constant term dropped) of
    /// `labels` under `out[:,0]` as mean and `out[:,1]` as log standard
    /// deviation.
    pub fn gaussian_nll(&mut self, out: NodeId, labels: &[f64]) -> Result<NodeId> {
        let vo = self.value(out);
        if vo.shape() != [labels.len(), 2] {
            return Err(Error::dim(format!(
                "gaussian_nll expects [{}, 2] predictions, got {:?}",
                labels.len(),
                vo.shape()
            )));
        }
        let pairs: Vec<(f64, f64)> = vo.data().chunks(2).map(|c| (c[0], c[1])).collect();
        let j = crate::loss::probabilistic_loss_raw(&pairs, labels)?;
        let op = Op::GaussianNll {
            out,
            labels: labels.to_vec(),
        };
        self.push(Tensor::scalar(j), op, &[out], "gaussian_nll")
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::dim("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));
        let mut params = Vec::new();

        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            gy.ensure_finite("backward pass")?;
            let send = |target: NodeId, g: Tensor, grads: &mut Vec<Option<Tensor>>| {
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(pid) => {
                    params.push((*pid, NodeId(idx)));
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        send(*a, gy.clone(), &mut grads);
                    }
                    if self.needs(*b) {
                        send(*b, gy.clone(), &mut grads);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let d = gy.data().iter().zip(vb.data()).map(|(g, y)| g * y).collect();
                        send(*a, Tensor::raw(va.shape().to_vec(), d), &mut grads);
                    }
                    if self.needs(*b) {
                        let d = gy.data().iter().zip(va.data()).map(|(g, x)| g * x).collect();
                        send(*b, Tensor::raw(vb.shape().to_vec(), d), &mut grads);
                    }
                }
                Op::Sum(x) => {
                    let g = Tensor::full(self.value(*x).shape(), gy.data()[0]);
                    send(*x, g, &mut grads);
                }
                Op::Reshape(x) => {
                    let g = gy.into_reshaped(self.value(*x).shape())?;
                    send(*x, g, &mut grads);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let (r, s, u) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                    if self.needs(*a) {
                        // dA = dY Bᵀ
                        let mut d = vec![0.0; r * s];
                        for i in 0..r {
                            for k in 0..s {
                                d[i * s + k] = (0..u)
                                    .map(|j| gy.data()[i * u + j] * vb.data()[k * u + j])
                                    .sum();
                            }
                        }
                        send(*a, Tensor::raw(vec![r, s], d), &mut grads);
                    }
                    if self.needs(*b) {
                        // dB = Aᵀ dY
                        let mut d = vec![0.0; s * u];
                        for i in 0..r {
                            for k in 0..s {
                                let aik = va.data()[i * s + k];
                                for j in 0..u {
                                    d[k * u + j] += aik * gy.data()[i * u + j];
                                }
                            }
                        }
                        send(*b, Tensor::raw(vec![s, u], d), &mut grads);
                    }
                }
                Op::Dense { x, w, b } => {
                    let (vx, vw) = (self.value(*x), self.value(*w));
                    let (din, dout) = (vw.shape()[0], vw.shape()[1]);
                    let rows = vx.rows_cols().0;
                    let gd = gy.data();
                    if self.needs(*x) {
                        let mut d = vec![0.0; rows * din];
                        for r in 0..rows {
                            let grow = &gd[r * dout..(r + 1) * dout];
                            for i in 0..din {
                                let wrow = &vw.data()[i * dout..(i + 1) * dout];
                                d[r * din + i] = grow.iter().zip(wrow).map(|(g, w)| g * w).sum();
                            }
                        }
                        send(*x, Tensor::raw(vx.shape().to_vec(), d), &mut grads);
                    }
                    if self.needs(*w) {
                        let mut d = vec![0.0; din * dout];
                        for r in 0..rows {
                            let grow = &gd[r * dout..(r + 1) * dout];
                            for i in 0..din {
                                let xv = vx.data()[r * din + i];
                                if xv == 0.0 {
                                    continue;
                                }
                                for (dw, &g) in d[i * dout..(i + 1) * dout].iter_mut().zip(grow) {
                                    *dw += xv * g;
                                }
                            }
                        }
                        send(*w, Tensor::raw(vec![din, dout], d), &mut grads);
                    }
                    if self.needs(*b) {
                        let mut d = vec![0.0; dout];
                        for grow in gd.chunks(dout) {
                            for (db, &g) in d.iter_mut().zip(grow) {
                                *db += g;
                            }
                        }
                        send(*b, Tensor::raw(vec![dout], d), &mut grads);
                    }
                }
                Op::Swish(x) => {
                    let vx = self.value(*x);
                    let d = vx
                        .data()
                        .iter()
                        .zip(gy.data())
                        .map(|(&v, &g)| {
                            let s = sigmoid(v);
                            g * (s + v * s * (1.0 - s))
                        })
                        .collect();
                    send(*x, Tensor::raw(vx.shape().to_vec(), d), &mut grads);
                }
                Op::Conv2d { x, k, b } => {
                    let (vx, vk) = (self.value(*x), self.value(*k));
                    let [bsz, h, w, cin] =
                        [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
                    let cout = vk.shape()[3];
                    let (need_x, need_k) = (self.needs(*x), self.needs(*k));
                    let mut dx = if need_x { vec![0.0; vx.len()] } else { Vec::new() };
                    let mut dk = if need_k { vec![0.0; vk.len()] } else { Vec::new() };
                    let gd = gy.data();
                    let (xd, kd) = (vx.data(), vk.data());
                    for n in 0..bsz {
                        for i in 0..h {
                            for j in 0..w {
                                let g0 = ((n * h + i) * w + j) * cout;
                                let grow = &gd[g0..g0 + cout];
                                for di in 0..3 {
                                    let Some(ii) = (i + di).checked_sub(1).filter(|&ii| ii < h)
                                    else {
                                        continue;
                                    };
                                    for dj in 0..3 {
                                        let Some(jj) =
                                            (j + dj).checked_sub(1).filter(|&jj| jj < w)
                                        else {
                                            continue;
                                        };
                                        let x0 = ((n * h + ii) * w + jj) * cin;
                                        for ci in 0..cin {
                                            let k0 = ((di * 3 + dj) * cin + ci) * cout;
                                            if need_k {
                                                let xv = xd[x0 + ci];
                                                for (dkv, &g) in
                                                    dk[k0..k0 + cout].iter_mut().zip(grow)
                                                {
                                                    *dkv += xv * g;
                                                }
                                            }
                                            if need_x {
                                                dx[x0 + ci] += kd[k0..k0 + cout]
                                                    .iter()
                                                    .zip(grow)
                                                    .map(|(a, g)| a * g)
                                                    .sum::<f64>();
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if need_x {
                        send(*x, Tensor::raw(vx.shape().to_vec(), dx), &mut grads);
                    }
                    if need_k {
                        send(*k, Tensor::raw(vk.shape().to_vec(), dk), &mut grads);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; cout];
                        for grow in gd.chunks(cout) {
                            for (d, &g) in db.iter_mut().zip(grow) {
                                *d += g;
                            }
                        }
                        send(*b, Tensor::raw(vec![cout], db), &mut grads);
                    }
                }
                Op::AvgPool { x, ph, pw } => {
                    let vx = self.value(*x);
                    let [bsz, h, w, c] =
                        [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
                    let (oh, ow) = (h / ph, w / pw);
                    let scale = 1.0 / (ph * pw) as f64;
                    let mut d = vec![0.0; vx.len()];
                    for n in 0..bsz {
                        for oi in 0..oh {
                            for oj in 0..ow {
                                let g0 = ((n * oh + oi) * ow + oj) * c;
                                for di in 0..*ph {
                                    for dj in 0..*pw {
                                        let x0 = ((n * h + oi * ph + di) * w + oj * pw + dj) * c;
                                        for ch in 0..c {
                                            d[x0 + ch] += gy.data()[g0 + ch] * scale;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    send(*x, Tensor::raw(vx.shape().to_vec(), d), &mut grads);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let vg = self.value(*gamma);
                    let c = vg.len();
                    let rows = xhat.len() / c;
                    let gd = gy.data();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for r in 0..rows {
                        for ch in 0..c {
                            let i = r * c + ch;
                            dgamma[ch] += gd[i] * xhat[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                    if self.needs(*x) {
                        let mut d = vec![0.0; rows * c];
                        if *batch_stats {
                            // dx = γ·inv_std/m · (m·dy − Σdy − x̂·Σ(dy·x̂))
                            let m = rows as f64;
                            for r in 0..rows {
                                for ch in 0..c {
                                    let i = r * c + ch;
                                    d[i] = vg.data()[ch] * inv_std[ch] / m
                                        * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                                }
                            }
                        } else {
                            for r in 0..rows {
                                for ch in 0..c {
                                    let i = r * c + ch;
                                    d[i] = gd[i] * vg.data()[ch] * inv_std[ch];
                                }
                            }
                        }
                        send(*x, Tensor::raw(self.value(*x).shape().to_vec(), d), &mut grads);
                    }
                    if self.needs(*gamma) {
                        send(*gamma, Tensor::raw(vec![c], dgamma), &mut grads);
                    }
                    if self.needs(*beta) {
                        send(*beta, Tensor::raw(vec![c], dbeta), &mut grads);
                    }
                }
                Op::Mask { x, mask } => {
                    let d = gy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                    send(*x, Tensor::raw(gy.shape().to_vec(), d), &mut grads);
                }
                Op::Expand(x) => {
                    let vx = self.value(*x);
                    let map = expand_index_map(vx.shape(), gy.shape());
                    let mut d = vec![0.0; vx.len()];
                    for (flat, &src) in map.iter().enumerate() {
                        d[src] += gy.data()[flat];
                    }
                    send(*x, Tensor::raw(vx.shape().to_vec(), d), &mut grads);
                }
                Op::Concat(inputs) => {
                    let (rows, total) = gy.rows_cols();
                    let mut offset = 0;
                    for &inp in inputs {
                        let vi = self.value(inp);
                        let wd = vi.rows_cols().1;
                        if self.needs(inp) {
                            let mut d = Vec::with_capacity(vi.len());
                            for r in 0..rows {
                                d.extend_from_slice(
                                    &gy.data()[r * total + offset..r * total + offset + wd],
                                );
                            }
                            send(inp, Tensor::raw(vi.shape().to_vec(), d), &mut grads);
                        }
                        offset += wd;
                    }
                }
                Op::Attention { q, k, v, weights } => {
                    let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let [bsz, n, d] = [vq.shape()[0], vq.shape()[1], vq.shape()[2]];
                    let mut dq = vec![0.0; vq.len()];
                    let mut dk = vec![0.0; vk.len()];
                    let mut dv = vec![0.0; vv.len()];
                    let inv_n = 1.0 / n as f64;
                    let mut ds = vec![0.0; n * n];
                    for b in 0..bsz {
                        let base = b * n * d;
                        let gz = &gy.data()[b * d..(b + 1) * d];
                        let a = &weights[b * n * n..(b + 1) * n * n];
                        // dA[i,j] = (gz · v_j)/N, independent of i
                        let gv: Vec<f64> = (0..n)
                            .map(|j| {
                                let vj = &vv.data()[base + j * d..base + (j + 1) * d];
                                vj.iter().zip(gz).map(|(x, g)| x * g).sum::<f64>() * inv_n
                            })
                            .collect();
                        for j in 0..n {
                            let colsum: f64 = (0..n).map(|i| a[i * n + j]).sum();
                            for (dvx, &g) in dv[base + j * d..base + (j + 1) * d].iter_mut().zip(gz)
                            {
                                *dvx += colsum * g * inv_n;
                            }
                        }
                        for i in 0..n {
                            let row = &a[i * n..(i + 1) * n];
                            let dot: f64 = row.iter().zip(&gv).map(|(p, g)| p * g).sum();
                            for j in 0..n {
                                ds[i * n + j] = row[j] * (gv[j] - dot);
                            }
                        }
                        for i in 0..n {
                            for j in 0..n {
                                let s = ds[i * n + j];
                                if s == 0.0 {
                                    continue;
                                }
                                for t in 0..d {
                                    dq[base + i * d + t] += s * vk.data()[base + j * d + t];
                                    dk[base + j * d + t] += s * vq.data()[base + i * d + t];
                                }
                            }
                        }
                    }
                    for (node, dat) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if self.needs(node) {
                            send(node, Tensor::raw(vec![bsz, n, d], dat), &mut grads);
                        }
                    }
                }
                Op::GaussianNll { out, labels } => {
                    let vo = self.value(*out);
                    let pairs: Vec<(f64, f64)> =
                        vo.data().chunks(2).map(|c| (c[0], c[1])).collect();
                    let upstream = gy.data()[0];
                    let d = crate::loss::probabilistic_loss_grad(&pairs, labels)
                        .into_iter()
                        .flat_map(|(dm, ds)| [dm * upstream, ds * upstream])
                        .collect();
                    send(*out, Tensor::raw(vo.shape().to_vec(), d), &mut grads);
                }
            }
        }
        for g in grads.iter().flatten() {
            g.ensure_finite("backward pass")?;
        }
        Ok(Gradients { grads, params })
    }
}
