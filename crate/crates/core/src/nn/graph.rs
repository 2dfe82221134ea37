//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`] walks the tape
//! in reverse and accumulates gradients. Accumulation order is fixed by node order, so gradients
//! are bit-reproducible.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::kernels::{
    bias_grad, conv2d_backward_input, conv2d_backward_weight, conv2d_forward, conv_dims, gemm, gru_backward,
    gru_forward, sigmoid, ConvDims, ConvGeom, GruParams, GruTrace,
};
use crate::nn::tensor::Tensor;
use crate::nn::weights::{ModelWeights, ParamId};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A fixed linear operator with an explicit adjoint, used for differentiable signal transforms.
pub trait LinearMap: Send + Sync {
    fn input_shape(&self) -> Vec<usize>;
    fn output_shape(&self) -> Vec<usize>;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn adjoint(&self, g: &[f64]) -> Vec<f64>;
}

/// Small floor used by all ratio and log denominators.
pub const EPS: f64 = 1e-8;

enum Op {
    Leaf,
    Param,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, x_hat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    PRelu { x: Var, slope: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Permute3 { x: Var, perm: [usize; 3] },
    Reshape { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Gru { x: Var, h0: Option<Var>, w: [Var; 4], reverse: bool, trace: GruTrace, batch: usize, len: usize },
    ComplexMul { a: Var, b: Var },
    GatherAxis1 { x: Var, index: Vec<usize> },
    BroadcastLast { x: Var },
    Map { x: Var, map: Arc<dyn LinearMap> },
    MeanLeading { x: Var },
    Sum { x: Var },
    NegSiSnr { est: Var, reference: Arc<Vec<f64>>, alpha: f64, p_s: f64, p_e: f64 },
    SquaredError { est: Var, target: Arc<Vec<f64>>, denom: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch-norm statistics observed during a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
    frozen: Vec<bool>,
    params: HashMap<ParamId, Var>,
    batch_stats: Vec<BatchStats>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g.to_vec()),
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(false)
    }
}

impl Graph {
    pub fn new(training: bool) -> Self {
        Self { nodes: Vec::new(), training, frozen: Vec::new(), params: HashMap::new(), batch_stats: Vec::new() }
    }

    /// Marks parameters whose gradients are never needed (`frozen[id] == true`).
    pub fn with_frozen(mut self, frozen: Vec<bool>) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn batch_stats(&self) -> &[BatchStats] {
        &self.batch_stats
    }

    pub(crate) fn record_batch_stats(&mut self, s: BatchStats) {
        self.batch_stats.push(s);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (used by gradient checks).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, weights: &ModelWeights, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let trainable = weights.is_trainable(id) && !self.frozen.get(id.index()).copied().unwrap_or(false);
        let v = self.push(weights.tensor(id).clone(), Op::Param, trainable);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let d = conv_dims(self.shape(x), self.shape(w), &geom)?;
        if let Some(b) = b {
            if self.shape(b) != [d.co] {
                return Err(Error::shape(format!("conv bias {:?} for {} output channels", self.shape(b), d.co)));
            }
        }
        let y = conv2d_forward(
            self.value(x).data(),
            &d,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(vec![d.co, d.fo, d.to], y)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Adjoint of [`Graph::conv2d`] with the same geometry. Weight layout `[C_in, C_out, kF, kT]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        output_padding: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] {
            return Err(Error::shape(format!(
                "transposed conv input channels: input {xs:?}, weight {ws:?}"
            )));
        }
        let (fo, to) = geom.transposed_size(xs[1], xs[2], output_padding)?;
        let d = self.transposed_dims(&xs, &ws, &geom, fo, to)?;
        if let Some(b) = b {
            if self.shape(b) != [d.ci] {
                return Err(Error::shape("transposed conv bias length"));
            }
        }
        let mut y = conv2d_backward_input(self.value(x).data(), &d, self.value(w).data(), &geom);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (c, plane) in y.chunks_mut(fo * to).enumerate() {
                plane.iter_mut().for_each(|v| *v += bv[c]);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let t = Tensor::new(vec![d.ci, fo, to], y)?;
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    /// Dims of the forward convolution whose adjoint maps `xs` to `(fo, to)`.
    fn transposed_dims(&self, xs: &[usize], ws: &[usize], geom: &ConvGeom, fo: usize, to: usize) -> Result<ConvDims> {
        let groups = geom.groups;
        let conv_in = [ws[1] * groups, fo, to];
        let conv_w = [ws[0], ws[1], ws[2], ws[3]];
        let d = conv_dims(&conv_in, &conv_w, geom)?;
        if d.fo != xs[1] || d.to != xs[2] {
            return Err(Error::shape(format!(
                "transposed conv: output {fo}x{to} does not map back onto input {}x{}",
                xs[1], xs[2]
            )));
        }
        Ok(d)
    }

    /// Per-channel normalization over all non-channel axes of `[C, ...]`.
    /// With `running = None` the batch statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(format!("batch norm affine params must have {c} entries")));
        }
        let plane = shape[1..].iter().product::<usize>();
        let xv = self.value(x).data();
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let p = &xv[ch * plane..(ch + 1) * plane];
                    let m = p.iter().sum::<f64>() / plane as f64;
                    mean[ch] = m;
                    var[ch] = p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / plane as f64;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut x_hat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for ch in 0..c {
            for i in ch * plane..(ch + 1) * plane {
                let h = (xv[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = h;
                y[i] = gv[ch] * h + bv[ch];
            }
        }
        let batch_stats = running.is_none();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::new(shape, y)?;
        let v = self.push(t, Op::BatchNorm { x, gamma, beta, x_hat, inv_std, batch_stats }, rg);
        Ok((v, batch_stats.then_some((mean, var))))
    }

    /// Per-channel PReLU on `[C, ...]`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = shape[0];
        if self.shape(slope) != [c] {
            return Err(Error::shape(format!("prelu slope must have {c} entries")));
        }
        let plane = shape[1..].iter().product::<usize>();
        let a = self.value(slope).data();
        let y: Vec<f64> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.0 { v } else { a[i / plane.max(1)] * v })
            .collect();
        let rg = self.rg(x) || self.rg(slope);
        Ok(self.push(Tensor::new(shape, y)?, Op::PRelu { x, slope }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| sigmoid(v)).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(y, Op::Sigmoid { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let y = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.tanh()).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(y, Op::Tanh { x }, rg)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        check_same(self.value(a), self.value(b), what)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x);
        let y = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect()).expect("same shape");
        let rg = self.rg(x);
        self.push(y, Op::Scale { x, c }, rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or_else(|| Error::shape("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat axis out of range"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same {
                return Err(Error::shape(format!("concat: {s:?} vs {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!("narrow {start}+{len} on axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Axis permutation of a rank-3 tensor: output axis `i` is input axis `perm[i]`.
    pub fn permute3(&mut self, x: Var, perm: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("permute3 needs a rank-3 tensor"));
        }
        let out_shape = vec![s[perm[0]], s[perm[1]], s[perm[2]]];
        let data = permute_data(self.value(x).data(), &s, perm);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute3 { x, perm }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// `x: [R, D]`, `w: [O, D]`, `b: [O]` -> `[R, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape(format!("linear: input {xs:?} weight {ws:?}")));
        }
        let (r, d, o) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; r * o];
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("linear bias length"));
            }
            let bv = self.value(b).data();
            for row in y.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        gemm(r, d, o, self.value(x).data(), false, self.value(w).data(), true, &mut y, b.is_some());
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![r, o], y)?, Op::Linear { x, w, b }, rg))
    }

    /// Batched GRU. `x: [B, L, D]`, optional `h0: [B, H]`; weights `[w_ih, w_hh, b_ih, b_hh]`.
    pub fn gru(&mut self, x: Var, h0: Option<Var>, w: [Var; 4], reverse: bool) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(format!("gru input must be [B, L, D], got {xs:?}")));
        }
        let (batch, len, d) = (xs[0], xs[1], xs[2]);
        let wih = self.shape(w[0]).to_vec();
        if wih.len() != 2 || wih[1] != d || !wih[0].is_multiple_of(3) {
            return Err(Error::shape(format!("gru input weight {wih:?} for input dim {d}")));
        }
        let h = wih[0] / 3;
        if self.shape(w[1]) != [3 * h, h] || self.shape(w[2]) != [3 * h] || self.shape(w[3]) != [3 * h] {
            return Err(Error::shape("gru recurrent weight/bias shapes"));
        }
        let h0v = match h0 {
            Some(v) => {
                if self.shape(v) != [batch, h] {
                    return Err(Error::shape("gru initial state shape"));
                }
                self.value(v).data().to_vec()
            }
            None => vec![0.0; batch * h],
        };
        let p = GruParams {
            w_ih: self.value(w[0]).data(),
            w_hh: self.value(w[1]).data(),
            b_ih: self.value(w[2]).data(),
            b_hh: self.value(w[3]).data(),
            input: d,
            hidden: h,
        };
        let rg = self.rg(x) || h0.is_some_and(|v| self.rg(v)) || w.iter().any(|&v| self.rg(v));
        let mut trace = GruTrace::default();
        let out = gru_forward(&p, self.value(x).data(), &h0v, batch, len, reverse, rg.then_some(&mut trace));
        let t = Tensor::new(vec![batch, len, h], out)?;
        Ok(self.push(t, Op::Gru { x, h0, w, reverse, trace, batch, len }, rg))
    }

    /// Complex product of interleaved `(re, im)` channel pairs on axis 0.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "complex_mul")?;
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || !shape[0].is_multiple_of(2) {
            return Err(Error::shape("complex_mul needs an even channel count"));
        }
        let plane = shape[1..].iter().product::<usize>();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut y = vec![0.0; av.len()];
        for p in 0..shape[0] / 2 {
            let (re, im) = (2 * p * plane, (2 * p + 1) * plane);
            for i in 0..plane {
                let (ar, ai, br, bi) = (av[re + i], av[im + i], bv[re + i], bv[im + i]);
                y[re + i] = ar * br - ai * bi;
                y[im + i] = ar * bi + ai * br;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, y)?, Op::ComplexMul { a, b }, rg))
    }

    /// `out[c, f, t] = x[c, index[f], t]`.
    pub fn gather_axis1(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || index.iter().any(|&i| i >= s[1]) {
            return Err(Error::shape("gather_axis1 index out of range"));
        }
        let (c, k, t) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(c * index.len() * t);
        for ch in 0..c {
            for &i in index {
                data.extend_from_slice(&src[(ch * k + i) * t..(ch * k + i + 1) * t]);
            }
        }
        let rg = self.rg(x);
        let out = Tensor::new(vec![c, index.len(), t], data)?;
        Ok(self.push(out, Op::GatherAxis1 { x, index: index.to_vec() }, rg))
    }

    /// Repeats `x` along a new trailing axis of length `n`.
    pub fn broadcast_last(&mut self, x: Var, n: usize) -> Var {
        let t = self.value(x);
        let mut shape = t.shape().to_vec();
        shape.push(n);
        let data = t.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, data).expect("broadcast shape"), Op::BroadcastLast { x }, rg)
    }

    pub fn linear_map(&mut self, x: Var, map: Arc<dyn LinearMap>) -> Result<Var> {
        if self.shape(x) != map.input_shape().as_slice() {
            return Err(Error::shape(format!(
                "linear map expects {:?}, got {:?}",
                map.input_shape(),
                self.shape(x)
            )));
        }
        let y = map.apply(self.value(x).data());
        let t = Tensor::new(map.output_shape(), y)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Map { x, map }, rg))
    }

    /// Mean over every axis except the last: `[..., T] -> [T]`.
    pub fn mean_leading(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let t = *s.last().ok_or_else(|| Error::shape("mean_leading of a scalar"))?;
        let rows = s[..s.len() - 1].iter().product::<usize>().max(1);
        let mut y = vec![0.0; t];
        for row in self.value(x).data().chunks(t) {
            y.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        y.iter_mut().for_each(|v| *v /= rows as f64);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![t], y)?, Op::MeanLeading { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Negative scale-invariant SNR in dB of a waveform estimate against a fixed reference.
    pub fn neg_si_snr(&mut self, est: Var, reference: Arc<Vec<f64>>) -> Result<Var> {
        let e = self.value(est).data();
        if e.len() != reference.len() {
            return Err(Error::shape(format!("si-snr lengths {} vs {}", e.len(), reference.len())));
        }
        let (alpha, p_s, p_e) = si_snr_parts(e, &reference)?;
        let loss = -10.0 * (p_s.max(EPS) / (p_e + EPS)).log10();
        let rg = self.rg(est);
        Ok(self.push(Tensor::scalar(loss), Op::NegSiSnr { est, reference, alpha, p_s, p_e }, rg))
    }

    /// `sum((est - target)^2) / denom`.
    pub fn squared_error(&mut self, est: Var, target: Arc<Vec<f64>>, denom: f64) -> Result<Var> {
        let e = self.value(est).data();
        if e.len() != target.len() {
            return Err(Error::shape(format!("squared error lengths {} vs {}", e.len(), target.len())));
        }
        let s: f64 = e.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let rg = self.rg(est);
        Ok(self.push(Tensor::scalar(s / denom), Op::SquaredError { est, target, denom }, rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward on a variable that was never computed".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::State("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv2d { x, w, b, geom } => {
                let d = conv_dims(self.shape(*x), self.shape(*w), geom)?;
                if want(*x) {
                    add_into(&mut grads[x.0], &conv2d_backward_input(gy, &d, val(*w), geom));
                }
                if want(*w) {
                    let gw = conv2d_backward_weight(gy, &d, val(*x), self.value(*w).numel(), geom);
                    add_into(&mut grads[w.0], &gw);
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    add_into(&mut grads[b.0], &bias_grad(gy, d.co));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let out = node.value.shape();
                let d = self.transposed_dims(self.shape(*x), self.shape(*w), geom, out[1], out[2])?;
                if want(*x) {
                    add_into(&mut grads[x.0], &conv2d_forward(gy, &d, val(*w), None, geom));
                }
                if want(*w) {
                    let gw = conv2d_backward_weight(val(*x), &d, gy, self.value(*w).numel(), geom);
                    add_into(&mut grads[w.0], &gw);
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    add_into(&mut grads[b.0], &bias_grad(gy, d.ci));
                }
            }
            Op::BatchNorm { x, gamma, beta, x_hat, inv_std, batch_stats } => {
                let c = inv_std.len();
                let plane = x_hat.len() / c;
                let gv = val(*gamma);
                let mut g_gamma = vec![0.0; c];
                let mut g_beta = vec![0.0; c];
                for ch in 0..c {
                    let r = ch * plane..(ch + 1) * plane;
                    g_gamma[ch] = gy[r.clone()].iter().zip(&x_hat[r.clone()]).map(|(a, b)| a * b).sum();
                    g_beta[ch] = gy[r].iter().sum();
                }
                if want(*x) {
                    let mut gx = vec![0.0; x_hat.len()];
                    for ch in 0..c {
                        let k = gv[ch] * inv_std[ch];
                        let r = ch * plane..(ch + 1) * plane;
                        if *batch_stats {
                            let m_g = g_beta[ch] / plane as f64;
                            let m_gh = g_gamma[ch] / plane as f64;
                            for i in r {
                                gx[i] = k * (gy[i] - m_g - x_hat[i] * m_gh);
                            }
                        } else {
                            for i in r {
                                gx[i] = k * gy[i];
                            }
                        }
                    }
                    add_into(&mut grads[x.0], &gx);
                }
                if want(*gamma) {
                    add_into(&mut grads[gamma.0], &g_gamma);
                }
                if want(*beta) {
                    add_into(&mut grads[beta.0], &g_beta);
                }
            }
            Op::PRelu { x, slope } => {
                let xv = val(*x);
                let a = val(*slope);
                let plane = xv.len() / a.len();
                if want(*x) {
                    let gx: Vec<f64> =
                        xv.iter().zip(gy).enumerate().map(|(i, (&v, g))| if v > 0.0 { *g } else { a[i / plane] * g }).collect();
                    add_into(&mut grads[x.0], &gx);
                }
                if want(*slope) {
                    let mut ga = vec![0.0; a.len()];
                    for (i, (&v, g)) in xv.iter().zip(gy).enumerate() {
                        if v <= 0.0 {
                            ga[i / plane] += v * g;
                        }
                    }
                    add_into(&mut grads[slope.0], &ga);
                }
            }
            Op::Sigmoid { x } => {
                let g: Vec<f64> = node.value.data().iter().zip(gy).map(|(s, g)| g * s * (1.0 - s)).collect();
                add_into(&mut grads[x.0], &g);
            }
            Op::Tanh { x } => {
                let g: Vec<f64> = node.value.data().iter().zip(gy).map(|(t, g)| g * (1.0 - t * t)).collect();
                add_into(&mut grads[x.0], &g);
            }
            Op::Add { a, b } => {
                if want(*a) {
                    add_into(&mut grads[a.0], gy);
                }
                if want(*b) {
                    add_into(&mut grads[b.0], gy);
                }
            }
            Op::Sub { a, b } => {
                if want(*a) {
                    add_into(&mut grads[a.0], gy);
                }
                if want(*b) {
                    let g: Vec<f64> = gy.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &g);
                }
            }
            Op::Mul { a, b } => {
                if want(*a) {
                    let g: Vec<f64> = gy.iter().zip(val(*b)).map(|(g, y)| g * y).collect();
                    add_into(&mut grads[a.0], &g);
                }
                if want(*b) {
                    let g: Vec<f64> = gy.iter().zip(val(*a)).map(|(g, y)| g * y).collect();
                    add_into(&mut grads[b.0], &g);
                }
            }
            Op::Scale { x, c } => {
                let g: Vec<f64> = gy.iter().map(|v| v * c).collect();
                add_into(&mut grads[x.0], &g);
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if want(v) {
                        let mut g = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            g.extend_from_slice(&gy[o * total + offset..o * total + offset + len]);
                        }
                        add_into(&mut grads[v.0], &g);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, n, inner) = split_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut g = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    g[dst..dst + len * inner].copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                }
                add_into(&mut grads[x.0], &g);
            }
            Op::Permute3 { x, perm } => {
                let mut inv = [0; 3];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let g = permute_data(gy, node.value.shape(), inv);
                add_into(&mut grads[x.0], &g);
            }
            Op::Reshape { x } => add_into(&mut grads[x.0], gy),
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (r, d) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                if want(*x) {
                    let mut gx = vec![0.0; r * d];
                    gemm(r, o, d, gy, false, val(*w), false, &mut gx, false);
                    add_into(&mut grads[x.0], &gx);
                }
                if want(*w) {
                    let mut gw = vec![0.0; o * d];
                    gemm(o, r, d, gy, true, val(*x), false, &mut gw, false);
                    add_into(&mut grads[w.0], &gw);
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    let mut gb = vec![0.0; o];
                    for row in gy.chunks(o) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Gru { x, h0, w, reverse, trace, batch, len } => {
                let h = self.shape(w[1])[1];
                let p = GruParams {
                    w_ih: val(w[0]),
                    w_hh: val(w[1]),
                    b_ih: val(w[2]),
                    b_hh: val(w[3]),
                    input: self.shape(*x)[2],
                    hidden: h,
                };
                let g = gru_backward(&p, val(*x), trace, gy, *batch, *len, *reverse);
                if want(*x) {
                    add_into(&mut grads[x.0], &g.x);
                }
                if let Some(h0) = h0.filter(|v| want(*v)) {
                    add_into(&mut grads[h0.0], &g.h0);
                }
                for (v, gv) in w.iter().zip([&g.w_ih, &g.w_hh, &g.b_ih, &g.b_hh]) {
                    if want(*v) {
                        add_into(&mut grads[v.0], gv);
                    }
                }
            }
            Op::ComplexMul { a, b } => {
                let shape = node.value.shape();
                let plane = shape[1..].iter().product::<usize>();
                let (av, bv) = (val(*a), val(*b));
                // d/da = gy * conj(b), d/db = gy * conj(a)
                let conj_prod = |u: &[f64]| {
                    let mut g = vec![0.0; u.len()];
                    for p in 0..shape[0] / 2 {
                        let (re, im) = (2 * p * plane, (2 * p + 1) * plane);
                        for i in 0..plane {
                            let (gr, gi, ur, ui) = (gy[re + i], gy[im + i], u[re + i], u[im + i]);
                            g[re + i] = gr * ur + gi * ui;
                            g[im + i] = gi * ur - gr * ui;
                        }
                    }
                    g
                };
                if want(*a) {
                    add_into(&mut grads[a.0], &conj_prod(bv));
                }
                if want(*b) {
                    add_into(&mut grads[b.0], &conj_prod(av));
                }
            }
            Op::GatherAxis1 { x, index } => {
                let s = self.shape(*x);
                let (c, k, t) = (s[0], s[1], s[2]);
                let mut g = vec![0.0; c * k * t];
                for ch in 0..c {
                    for (f, &i) in index.iter().enumerate() {
                        let src = &gy[(ch * index.len() + f) * t..][..t];
                        let dst = &mut g[(ch * k + i) * t..][..t];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                add_into(&mut grads[x.0], &g);
            }
            Op::BroadcastLast { x } => {
                let n = *node.value.shape().last().expect("broadcast axis");
                let g: Vec<f64> = gy.chunks(n).map(|c| c.iter().sum()).collect();
                add_into(&mut grads[x.0], &g);
            }
            Op::Map { x, map } => add_into(&mut grads[x.0], &map.adjoint(gy)),
            Op::MeanLeading { x } => {
                let n = self.value(*x).numel();
                let t = gy.len();
                let rows = (n / t.max(1)).max(1) as f64;
                let g: Vec<f64> = (0..n).map(|i| gy[i % t] / rows).collect();
                add_into(&mut grads[x.0], &g);
            }
            Op::Sum { x } => {
                let g = vec![gy[0]; self.value(*x).numel()];
                add_into(&mut grads[x.0], &g);
            }
            Op::NegSiSnr { est, reference, alpha, p_s, p_e } => {
                let e = val(*est);
                let k = -10.0 / std::f64::consts::LN_10 * gy[0];
                let g: Vec<f64> = e
                    .iter()
                    .zip(reference.iter())
                    .map(|(&ei, &xi)| {
                        let err = ei - alpha * xi;
                        let ds = if *p_s > EPS { 2.0 * alpha * xi / p_s } else { 0.0 };
                        k * (ds - 2.0 * err / (p_e + EPS))
                    })
                    .collect();
                add_into(&mut grads[est.0], &g);
            }
            Op::SquaredError { est, target, denom } => {
                let g: Vec<f64> =
                    val(*est).iter().zip(target.iter()).map(|(a, b)| 2.0 * (a - b) / denom * gy[0]).collect();
                add_into(&mut grads[est.0], &g);
            }
        }
        Ok(())
    }

    /// Gradients of every trainable parameter reached by `backward`.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.get(v).map(|g| (id, g.to_vec())))
            .collect();
        out.sort_by_key(|(id, _)| id.index());
        out
    }
}

/// Projection scale, target power and residual power of a scale-invariant SNR.
pub(crate) fn si_snr_parts(est: &[f64], reference: &[f64]) -> Result<(f64, f64, f64)> {
    let xx: f64 = reference.iter().map(|v| v * v).sum();
    if xx <= 0.0 {
        return Err(Error::invalid("SI-SNR reference is all zeros"));
    }
    let dot: f64 = est.iter().zip(reference).map(|(a, b)| a * b).sum();
    let alpha = dot / xx;
    let p_s = alpha * alpha * xx;
    let p_e = est.iter().zip(reference).map(|(e, x)| (e - alpha * x).powi(2)).sum();
    Ok((alpha, p_s, p_e))
}

fn permute_data(src: &[f64], shape: &[usize], perm: [usize; 3]) -> Vec<f64> {
    let strides = [shape[1] * shape[2], shape[2], 1];
    let out_shape = [shape[perm[0]], shape[perm[1]], shape[perm[2]]];
    let (s0, s1, s2) = (strides[perm[0]], strides[perm[1]], strides[perm[2]]);
    let mut out = Vec::with_capacity(src.len());
    for i in 0..out_shape[0] {
        for j in 0..out_shape[1] {
            let base = i * s0 + j * s1;
            for k in 0..out_shape[2] {
                out.push(src[base + k * s2]);
            }
        }
    }
    out
}
