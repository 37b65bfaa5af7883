//! Computation tape: records operations in topological order during the
//! forward pass and replays them in reverse for gradients. Gradients add
//! across fan-out, which dense connectivity relies on.

use crate::error::{Error, Result};

use super::ops;
use super::param::{BnStats, ParamId, ParamStore};
use super::Tensor;

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

enum Op {
    Leaf,
    Conv { input: Var, kernel: Var, stride: usize, padding: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32>, train: bool },
    Relu { input: Var },
    AvgPool { input: Var },
    Upsample { input: Var },
    Concat { inputs: Vec<Var> },
    GlobalAvgPool { input: Var },
    Linear { input: Var, weight: Var, bias: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Tensor },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { input: Var, factor: f32 },
    SumAll { input: Var },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
    param: Option<ParamId>,
}

/// Forward recorder and reverse-mode differentiator.
///
/// A tape owns every intermediate tensor of one forward pass. With
/// `grad_enabled == false` it degrades to a plain value store: no backward
/// metadata or normalization caches are kept.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that only evaluates; `backward` is not available.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op, param: Option<ParamId>) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if self.grad_enabled { op } else { Op::Leaf };
        self.nodes.push(Node { value, grad: None, requires_grad, op, param });
        Var(self.nodes.len() - 1)
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf, None)
    }

    /// Mount a stored parameter as a leaf. Gradients accumulated on the tape
    /// flow back into the store via [`Tape::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), true, Op::Leaf, Some(id))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let out = ops::conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        let rg = self.any_requires(&[input, kernel]);
        Ok(self.push(out, rg, Op::Conv { input, kernel, stride, padding }, None))
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        mode: BnMode,
        momentum: f32,
        eps: f32,
    ) -> Result<Var> {
        let x = self.value(input).clone();
        let [n, c, h, w] = x.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        if g.numel() != c || b.numel() != c {
            return Err(Error::Config(format!(
                "batch_norm expects gamma/beta of length {}, got {}/{}",
                c,
                g.numel(),
                b.numel()
            )));
        }
        let m = n * h * w;
        let train = mode == BnMode::Train;
        if train && m < 2 {
            return Err(Error::Config(format!(
                "batch_norm in train mode needs at least 2 values per channel, got {}",
                m
            )));
        }
        let gd = g.data().to_vec();
        let bd = b.data().to_vec();
        let xd = x.data();
        let hw = h * w;
        let mut out = Tensor::zeros(x.shape());
        let mut xhat = vec![0.0f32; if self.grad_enabled { xd.len() } else { 0 }];
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut sum = 0.0f64;
                for ni in 0..n {
                    let base = (ni * c + ch) * hw;
                    for &v in &xd[base..base + hw] {
                        sum += v as f64;
                    }
                }
                let mean = sum / m as f64;
                let mut sq = 0.0f64;
                for ni in 0..n {
                    let base = (ni * c + ch) * hw;
                    for &v in &xd[base..base + hw] {
                        let d = v as f64 - mean;
                        sq += d * d;
                    }
                }
                let var = sq / m as f64;
                stats.mean[ch] =
                    (1.0 - momentum) * stats.mean[ch] + momentum * mean as f32;
                let unbiased = (sq / (m as f64 - 1.0)) as f32;
                stats.var[ch] = (1.0 - momentum) * stats.var[ch] + momentum * unbiased;
                (mean as f32, var as f32)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[ch] = istd;
            let od = out.data_mut();
            for ni in 0..n {
                let base = (ni * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xd[i] - mean) * istd;
                    if self.grad_enabled {
                        xhat[i] = xh;
                    }
                    od[i] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let rg = self.any_requires(&[input, gamma, beta]);
        Ok(self.push(out, rg, Op::BatchNorm { input, gamma, beta, xhat, inv_std, train }, None))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let rg = self.any_requires(&[input]);
        self.push(out, rg, Op::Relu { input }, None)
    }

    pub fn avg_pool_2x2(&mut self, input: Var) -> Result<Var> {
        let out = ops::avg_pool_2x2_forward(self.value(input))?;
        let rg = self.any_requires(&[input]);
        Ok(self.push(out, rg, Op::AvgPool { input }, None))
    }

    pub fn upsample_bilinear_2x(&mut self, input: Var) -> Var {
        let out = ops::upsample_bilinear_2x_forward(self.value(input));
        let rg = self.any_requires(&[input]);
        self.push(out, rg, Op::Upsample { input }, None)
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Usage("concat_channels needs at least one input".into()));
        }
        let [n, _, h, w] = self.value(inputs[0]).shape();
        let mut channels = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(Error::Config(format!(
                    "concat_channels mismatch: expected batch/spatial {}x{}x{}, got {:?}",
                    n, h, w, s
                )));
            }
            channels += s[1];
        }
        let mut out = Tensor::zeros([n, channels, h, w]);
        let hw = h * w;
        {
            let od = out.data_mut();
            for ni in 0..n {
                let mut coff = 0;
                for &v in inputs {
                    let t = &self.nodes[v.0].value;
                    let ci = t.shape()[1];
                    let src = &t.data()[ni * ci * hw..(ni + 1) * ci * hw];
                    let dst_base = (ni * channels + coff) * hw;
                    od[dst_base..dst_base + ci * hw].copy_from_slice(src);
                    coff += ci;
                }
            }
        }
        let rg = self.any_requires(inputs);
        Ok(self.push(out, rg, Op::Concat { inputs: inputs.to_vec() }, None))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Var {
        let out = ops::global_avg_pool_forward(self.value(input));
        let rg = self.any_requires(&[input]);
        self.push(out, rg, Op::GlobalAvgPool { input }, None)
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = ops::linear_forward(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.any_requires(&[input, weight, bias]);
        Ok(self.push(out, rg, Op::Linear { input, weight, bias }, None))
    }

    /// Mean over the batch of `-log p_label`, with stabilized softmax.
    /// Returns the scalar loss and the probability rows.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor)> {
        let l = self.value(logits);
        let s = l.shape();
        let n = s[0];
        let classes = s[1] * s[2] * s[3];
        if labels.len() != n {
            return Err(Error::Data(format!(
                "expected {} labels for a batch of {}, got {}",
                n,
                n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes",
                bad, classes
            )));
        }
        let probs = ops::softmax_rows(l);
        let mut loss = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let p = probs.data()[i * classes + y];
            // guard only true underflow; a non-finite probability must
            // surface as a non-finite loss, not be clamped away
            let p = if p.is_nan() { p } else { p.max(f32::MIN_POSITIVE) };
            loss -= (p as f64).ln();
        }
        let loss = (loss / n as f64) as f32;
        let rg = self.any_requires(&[logits]);
        let node = self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCe { logits, labels: labels.to_vec(), probs: probs.clone() },
            None,
        );
        Ok((node, probs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Config("add shape mismatch".into()));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += v;
        }
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::Add { a, b }, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Config("mul shape mismatch".into()));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= v;
        }
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::Mul { a, b }, None))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            *v *= factor;
        }
        let rg = self.any_requires(&[input]);
        self.push(out, rg, Op::Scale { input, factor }, None)
    }

    pub fn sum_all(&mut self, input: Var) -> Var {
        let mut acc = 0.0f64;
        for &v in self.value(input).data() {
            acc += v as f64;
        }
        let rg = self.any_requires(&[input]);
        self.push(Tensor::scalar(acc as f32), rg, Op::SumAll { input }, None)
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f32> {
        let numel = self.nodes[v.0].value.numel();
        self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; numel])
    }

    fn add_grad(&mut self, v: Var, g: &[f32]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = self.grad_buf(v);
        for (b, x) in buf.iter_mut().zip(g) {
            *b += x;
        }
    }

    /// Reverse sweep from a scalar loss. Every `requires_grad` node reachable
    /// from the loss ends up with its accumulated gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Usage("backward on an inference tape".into()));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Usage("backward requires a scalar loss".into()));
        }
        self.grad_buf(loss)[0] = 1.0;
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let dout = self.nodes[i].grad.clone().unwrap();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv { input, kernel, stride, padding } => {
                    let (input, kernel, stride, padding) = (*input, *kernel, *stride, *padding);
                    let need_dx = self.nodes[input.0].requires_grad;
                    let need_dw = self.nodes[kernel.0].requires_grad;
                    let (dx, dw) = ops::conv2d_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[kernel.0].value,
                        &dout,
                        stride,
                        padding,
                        need_dx,
                        need_dw,
                    );
                    if need_dx {
                        self.add_grad(input, &dx);
                    }
                    if need_dw {
                        self.add_grad(kernel, &dw);
                    }
                }
                Op::BatchNorm { input, gamma, beta, xhat, inv_std, train } => {
                    let (input, gamma, beta, train) = (*input, *gamma, *beta, *train);
                    let xhat = xhat.clone();
                    let inv_std = inv_std.clone();
                    let [n, c, h, w] = self.nodes[input.0].value.shape();
                    let hw = h * w;
                    let m = (n * hw) as f64;
                    let gd = self.nodes[gamma.0].value.data().to_vec();
                    let mut dgamma = vec![0.0f32; c];
                    let mut dbeta = vec![0.0f32; c];
                    let mut dx = vec![0.0f32; n * c * hw];
                    for ch in 0..c {
                        let mut s_dout = 0.0f64;
                        let mut s_dout_xhat = 0.0f64;
                        for ni in 0..n {
                            let base = (ni * c + ch) * hw;
                            for k in base..base + hw {
                                s_dout += dout[k] as f64;
                                s_dout_xhat += dout[k] as f64 * xhat[k] as f64;
                            }
                        }
                        dbeta[ch] = s_dout as f32;
                        dgamma[ch] = s_dout_xhat as f32;
                        let istd = inv_std[ch];
                        let gch = gd[ch];
                        if train {
                            // dxhat = dout * gamma; dx folds the mean/var paths.
                            let s1 = s_dout * gch as f64;
                            let s2 = s_dout_xhat * gch as f64;
                            for ni in 0..n {
                                let base = (ni * c + ch) * hw;
                                for k in base..base + hw {
                                    let dxhat = dout[k] as f64 * gch as f64;
                                    dx[k] = (istd as f64 * (dxhat - (s1 + xhat[k] as f64 * s2) / m))
                                        as f32;
                                }
                            }
                        } else {
                            for ni in 0..n {
                                let base = (ni * c + ch) * hw;
                                for k in base..base + hw {
                                    dx[k] = dout[k] * gch * istd;
                                }
                            }
                        }
                    }
                    self.add_grad(input, &dx);
                    self.add_grad(gamma, &dgamma);
                    self.add_grad(beta, &dbeta);
                }
                Op::Relu { input } => {
                    let input = *input;
                    let x = self.nodes[input.0].value.data();
                    let g: Vec<f32> = x
                        .iter()
                        .zip(&dout)
                        .map(|(&xv, &dv)| if xv > 0.0 { dv } else { 0.0 })
                        .collect();
                    self.add_grad(input, &g);
                }
                Op::AvgPool { input } => {
                    let input = *input;
                    let dx = ops::avg_pool_2x2_backward(self.nodes[input.0].value.shape(), &dout);
                    self.add_grad(input, &dx);
                }
                Op::Upsample { input } => {
                    let input = *input;
                    let dx =
                        ops::upsample_bilinear_2x_backward(self.nodes[input.0].value.shape(), &dout);
                    self.add_grad(input, &dx);
                }
                Op::Concat { inputs } => {
                    let inputs = inputs.clone();
                    let out_shape = self.nodes[i].value.shape();
                    let (n, ctot, hw) = (out_shape[0], out_shape[1], out_shape[2] * out_shape[3]);
                    let mut coff = 0;
                    for v in inputs {
                        let ci = self.nodes[v.0].value.shape()[1];
                        if self.nodes[v.0].requires_grad {
                            let mut g = vec![0.0f32; n * ci * hw];
                            for ni in 0..n {
                                let src = (ni * ctot + coff) * hw;
                                let dst = ni * ci * hw;
                                g[dst..dst + ci * hw]
                                    .copy_from_slice(&dout[src..src + ci * hw]);
                            }
                            self.add_grad(v, &g);
                        }
                        coff += ci;
                    }
                }
                Op::GlobalAvgPool { input } => {
                    let input = *input;
                    let dx =
                        ops::global_avg_pool_backward(self.nodes[input.0].value.shape(), &dout);
                    self.add_grad(input, &dx);
                }
                Op::Linear { input, weight, bias } => {
                    let (input, weight, bias) = (*input, *weight, *bias);
                    let (dx, dw, db) = ops::linear_backward(
                        &self.nodes[input.0].value,
                        &self.nodes[weight.0].value,
                        &dout,
                    );
                    self.add_grad(input, &dx);
                    self.add_grad(weight, &dw);
                    self.add_grad(bias, &db);
                }
                Op::SoftmaxCe { logits, labels, probs } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    let n = labels.len();
                    let classes = probs.numel() / n;
                    let upstream = dout[0];
                    let mut g = probs.data().to_vec();
                    for (idx, &y) in labels.iter().enumerate() {
                        g[idx * classes + y] -= 1.0;
                    }
                    let scale = upstream / n as f32;
                    g.iter_mut().for_each(|v| *v *= scale);
                    self.add_grad(logits, &g);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.add_grad(a, &dout);
                    self.add_grad(b, &dout);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let ga: Vec<f32> = self.nodes[b.0]
                        .value
                        .data()
                        .iter()
                        .zip(&dout)
                        .map(|(&bv, &dv)| bv * dv)
                        .collect();
                    let gb: Vec<f32> = self.nodes[a.0]
                        .value
                        .data()
                        .iter()
                        .zip(&dout)
                        .map(|(&av, &dv)| av * dv)
                        .collect();
                    self.add_grad(a, &ga);
                    self.add_grad(b, &gb);
                }
                Op::Scale { input, factor } => {
                    let (input, factor) = (*input, *factor);
                    let g: Vec<f32> = dout.iter().map(|&v| v * factor).collect();
                    self.add_grad(input, &g);
                }
                Op::SumAll { input } => {
                    let input = *input;
                    let numel = self.nodes[input.0].value.numel();
                    let g = vec![dout[0]; numel];
                    self.add_grad(input, &g);
                }
            }
        }
        Ok(())
    }

    /// Fold gradients of mounted parameter leaves back into the store
    /// (additively, so several tapes may contribute to one step).
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Some(id), Some(grad)) = (node.param, node.grad.as_ref()) {
                let p = store.get_mut(id);
                for (pg, g) in p.grad.iter_mut().zip(grad) {
                    *pg += g;
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}
