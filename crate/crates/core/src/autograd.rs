//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every forward operation as a node holding its output
//! and whatever context its backward rule needs. Nodes are appended in
//! evaluation order, so walking the tape backwards is a reverse topological
//! traversal and each node is visited exactly once.
//!
//! Trainable state lives outside the tape in a [`ParamStore`]. A parameter
//! enters a graph through [`Tape::param`]; [`Tape::backward`] accumulates
//! into the store's gradient buffers.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor with a gradient accumulator of the same shape.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Non-trainable parameters (BN running statistics) are skipped by the
    /// optimizer but still persisted.
    pub trainable: bool,
}

/// All parameters of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Number of scalar values across all parameters.
    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values concatenated in registration order.
    pub fn flatten_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_elements());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Inverse of [`flatten_values`](Self::flatten_values).
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.total_elements() {
            return Err(Error::Invalid(format!(
                "parameter dump holds {} values, model needs {}",
                values.len(),
                self.total_elements()
            )));
        }
        let mut offset = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Supplies the gradient multiplier for a stochastic scaling node.
///
/// Called once per backward pass with the shape of the node output; the
/// returned tensor must broadcast onto that shape. Implementations may draw
/// random numbers, so the backward coefficient need not equal the forward one.
pub trait GradientFactor: Send {
    fn factor(&mut self, shape: &[usize]) -> Tensor;
}

impl GradientFactor for Tensor {
    fn factor(&mut self, _shape: &[usize]) -> Tensor {
        self.clone()
    }
}

/// Soft or hard classification targets.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Labels(&'a [usize]),
    /// `N x K` rows of class probabilities.
    Soft(&'a Tensor),
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        geo: ConvGeometry,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        shift: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    GlobalAvgPool(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Tensor,
        probs: Tensor,
    },
    Shortcut {
        input: Var,
        stride: usize,
    },
    BranchScale {
        input: Var,
        backward: Box<dyn GradientFactor>,
    },
    ShakeShake {
        skip: Var,
        first: Var,
        second: Var,
        backward: Box<dyn GradientFactor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Pending running-statistics update produced by a training-mode BN call.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub param: ParamId,
    pub value: Tensor,
}

/// Record of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
    stat_updates: Vec<StatUpdate>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            stat_updates: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
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

    /// Gradient of the loss with respect to `v`, available after backward.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// A constant input. Its gradient is kept and readable via [`grad`](Self::grad).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub(crate) fn push_stat_update(&mut self, param: ParamId, value: Tensor) {
        self.stat_updates.push(StatUpdate { param, value });
    }

    /// Drains the BN running-statistic updates recorded during forward.
    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv2d_grouped(input, weight, stride, padding, 1)
    }

    pub fn conv2d_grouped(
        &mut self,
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        let geo = ConvGeometry::new(
            self.value(input).shape(),
            self.value(weight).shape(),
            stride,
            padding,
            groups,
        )?;
        let out = kernels::conv2d_forward(&geo, self.value(input).data(), self.value(weight).data());
        let value = Tensor::new(&geo.output_shape(), out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, geo }))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (&[n, d], &[d2, k]) = (x.shape(), w.shape()) else {
            return shape_err(
                "linear",
                format!("expected N x D input and D x K weight, got {:?} and {:?}", x.shape(), w.shape()),
            );
        };
        if d != d2 || b.shape() != [k] {
            return shape_err(
                "linear",
                format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
            );
        }
        let mut out = Vec::with_capacity(n * k);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        kernels::gemm(n, d, k, x.data(), false, w.data(), false, 1.0, &mut out);
        let value = Tensor::new(&[n, k], out)?;
        Ok(self.push(value, Op::Linear { input, weight, bias }))
    }

    /// Per-channel normalization of an NCHW tensor.
    ///
    /// With `running = None` the batch statistics are used and returned as
    /// `(mean, unbiased variance)`; otherwise the given running mean and
    /// variance are used and nothing is returned.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        shift: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if self.value(gamma).shape() != [c] || self.value(shift).shape() != [c] {
            return shape_err(
                "batch_norm",
                format!(
                    "{c} channels but gamma {:?} and shift {:?}",
                    self.value(gamma).shape(),
                    self.value(shift).shape()
                ),
            );
        }
        let m = n * h * w;
        let hw = h * w;
        let (mean, var, batch_stats) = match running {
            None => {
                if m < 2 {
                    return Err(Error::Invalid(format!(
                        "batch_norm in training phase needs at least 2 values per channel, got {m}"
                    )));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut ss = 0.0;
                    for b in 0..n {
                        for &v in &x.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            ss += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m as f64;
                }
                (mean, var, true)
            }
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return shape_err("batch_norm", "running statistics length differs from channels");
                }
                (rm.to_vec(), rv.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, s) = (self.value(gamma).data(), self.value(shift).data());
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = xh;
                    out[i] = g[ch] * xh + s[ch];
                }
            }
        }
        let shape = x.shape().to_vec();
        let stats = batch_stats.then(|| {
            let unbiased = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
            (mean, unbiased)
        });
        let var_out = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                input,
                gamma,
                shift,
                normalized: Tensor::new(&shape, normalized)?,
                inv_std,
                batch_stats,
            },
        );
        Ok((var_out, stats))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(input))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let value = self.value(input).scale(factor);
        self.push(value, Op::Scale(input, factor))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum(input))
    }

    /// NCHW -> NC mean over the spatial axes.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let out: Vec<f64> = x
            .data()
            .chunks(hw)
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(&[n, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(input)))
    }

    /// Mean over the batch of `-sum_k y_k log softmax(logits)_k`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Targets<'_>) -> Result<Var> {
        let z = self.value(logits);
        let &[n, k] = z.shape() else {
            return shape_err("softmax_cross_entropy", format!("logits must be N x K, got {:?}", z.shape()));
        };
        let target = match targets {
            Targets::Labels(labels) => {
                if labels.len() != n {
                    return shape_err(
                        "softmax_cross_entropy",
                        format!("{} labels for batch of {n}", labels.len()),
                    );
                }
                let mut t = Tensor::zeros(&[n, k]);
                for (i, &label) in labels.iter().enumerate() {
                    if label >= k {
                        return Err(Error::LabelOutOfRange { label, classes: k });
                    }
                    t.data_mut()[i * k + label] = 1.0;
                }
                t
            }
            Targets::Soft(t) => {
                if t.shape() != [n, k] {
                    return shape_err(
                        "softmax_cross_entropy",
                        format!("soft targets {:?} for logits {:?}", t.shape(), z.shape()),
                    );
                }
                t.clone()
            }
        };
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &z.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_denom = denom.ln();
            for j in 0..k {
                let log_p = row[j] - max - log_denom;
                probs[i * k + j] = log_p.exp();
                let y = target.data()[i * k + j];
                if y != 0.0 {
                    loss -= y * log_p;
                }
            }
        }
        let value = Tensor::scalar(loss / n as f64);
        let probs = Tensor::new(&[n, k], probs)?;
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: target,
                probs,
            },
        ))
    }

    /// Parameter-free residual shortcut: spatial subsampling by `stride`
    /// followed by zero-padding the channel axis up to `out_channels`.
    pub fn shortcut(&mut self, input: Var, stride: usize, out_channels: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if stride == 0 || out_channels < c {
            return shape_err(
                "shortcut",
                format!("stride {stride}, {c} -> {out_channels} channels"),
            );
        }
        if stride == 1 && out_channels == c {
            return Ok(input);
        }
        let (ho, wo) = (h.div_ceil(stride), w.div_ceil(stride));
        let mut out = vec![0.0; n * out_channels * ho * wo];
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        out[((b * out_channels + ch) * ho + oy) * wo + ox] =
                            x.data()[((b * c + ch) * h + oy * stride) * w + ox * stride];
                    }
                }
            }
        }
        let value = Tensor::new(&[n, out_channels, ho, wo], out)?;
        Ok(self.push(value, Op::Shortcut { input, stride }))
    }

    /// `forward ⊙ input` with an independently supplied backward factor.
    ///
    /// This is the decoupled scaling node behind ShakeDrop, RandomDrop and
    /// Single-branch Shake: the gradient delivered to `input` is
    /// `backward.factor(..) ⊙ upstream`, whatever `forward` was.
    pub fn branch_scale(
        &mut self,
        input: Var,
        forward: &Tensor,
        backward: Box<dyn GradientFactor>,
    ) -> Result<Var> {
        let value = self.value(input).mul_broadcast(forward)?;
        Ok(self.push(value, Op::BranchScale { input, backward }))
    }

    /// `skip + alpha ⊙ first + (1 - alpha) ⊙ second`, with the backward pass
    /// sending `beta ⊙ upstream` to `first`, `(1 - beta) ⊙ upstream` to
    /// `second` and `upstream` to `skip`.
    pub fn shake_shake(
        &mut self,
        skip: Var,
        first: Var,
        second: Var,
        alpha: &Tensor,
        backward: Box<dyn GradientFactor>,
    ) -> Result<Var> {
        let (x, f1, f2) = (self.value(skip), self.value(first), self.value(second));
        if x.shape() != f1.shape() || x.shape() != f2.shape() {
            return shape_err(
                "shake_shake",
                format!("{:?}, {:?}, {:?}", x.shape(), f1.shape(), f2.shape()),
            );
        }
        let a = alpha.expand_to(x.shape())?;
        let data = x
            .data()
            .iter()
            .zip(f1.data())
            .zip(f2.data())
            .zip(a.data())
            .map(|(((&x, &f1), &f2), &a)| x + a * f1 + (1.0 - a) * f2)
            .collect();
        let value = Tensor::new(x.shape(), data)?;
        Ok(self.push(
            value,
            Op::ShakeShake {
                skip,
                first,
                second,
                backward,
            },
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Parameter gradients are accumulated into `store`; leaf gradients stay
    /// on the tape. A tape supports one backward pass.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&loss_shape));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let contributions = self.node_backward(idx, &upstream, store)?;
            grads[idx] = Some(upstream);
            for (target, g) in contributions {
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Test hook: permits another backward pass over the same recorded
    /// forward. Stochastic backward factors draw afresh.
    #[doc(hidden)]
    pub fn rearm_backward(&mut self) {
        self.backward_done = false;
        self.grads.clear();
    }

    fn node_backward(
        &mut self,
        idx: usize,
        up: &Tensor,
        store: &mut ParamStore,
    ) -> Result<Vec<(Var, Tensor)>> {
        let nodes = &mut self.nodes;
        let (before, rest) = nodes.split_at_mut(idx);
        let node = &mut rest[0];
        let val = |v: Var| &before[v.0].value;
        let out = match &mut node.op {
            Op::Leaf => vec![],
            Op::Param(id) => {
                store.get_mut(*id).grad.add_assign(up)?;
                vec![]
            }
            Op::Conv2d { input, weight, geo } => {
                let (gi, gw) =
                    kernels::conv2d_backward(geo, val(*input).data(), val(*weight).data(), up.data());
                vec![
                    (*input, Tensor::new(val(*input).shape(), gi)?),
                    (*weight, Tensor::new(val(*weight).shape(), gw)?),
                ]
            }
            Op::Linear { input, weight, bias } => {
                let (x, w) = (val(*input), val(*weight));
                let (n, d, k) = (x.shape()[0], x.shape()[1], w.shape()[1]);
                let mut gx = vec![0.0; n * d];
                kernels::gemm(n, k, d, up.data(), false, w.data(), true, 0.0, &mut gx);
                let mut gw = vec![0.0; d * k];
                kernels::gemm(d, n, k, x.data(), true, up.data(), false, 0.0, &mut gw);
                let mut gb = vec![0.0; k];
                for row in up.data().chunks(k) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![
                    (*input, Tensor::new(&[n, d], gx)?),
                    (*weight, Tensor::new(&[d, k], gw)?),
                    (*bias, Tensor::new(&[k], gb)?),
                ]
            }
            Op::BatchNorm {
                input,
                gamma,
                shift,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = normalized.dims4()?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let g = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dshift = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += up.data()[i] * normalized.data()[i];
                            dshift[ch] += up.data()[i];
                        }
                    }
                }
                let mut dx = vec![0.0; normalized.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let scale = g[ch] * inv_std[ch];
                        for i in base..base + hw {
                            dx[i] = if *batch_stats {
                                scale / m
                                    * (m * up.data()[i] - dshift[ch] - normalized.data()[i] * dgamma[ch])
                            } else {
                                scale * up.data()[i]
                            };
                        }
                    }
                }
                vec![
                    (*input, Tensor::new(normalized.shape(), dx)?),
                    (*gamma, Tensor::new(&[c], dgamma)?),
                    (*shift, Tensor::new(&[c], dshift)?),
                ]
            }
            Op::Relu(input) => {
                let g = val(*input).zip_map(up, |x, u| if x > 0.0 { u } else { 0.0 })?;
                vec![(*input, g)]
            }
            Op::Add(a, b) => vec![(*a, up.clone()), (*b, up.clone())],
            Op::Mul(a, b) => vec![(*a, up.mul(val(*b))?), (*b, up.mul(val(*a))?)],
            Op::Scale(input, factor) => vec![(*input, up.scale(*factor))],
            Op::Sum(input) => vec![(*input, Tensor::full(val(*input).shape(), up.item()))],
            Op::GlobalAvgPool(input) => {
                let shape = val(*input).shape();
                let hw = shape[2] * shape[3];
                let mut g = Vec::with_capacity(hw * up.len());
                for &u in up.data() {
                    g.extend(std::iter::repeat(u / hw as f64).take(hw));
                }
                vec![(*input, Tensor::new(shape, g)?)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = probs.shape()[0] as f64;
                let scale = up.item() / n;
                let g = probs.zip_map(targets, |p, y| (p - y) * scale)?;
                vec![(*logits, g)]
            }
            Op::Shortcut { input, stride } => {
                let (n, c, h, w) = val(*input).dims4()?;
                let (_, co, ho, wo) = up.dims4()?;
                let mut g = vec![0.0; n * c * h * w];
                for b in 0..n {
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                g[((b * c + ch) * h + oy * *stride) * w + ox * *stride] +=
                                    up.data()[((b * co + ch) * ho + oy) * wo + ox];
                            }
                        }
                    }
                }
                vec![(*input, Tensor::new(&[n, c, h, w], g)?)]
            }
            Op::BranchScale { input, backward } => {
                let factor = backward.factor(up.shape());
                vec![(*input, up.mul_broadcast(&factor)?)]
            }
            Op::ShakeShake {
                skip,
                first,
                second,
                backward,
            } => {
                let beta = backward.factor(up.shape()).expand_to(up.shape())?;
                let g1 = up.mul(&beta)?;
                let g2 = up.zip_map(&beta, |u, b| (1.0 - b) * u)?;
                vec![(*skip, up.clone()), (*first, g1), (*second, g2)]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let id = store.register("x", Tensor::from_fn(&[3], |i| i as f64), true);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let loss = tape.sum(x);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let id = store.register("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[2]));
        let loss = tape.sum(x);
        tape.backward(loss, &mut store).unwrap();
        assert!(matches!(tape.backward(loss, &mut store), Err(Error::BackwardTwice)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(x, &mut store), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_parameters_keep_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.register("used", Tensor::ones(&[2]), true);
        let unused = store.register("unused", Tensor::ones(&[2]), true);
        let mut tape = Tape::new();
        let u = tape.param(&store, used);
        let _ = tape.param(&store, unused);
        let loss = tape.sum(u);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(unused).data(), &[0.0, 0.0]);
        assert_eq!(store.grad(unused).shape(), store.value(unused).shape());
    }

    #[test]
    fn conv_scalar_and_box() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap());
        let w = tape.input(Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap());
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);

        let x = tape.input(Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.input(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[1, 2, 3, 3]));
        let w = tape.input(Tensor::ones(&[1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, 1, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let w = tape.input(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.input(Tensor::new(&[2], vec![3.0, 3.0]).unwrap());
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 5.0]);

        let b0 = tape.input(Tensor::zeros(&[2]));
        let y = tape.linear(x, w, b0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());

        let bad = tape.input(Tensor::zeros(&[3, 2]));
        assert!(tape.linear(x, bad, b).is_err());
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(&[2], vec![0.0, 1.0]).unwrap());
        let y = tape.relu(x);
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::zeros(&[3, 4]));
        let loss = tape.softmax_cross_entropy(z, Targets::Labels(&[0, 1, 3])).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);
        assert!((tape.value(loss).item() - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let z = tape.input(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            tape.softmax_cross_entropy(z, Targets::Labels(&[4])),
            Err(Error::LabelOutOfRange { label: 4, classes: 4 })
        ));
    }

    #[test]
    fn batch_norm_train_needs_two_values() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::ones(&[1, 2, 1, 1]));
        let g = tape.input(Tensor::ones(&[2]));
        let s = tape.input(Tensor::zeros(&[2]));
        assert!(tape.batch_norm(x, g, s, None, 1e-5).is_err());
        assert!(tape.batch_norm(x, g, s, Some((&[1.0, 1.0], &[1.0, 1.0])), 1e-5).is_ok());
    }

    #[test]
    fn shortcut_pads_and_subsamples() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
        let y = tape.shortcut(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2, 2]);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0, 8.0, 10.0, 0.0, 0.0, 0.0, 0.0]);
        let same = tape.shortcut(x, 1, 1).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn flatten_roundtrip() {
        let mut store = ParamStore::new();
        store.register("a", Tensor::from_fn(&[2, 2], |i| i as f64), true);
        store.register("b", Tensor::from_fn(&[3], |i| -(i as f64)), false);
        let flat = store.flatten_values();
        let mut other = store.clone();
        other.iter_mut().for_each(|p| p.value.fill(9.0));
        other.load_flat(&flat).unwrap();
        assert_eq!(other.flatten_values(), flat);
        assert!(other.load_flat(&flat[1..]).is_err());
    }
}
