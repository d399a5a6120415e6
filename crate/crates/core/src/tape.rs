//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node whose inputs are earlier nodes, so the
//! tape is topologically ordered by construction and `backward` is a single
//! reverse sweep. An inference tape computes the same values but keeps no
//! backward state.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, BatchStats};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Shape5, Tensor5};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        groups: usize,
        padding: [usize; 3],
    },
    AvgPool {
        input: Var,
        window: [usize; 3],
        stride: [usize; 3],
    },
    Linear {
        input: Var,
        weights: Var,
        bias: Option<Var>,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Shuffle {
        input: Var,
        groups: usize,
    },
    ScaleChannels {
        input: Var,
        scale: Var,
    },
    MulConst {
        input: Var,
        factor: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
    HalfSumSquares {
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor5,
    op: Op,
    needs_grad: bool,
}

/// Where batch norm takes its statistics from.
pub enum NormStats<'a> {
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
    params: HashMap<ParamId, Var>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape that records backward rules.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            params: HashMap::new(),
            grads: None,
        }
    }

    /// A tape that only evaluates values.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor5 {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape5 {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor5, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads = None;
        Var(self.nodes.len() - 1)
    }

    /// Record a leaf. Gradients are tracked when the tensor asks for them.
    pub fn leaf(&mut self, tensor: Tensor5) -> Var {
        let needs_grad = self.recording && tensor.requires_grad;
        let mut value = tensor;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        self.grads = None;
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.leaf(store.tensor(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        groups: usize,
        padding: [usize; 3],
    ) -> Result<Var> {
        let (is, ks) = (self.shape(input), self.shape(kernel));
        let bias_len = bias.map(|b| self.value(b).numel());
        let os = kernels::conv3d_output_shape(is, ks, bias_len, groups, padding)?;
        let mut out = vec![0.0; os.numel()];
        kernels::conv3d_forward(
            self.value(input).data(),
            is,
            self.value(kernel).data(),
            ks,
            bias.map(|b| self.value(b).data()),
            groups,
            padding,
            os,
            &mut out,
        );
        let value = Tensor5::from_vec(os, out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv3d {
                input,
                kernel,
                bias,
                groups,
                padding,
            },
            &inputs,
        ))
    }

    pub fn avg_pool3d(&mut self, input: Var, window: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        let is = self.shape(input);
        let os = kernels::pool_output_shape(is, window, stride)?;
        let mut out = vec![0.0; os.numel()];
        kernels::avg_pool3d_forward(self.value(input).data(), is, window, stride, os, &mut out);
        let value = Tensor5::from_vec(os, out)?;
        Ok(self.push(
            value,
            Op::AvgPool {
                input,
                window,
                stride,
            },
            &[input],
        ))
    }

    /// Global average pooling to `(n, c, 1, 1, 1)`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input);
        self.avg_pool3d(input, [s.d, s.h, s.w], [1, 1, 1])
    }

    /// Affine map over flattened batch items: `x · wᵀ + b`.
    pub fn linear(&mut self, input: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let (is, ws) = (self.shape(input), self.shape(weights));
        let f_in = is.per_sample();
        let f_out = ws.n;
        if ws.per_sample() != f_in {
            return Err(Error::Shape {
                op: "fully_connected",
                axis: "in_features",
                expected: f_in,
                found: ws.per_sample(),
            });
        }
        if let Some(b) = bias {
            let len = self.value(b).numel();
            if len != f_out {
                return Err(Error::Shape {
                    op: "fully_connected",
                    axis: "bias",
                    expected: f_out,
                    found: len,
                });
            }
        }
        let mut out = vec![0.0; is.n * f_out];
        kernels::linear_forward(
            self.value(input).data(),
            is.n,
            f_in,
            self.value(weights).data(),
            f_out,
            bias.map(|b| self.value(b).data()),
            &mut out,
        );
        let value = Tensor5::matrix(is.n, f_out, out)?;
        let mut inputs = vec![input, weights];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Linear {
                input,
                weights,
                bias,
            },
            &inputs,
        ))
    }

    /// Batch normalization. In batch mode the statistics used are returned so
    /// the caller can update its running averages.
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        stats: NormStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(input);
        if s.n == 0 {
            return Err(Error::config("batch_norm: empty batch"));
        }
        for (axis, v) in [("scale", scale), ("shift", shift)] {
            if self.value(v).numel() != s.c {
                return Err(Error::Shape {
                    op: "batch_norm",
                    axis,
                    expected: s.c,
                    found: self.value(v).numel(),
                });
            }
        }
        let mut xhat = vec![0.0; s.numel()];
        let mut out = vec![0.0; s.numel()];
        let x = self.value(input).data();
        let (sc, sh) = (self.value(scale).data(), self.value(shift).data());
        let (inv_std, batch, used_batch) = match stats {
            NormStats::Batch => {
                let (inv_std, st) = kernels::batch_norm_train(x, s, sc, sh, eps, &mut xhat, &mut out);
                (inv_std, Some(st), true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != s.c || var.len() != s.c {
                    return Err(Error::Shape {
                        op: "batch_norm",
                        axis: "running_stats",
                        expected: s.c,
                        found: mean.len().min(var.len()),
                    });
                }
                let inv_std = kernels::batch_norm_eval(x, s, sc, sh, mean, var, eps, &mut xhat, &mut out);
                (inv_std, None, false)
            }
        };
        let value = Tensor5::from_vec(s, out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats: used_batch,
            },
            &[input, scale, shift],
        );
        Ok((v, batch))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let s = self.shape(input);
        let mut out = vec![0.0; s.numel()];
        kernels::relu(self.value(input).data(), &mut out);
        let value = Tensor5::from_vec(s, out).expect("same shape");
        self.push(value, Op::Relu { input }, &[input])
    }

    /// Which inputs of every recorded ReLU were positive, in recording order.
    /// Two evaluations with equal patterns sit on the same linear piece of
    /// every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { input } => Some(input),
                _ => None,
            })
            .flat_map(|input| self.value(input).data().iter().map(|&x| x > 0.0))
            .collect()
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::config("concat of zero tensors"))?);
        let mut c = 0;
        for (i, v) in inputs.iter().enumerate() {
            let s = self.shape(*v);
            for (axis, a, b) in [("n", s.n, first.n), ("d", s.d, first.d), ("h", s.h, first.h), ("w", s.w, first.w)] {
                if a != b {
                    return Err(Error::Config(format!(
                        "concat_channels: input {i} has {axis}={a}, expected {b}"
                    )));
                }
            }
            c += s.c;
        }
        let os = first.with_channels(c);
        let vol = os.volume();
        let mut out = Vec::with_capacity(os.numel());
        for b in 0..os.n {
            for v in inputs {
                let t = self.value(*v);
                let len = t.shape().c * vol;
                out.extend_from_slice(&t.data()[b * len..(b + 1) * len]);
            }
        }
        let value = Tensor5::from_vec(os, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    pub fn channel_shuffle(&mut self, input: Var, groups: usize) -> Result<Var> {
        let s = self.shape(input);
        if groups == 0 || s.c % groups != 0 {
            return Err(Error::config(format!(
                "channel_shuffle: {groups} groups do not divide {} channels",
                s.c
            )));
        }
        let mut out = vec![0.0; s.numel()];
        kernels::channel_shuffle(self.value(input).data(), s, groups, &mut out);
        let value = Tensor5::from_vec(s, out)?;
        Ok(self.push(value, Op::Shuffle { input, groups }, &[input]))
    }

    /// Multiply every channel plane by a per-(sample, channel) factor taken
    /// from `scale`, shaped `(n, c, 1, 1, 1)`.
    pub fn scale_channels(&mut self, input: Var, scale: Var) -> Result<Var> {
        let (s, ss) = (self.shape(input), self.shape(scale));
        if ss.numel() != s.n * s.c {
            return Err(Error::Shape {
                op: "scale_channels",
                axis: "channels",
                expected: s.n * s.c,
                found: ss.numel(),
            });
        }
        let mut out = vec![0.0; s.numel()];
        kernels::scale_channels(self.value(input).data(), s, self.value(scale).data(), &mut out);
        let value = Tensor5::from_vec(s, out)?;
        Ok(self.push(value, Op::ScaleChannels { input, scale }, &[input, scale]))
    }

    /// Elementwise product with a constant (non-differentiable) tensor.
    pub fn mul_const(&mut self, input: Var, factor: Vec<f64>) -> Result<Var> {
        let s = self.shape(input);
        if factor.len() != s.numel() {
            return Err(Error::Shape {
                op: "mul_const",
                axis: "numel",
                expected: s.numel(),
                found: factor.len(),
            });
        }
        let out: Vec<f64> = self
            .value(input)
            .data()
            .iter()
            .zip(&factor)
            .map(|(x, f)| x * f)
            .collect();
        let value = Tensor5::from_vec(s, out)?;
        Ok(self.push(value, Op::MulConst { input, factor }, &[input]))
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        let (rows, k) = (s.n, s.per_sample());
        if labels.len() != rows {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                axis: "batch",
                expected: rows,
                found: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label, classes: k });
        }
        let mut probs = vec![0.0; rows * k];
        let x = self.value(logits).data();
        let lse = kernels::softmax_rows(x, rows, k, &mut probs);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| lse[r] - x[r * k + l])
            .sum::<f64>()
            / rows as f64;
        let value = Tensor5::vector(vec![loss]);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// `sum(w ⊙ x)`; with `w = 1` this is a plain sum.
    pub fn weighted_sum(&mut self, input: Var, weights: Vec<f64>) -> Result<Var> {
        let x = self.value(input).data();
        if weights.len() != x.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                axis: "numel",
                expected: x.len(),
                found: weights.len(),
            });
        }
        let total = x.iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor5::vector(vec![total]),
            Op::WeightedSum { input, weights },
            &[input],
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let n = self.value(input).numel();
        self.weighted_sum(input, vec![1.0; n]).expect("matching length")
    }

    /// `sum(x²) / 2`.
    pub fn half_sum_squares(&mut self, input: Var) -> Var {
        let total = self.value(input).data().iter().map(|v| v * v).sum::<f64>() / 2.0;
        self.push(Tensor5::vector(vec![total]), Op::HalfSumSquares { input }, &[input])
    }

    /// Reverse sweep from a scalar node. Gradients of every reachable node are
    /// retained and can be read with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape("backward called on a node that was never recorded".into()));
        }
        if !self.recording {
            return Err(Error::Tape("backward on an inference tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let os = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d {
                input,
                kernel,
                bias,
                groups,
                padding,
            } => {
                let mut gi = self.accumulate(grads, *input).map(|s| s.to_vec());
                let mut gk = self.accumulate(grads, *kernel).map(|s| s.to_vec());
                let mut gb = bias.and_then(|b| self.accumulate(grads, b).map(|s| s.to_vec()));
                kernels::conv3d_backward(
                    self.value(*input).data(),
                    self.shape(*input),
                    self.value(*kernel).data(),
                    self.shape(*kernel),
                    *groups,
                    *padding,
                    os,
                    g,
                    gi.as_deref_mut(),
                    gk.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.store(grads, *input, gi);
                self.store(grads, *kernel, gk);
                if let Some(b) = bias {
                    self.store(grads, *b, gb);
                }
            }
            Op::AvgPool {
                input,
                window,
                stride,
            } => {
                let is = self.shape(*input);
                if let Some(gi) = self.accumulate(grads, *input) {
                    kernels::avg_pool3d_backward(is, *window, *stride, os, g, gi);
                }
            }
            Op::Linear {
                input,
                weights,
                bias,
            } => {
                let is = self.shape(*input);
                let mut gi = self.accumulate(grads, *input).map(|s| s.to_vec());
                let mut gw = self.accumulate(grads, *weights).map(|s| s.to_vec());
                let mut gb = bias.and_then(|b| self.accumulate(grads, b).map(|s| s.to_vec()));
                kernels::linear_backward(
                    self.value(*input).data(),
                    is.n,
                    is.per_sample(),
                    self.value(*weights).data(),
                    os.per_sample(),
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                self.store(grads, *input, gi);
                self.store(grads, *weights, gw);
                if let Some(b) = bias {
                    self.store(grads, *b, gb);
                }
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let mut gi = self.accumulate(grads, *input).map(|s| s.to_vec());
                let mut gs = self.accumulate(grads, *scale).map(|s| s.to_vec());
                let mut gh = self.accumulate(grads, *shift).map(|s| s.to_vec());
                kernels::batch_norm_backward(
                    os,
                    xhat,
                    inv_std,
                    self.value(*scale).data(),
                    g,
                    *batch_stats,
                    gi.as_deref_mut(),
                    gs.as_deref_mut(),
                    gh.as_deref_mut(),
                );
                self.store(grads, *input, gi);
                self.store(grads, *scale, gs);
                self.store(grads, *shift, gh);
            }
            Op::Relu { input } => {
                let x = self.value(*input).data();
                if let Some(gi) = self.accumulate(grads, *input) {
                    for ((gi, g), x) in gi.iter_mut().zip(g).zip(x) {
                        if *x > 0.0 {
                            *gi += g;
                        }
                    }
                }
            }
            Op::Concat { inputs } => {
                let vol = os.volume();
                let mut offset = 0;
                for v in inputs {
                    let c = self.shape(*v).c;
                    if let Some(gi) = self.accumulate(grads, *v) {
                        for b in 0..os.n {
                            let src = &g[(b * os.c + offset) * vol..][..c * vol];
                            for (d, s) in gi[b * c * vol..][..c * vol].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Shuffle { input, groups } => {
                if let Some(gi) = self.accumulate(grads, *input) {
                    let vol = os.volume();
                    for b in 0..os.n {
                        for oc in 0..os.c {
                            let ic = kernels::shuffle_source(oc, os.c, *groups);
                            let src = &g[(b * os.c + oc) * vol..][..vol];
                            for (d, s) in gi[(b * os.c + ic) * vol..][..vol].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::ScaleChannels { input, scale } => {
                let vol = os.volume();
                let x = self.value(*input).data();
                let sv = self.value(*scale).data();
                if let Some(gi) = self.accumulate(grads, *input) {
                    for (p, s) in sv.iter().enumerate() {
                        for (d, go) in gi[p * vol..][..vol].iter_mut().zip(&g[p * vol..][..vol]) {
                            *d += go * s;
                        }
                    }
                }
                if let Some(gs) = self.accumulate(grads, *scale) {
                    for (p, d) in gs.iter_mut().enumerate() {
                        *d += g[p * vol..][..vol]
                            .iter()
                            .zip(&x[p * vol..][..vol])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
            Op::MulConst { input, factor } => {
                if let Some(gi) = self.accumulate(grads, *input) {
                    for ((d, go), f) in gi.iter_mut().zip(g).zip(factor) {
                        *d += go * f;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = self.shape(*logits).per_sample();
                let n = labels.len() as f64;
                if let Some(gi) = self.accumulate(grads, *logits) {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            gi[r * k + j] += g[0] * (probs[r * k + j] - onehot) / n;
                        }
                    }
                }
            }
            Op::WeightedSum { input, weights } => {
                if let Some(gi) = self.accumulate(grads, *input) {
                    for (d, w) in gi.iter_mut().zip(weights) {
                        *d += g[0] * w;
                    }
                }
            }
            Op::HalfSumSquares { input } => {
                let x = self.value(*input).data();
                if let Some(gi) = self.accumulate(grads, *input) {
                    for (d, v) in gi.iter_mut().zip(x) {
                        *d += g[0] * v;
                    }
                }
            }
        }
    }

    fn store(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Option<Vec<f64>>) {
        if let Some(g) = g {
            grads[v.0] = Some(g);
        }
    }

    /// Gradient of the last backward's loss with respect to `v`; zeros when
    /// `v` was not reachable.
    pub fn grad(&self, v: Var) -> Result<Vec<f64>> {
        let grads = self
            .grads
            .as_ref()
            .ok_or_else(|| Error::Tape("gradient requested before backward".into()))?;
        Ok(grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.numel()]))
    }

    /// Write gradients into every parameter's `grad` buffer. Parameters that
    /// never entered this tape receive zeros.
    pub fn write_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        if self.grads.is_none() {
            return Err(Error::Tape("parameter gradients requested before backward".into()));
        }
        store.zero_grads();
        for (id, v) in &self.params {
            store.get_mut(*id).tensor.grad = Some(self.grad(*v)?);
        }
        Ok(())
    }
}
