//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are created
//! with [`Tape::leaf`]; each op returns a [`Var`] handle into the tape.
//! [`Tape::backward`] walks the tape in reverse and returns exact gradients
//! for every node that requires them.
//!
//! Image-like ops work on batched `[B, C, H, W]` tensors.

mod kernels;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{ParamSet, Tensor};
use kernels::{ConvGeom, PoolGeom};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input's spatial size; odd padding goes to the bottom/right.
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvMode {
    Standard,
    /// One group per input channel, `multiplier` output channels per group.
    Depthwise { multiplier: usize },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    AvgPool { input: Var, geom: PoolGeom },
    LayerNorm { input: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNorm { input: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
    Elu { input: Var, alpha: f64 },
    Dropout { input: Var, mask: Vec<f64> },
    Reshape { input: Var },
    Dense { input: Var, weight: Var, bias: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Running statistics of one batch-norm layer (per channel).
#[derive(Debug, Clone, Copy)]
pub struct BatchNormState<'a> {
    pub running_mean: &'a [f64],
    pub running_var: &'a [f64],
}

/// Per-channel statistics of the batch seen by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, the quantity blended into running statistics.
    pub unbiased_var: Vec<f64>,
}

impl BatchStats {
    /// Blends these statistics into running estimates:
    /// `running <- (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64], momentum: f64) {
        for (r, m) in running_mean.iter_mut().zip(&self.mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in running_var.iter_mut().zip(&self.unbiased_var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` if `var` does not require grad.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Tape leaves for every entry of a [`ParamSet`], in the set's order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, params: &ParamSet, name: &str) -> Result<Var> {
        params
            .index_of(name)
            .and_then(|i| self.vars.get(i).copied())
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Adds the gradient of each bound leaf into the matching parameter's accumulator.
    pub fn accumulate_into(&self, params: &mut ParamSet, grads: &Gradients) -> Result<()> {
        for (i, var) in self.vars.iter().enumerate() {
            let trainable = params.entry_at(i).is_some_and(|(_, p)| p.requires_grad);
            if !trainable {
                continue;
            }
            match grads.get(*var) {
                Some(g) => params.accumulate_grad(i, g)?,
                None => {
                    let shape = params.entry_at(i).expect("bound").1.value.shape().to_vec();
                    params.accumulate_grad(i, &Tensor::zeros(&shape))?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places every entry of `params` on the tape; trainable entries require grad.
    pub fn bind_params(&mut self, params: &ParamSet) -> BoundParams {
        let vars = params
            .iter()
            .map(|(_, p)| self.leaf(p.value.clone(), p.requires_grad))
            .collect();
        BoundParams { vars }
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, parents: &[Var], node_op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(op));
        }
        let requires_grad = parents.iter().any(|&p| self.needs(p));
        self.nodes.push(Node {
            value,
            requires_grad,
            op: node_op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// 2-D convolution of `input [B, C_in, H, W]` with `kernel [C_out, C_in / groups, kh, kw]`.
    ///
    /// Stride is 1 and there is no bias term.
    pub fn conv2d(&mut self, input: Var, kernel: Var, mode: ConvMode, padding: Padding) -> Result<Var> {
        let (x, k) = (self.shape(input), self.shape(kernel));
        if x.len() != 4 || k.len() != 4 {
            return Err(shape_err!("conv2d expects rank-4 input and kernel, got {x:?} and {k:?}"));
        }
        let (batch, in_channels, in_h, in_w) = (x[0], x[1], x[2], x[3]);
        let (out_channels, k_in, kh, kw) = (k[0], k[1], k[2], k[3]);
        let groups = match mode {
            ConvMode::Standard => {
                if k_in != in_channels {
                    return Err(shape_err!("kernel expects {k_in} input channels, input has {in_channels}"));
                }
                1
            }
            ConvMode::Depthwise { multiplier } => {
                if multiplier == 0 || k_in != 1 || out_channels != multiplier * in_channels {
                    return Err(shape_err!(
                        "depthwise kernel {k:?} incompatible with {in_channels} channels x multiplier {multiplier}"
                    ));
                }
                in_channels
            }
        };
        let (pad_top, pad_left, out_h, out_w) = match padding {
            Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, in_h, in_w),
            Padding::Valid => {
                if kh > in_h || kw > in_w {
                    return Err(shape_err!("valid conv kernel {kh}x{kw} larger than input {in_h}x{in_w}"));
                }
                (0, 0, in_h - kh + 1, in_w - kw + 1)
            }
        };
        let geom = ConvGeom {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            groups,
            kh,
            kw,
            pad_top,
            pad_left,
            out_h,
            out_w,
        };
        let out = kernels::conv_forward(&geom, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(vec![batch, out_channels, out_h, out_w], out)?;
        self.push("conv2d", value, &[input, kernel], Op::Conv2d { input, kernel, geom })
    }

    /// Depthwise convolution with `padding = same`, multiplier 1, followed by a
    /// 1x1 pointwise convolution.
    pub fn separable_conv2d(&mut self, input: Var, depth_kernel: Var, point_kernel: Var) -> Result<Var> {
        let depth = self.conv2d(input, depth_kernel, ConvMode::Depthwise { multiplier: 1 }, Padding::Same)?;
        let pk = self.shape(point_kernel);
        if pk.len() != 4 || pk[2] != 1 || pk[3] != 1 {
            return Err(shape_err!("pointwise kernel must be [C_out, C_in, 1, 1], got {pk:?}"));
        }
        self.conv2d(depth, point_kernel, ConvMode::Standard, Padding::Same)
    }

    /// Average pooling over `[B, C, H, W]`; trailing rows/columns that do not
    /// fill a window are dropped.
    pub fn avg_pool2d(&mut self, input: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let x = self.shape(input);
        if x.len() != 4 {
            return Err(shape_err!("avg_pool2d expects rank-4 input, got {x:?}"));
        }
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidArgument("pool window and stride must be positive".into()));
        }
        if window.0 > x[2] || window.1 > x[3] {
            return Err(shape_err!("pool window {window:?} larger than input {:?}", &x[2..]));
        }
        let geom = PoolGeom {
            planes: x[0] * x[1],
            in_h: x[2],
            in_w: x[3],
            win_h: window.0,
            win_w: window.1,
            stride_h: stride.0,
            stride_w: stride.1,
            out_h: (x[2] - window.0) / stride.0 + 1,
            out_w: (x[3] - window.1) / stride.1 + 1,
        };
        let shape = vec![x[0], x[1], geom.out_h, geom.out_w];
        let value = Tensor::new(shape, kernels::avg_pool_forward(&geom, self.value(input).data()))?;
        self.push("avg_pool2d", value, &[input], Op::AvgPool { input, geom })
    }

    /// Per-sample normalization over every non-batch element, with an
    /// elementwise affine `gain`/`bias` shaped like one sample.
    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let x = self.shape(input);
        if x.len() < 2 {
            return Err(shape_err!("layer_norm expects a batch axis, got {x:?}"));
        }
        let sample_shape = &x[1..];
        if self.shape(gain) != sample_shape || self.shape(bias) != sample_shape {
            return Err(shape_err!(
                "layer_norm gain/bias {:?}/{:?} must match {sample_shape:?}",
                self.shape(gain),
                self.shape(bias)
            ));
        }
        let n: usize = sample_shape.iter().product();
        if n < 2 {
            return Err(shape_err!("layer_norm needs at least 2 elements per sample"));
        }
        let batch = x[0];
        let shape = x.to_vec();
        let (xv, g, b) = (self.value(input).data(), self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(batch);
        for s in 0..batch {
            let row = &xv[s * n..(s + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for i in 0..n {
                let h = (row[i] - mean) * is;
                xhat[s * n + i] = h;
                out[s * n + i] = g[i] * h + b[i];
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "layer_norm",
            value,
            &[input, gain, bias],
            Op::LayerNorm { input, gain, bias, xhat, inv_std },
        )
    }

    /// Per-channel normalization of `[B, C, ...]` with affine `gain`/`bias` of shape `[C]`.
    ///
    /// With `running: None` the batch's own statistics are used (training mode)
    /// and returned; otherwise the given running statistics are applied.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gain: Var,
        bias: Var,
        running: Option<BatchNormState<'_>>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let x = self.shape(input);
        if x.len() < 2 {
            return Err(shape_err!("batch_norm expects [B, C, ...], got {x:?}"));
        }
        let (batch, channels) = (x[0], x[1]);
        let spatial: usize = x[2..].iter().product();
        if self.shape(gain) != [channels] || self.shape(bias) != [channels] {
            return Err(shape_err!("batch_norm gain/bias must have shape [{channels}]"));
        }
        let shape = x.to_vec();
        let m = batch * spatial;
        let xv = self.value(input).data();
        let idx = |b: usize, c: usize, i: usize| (b * channels + c) * spatial + i;

        let (mean, var, stats) = match running {
            None => {
                if batch < 2 {
                    return Err(Error::InvalidArgument(
                        "batch_norm in training mode needs a batch of at least 2".into(),
                    ));
                }
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for c in 0..channels {
                    let mut s = 0.0;
                    for b in 0..batch {
                        s += xv[idx(b, c, 0)..idx(b, c, 0) + spatial].iter().sum::<f64>();
                    }
                    mean[c] = s / m as f64;
                    let mut ss = 0.0;
                    for b in 0..batch {
                        ss += xv[idx(b, c, 0)..idx(b, c, 0) + spatial]
                            .iter()
                            .map(|v| (v - mean[c]) * (v - mean[c]))
                            .sum::<f64>();
                    }
                    var[c] = ss / m as f64;
                }
                let unbiased_var = var.iter().map(|v| v * m as f64 / (m as f64 - 1.0)).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    unbiased_var,
                };
                (mean, var, Some(stats))
            }
            Some(state) => {
                if state.running_mean.len() != channels || state.running_var.len() != channels {
                    return Err(shape_err!("running statistics must have {channels} entries"));
                }
                (state.running_mean.to_vec(), state.running_var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bb) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for c in 0..channels {
                let o = idx(b, c, 0);
                for i in o..o + spatial {
                    let h = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bb[c];
                }
            }
        }
        let batch_stats = stats.is_some();
        let value = Tensor::new(shape, out)?;
        let var_out = self.push(
            "batch_norm",
            value,
            &[input, gain, bias],
            Op::BatchNorm { input, gain, bias, xhat, inv_std, batch_stats },
        )?;
        Ok((var_out, stats))
    }

    pub fn elu(&mut self, input: Var, alpha: f64) -> Result<Var> {
        let x = self.value(input);
        let out = x
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { alpha * v.exp_m1() })
            .collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push("elu", value, &[input], Op::Elu { input, alpha })
    }

    /// Inverted dropout. In eval mode, or with `p == 0`, the input is passed
    /// through unchanged (no rng draws are made).
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 / (1.0 - p);
        let x = self.value(input);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push("dropout", value, &[input], Op::Dropout { input, mask })
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push("reshape", value, &[input], Op::Reshape { input })
    }

    /// Flattens `[B, ...]` into `[B, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let x = self.shape(input);
        let batch = x[0];
        let width = x[1..].iter().product();
        self.reshape(input, vec![batch, width])
    }

    /// `input [B, d] . weight[k, d]^T + bias[k]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.shape(input), self.shape(weight), self.shape(bias));
        if x.len() != 2 || w.len() != 2 || w[1] != x[1] || b != [w[0]] {
            return Err(shape_err!("dense: input {x:?}, weight {w:?}, bias {b:?} incompatible"));
        }
        let (batch, d, k) = (x[0], x[1], w[0]);
        let (xv, wv, bv) = (self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let mut out = vec![0.0; batch * k];
        for s in 0..batch {
            let row = &xv[s * d..(s + 1) * d];
            for j in 0..k {
                let wr = &wv[j * d..(j + 1) * d];
                out[s * k + j] = bv[j] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let value = Tensor::new(vec![batch, k], out)?;
        self.push("dense", value, &[input, weight, bias], Op::Dense { input, weight, bias })
    }

    /// Mean softmax cross-entropy of `logits [B, k]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.shape(logits);
        if x.len() != 2 || x[0] != labels.len() {
            return Err(shape_err!("cross entropy: logits {x:?} for {} labels", labels.len()));
        }
        let (batch, k) = (x[0], x[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {k} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; batch * k];
        let mut total = 0.0;
        for s in 0..batch {
            let row = &lv[s * k..(s + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..k {
                probs[s * k + j] = (row[j] - lse).exp();
            }
            total += lse - row[labels[s]];
        }
        let value = Tensor::scalar(total / batch as f64);
        self.push(
            "softmax_cross_entropy",
            value,
            &[logits],
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        )
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{op}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |p, q| p + q);
        self.push("add", value, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |p, q| p - q);
        self.push("sub", value, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |p, q| p * q);
        self.push("mul", value, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * factor).collect())?;
        self.push("scale", value, &[a], Op::Scale(a, factor))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * v).collect())?;
        self.push("square", value, &[a], Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push("sum", value, &[a], Op::Sum(a))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.needs(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.map(|data| Tensor::new(self.nodes[i].value.shape().to_vec(), data).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Runs `f` on the gradient buffer of `v` if `v` needs a gradient.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[v.0].requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(buf);
            }
        };
        match &nodes[node].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                let kv = nodes[kernel.0].value.data();
                let iv = nodes[input.0].value.data();
                acc(*input, &mut |buf| kernels::conv_backward_input(geom, g, kv, buf));
                acc(*kernel, &mut |buf| kernels::conv_backward_kernel(geom, g, iv, buf));
            }
            Op::AvgPool { input, geom } => {
                acc(*input, &mut |buf| kernels::avg_pool_backward(geom, g, buf));
            }
            Op::LayerNorm { input, gain, bias, xhat, inv_std } => {
                let gv = nodes[gain.0].value.data();
                let n = gv.len();
                acc(*input, &mut |buf| {
                    for (s, is) in inv_std.iter().enumerate() {
                        let range = s * n..(s + 1) * n;
                        let (gs, hs) = (&g[range.clone()], &xhat[range.clone()]);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for i in 0..n {
                            let d = gs[i] * gv[i];
                            mean_d += d;
                            mean_dh += d * hs[i];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        for (i, out) in buf[range].iter_mut().enumerate() {
                            *out += is * (gs[i] * gv[i] - mean_d - hs[i] * mean_dh);
                        }
                    }
                });
                acc(*gain, &mut |buf| {
                    for (i, (gi, hi)) in g.iter().zip(xhat).enumerate() {
                        buf[i % n] += gi * hi;
                    }
                });
                acc(*bias, &mut |buf| {
                    for (i, gi) in g.iter().enumerate() {
                        buf[i % n] += gi;
                    }
                });
            }
            Op::BatchNorm { input, gain, bias, xhat, inv_std, batch_stats } => {
                let gv = nodes[gain.0].value.data();
                let shape = nodes[input.0].value.shape();
                let (batch, channels) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let m = (batch * spatial) as f64;
                let idx = |b: usize, c: usize| (b * channels + c) * spatial;
                let mut sum_g = vec![0.0; channels];
                let mut sum_gh = vec![0.0; channels];
                for b in 0..batch {
                    for c in 0..channels {
                        let o = idx(b, c);
                        for i in o..o + spatial {
                            sum_g[c] += g[i];
                            sum_gh[c] += g[i] * xhat[i];
                        }
                    }
                }
                acc(*input, &mut |buf| {
                    for b in 0..batch {
                        for c in 0..channels {
                            let o = idx(b, c);
                            let k = gv[c] * inv_std[c];
                            for i in o..o + spatial {
                                buf[i] += if *batch_stats {
                                    k * (g[i] - sum_g[c] / m - xhat[i] * sum_gh[c] / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                });
                acc(*gain, &mut |buf| {
                    for (b, s) in buf.iter_mut().zip(&sum_gh) {
                        *b += s;
                    }
                });
                acc(*bias, &mut |buf| {
                    for (b, s) in buf.iter_mut().zip(&sum_g) {
                        *b += s;
                    }
                });
            }
            Op::Elu { input, alpha } => {
                let xv = nodes[input.0].value.data();
                acc(*input, &mut |buf| {
                    for ((b, gi), &x) in buf.iter_mut().zip(g).zip(xv) {
                        *b += if x > 0.0 { *gi } else { gi * alpha * x.exp() };
                    }
                });
            }
            Op::Dropout { input, mask } => {
                acc(*input, &mut |buf| {
                    for ((b, gi), m) in buf.iter_mut().zip(g).zip(mask) {
                        *b += gi * m;
                    }
                });
            }
            Op::Reshape { input } => {
                acc(*input, &mut |buf| add_into(buf, g));
            }
            Op::Dense { input, weight, bias } => {
                let (xv, wv) = (nodes[input.0].value.data(), nodes[weight.0].value.data());
                let k = nodes[bias.0].value.len();
                let d = wv.len() / k;
                let batch = g.len() / k;
                acc(*input, &mut |buf| {
                    for s in 0..batch {
                        for j in 0..k {
                            let gj = g[s * k + j];
                            for (b, w) in buf[s * d..(s + 1) * d].iter_mut().zip(&wv[j * d..(j + 1) * d]) {
                                *b += gj * w;
                            }
                        }
                    }
                });
                acc(*weight, &mut |buf| {
                    for s in 0..batch {
                        for j in 0..k {
                            let gj = g[s * k + j];
                            for (b, x) in buf[j * d..(j + 1) * d].iter_mut().zip(&xv[s * d..(s + 1) * d]) {
                                *b += gj * x;
                            }
                        }
                    }
                });
                acc(*bias, &mut |buf| {
                    for s in 0..batch {
                        for j in 0..k {
                            buf[j] += g[s * k + j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let batch = labels.len();
                let k = probs.len() / batch;
                let scale = g[0] / batch as f64;
                acc(*logits, &mut |buf| {
                    for (s, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            buf[s * k + j] += scale * (probs[s * k + j] - onehot);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |buf| {
                    for ((o, gi), y) in buf.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                acc(*b, &mut |buf| {
                    for ((o, gi), x) in buf.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::Scale(a, factor) => {
                acc(*a, &mut |buf| {
                    for (o, gi) in buf.iter_mut().zip(g) {
                        *o += gi * factor;
                    }
                });
            }
            Op::Square(a) => {
                let av = nodes[a.0].value.data();
                acc(*a, &mut |buf| {
                    for ((o, gi), x) in buf.iter_mut().zip(g).zip(av) {
                        *o += 2.0 * gi * x;
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |buf| {
                    for o in buf.iter_mut() {
                        *o += g[0];
                    }
                });
            }
        }
    }
}

fn add_into(buf: &mut [f64], g: &[f64]) {
    for (o, gi) in buf.iter_mut().zip(g) {
        *o += gi;
    }
}

#[cfg(test)]
mod tests;
