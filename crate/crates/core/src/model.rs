//! EEGNet-style classifier with a switchable normalization layer.
//!
//! Layer layout (defaults in brackets):
//!
//! ```text
//! block 1  temporal conv   [8 kernels 1x64, same]     -> (8, C, T)
//!          norm-1
//!          depthwise conv  [C x 1, valid, x2]         -> (16, 1, T)
//!          norm-2, ELU, avg-pool 1x4 stride 1x4, dropout
//! block 2  separable conv  [16 kernels 1x16, same]    -> (16, 1, T/4)
//!          norm-3, ELU, avg-pool 1x8, dropout, flatten
//! block 3  dense           [16 * T/4/8 -> n_classes]
//! ```
//!
//! Convolutions carry no bias; the following normalization absorbs any offset.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchNormState, BoundParams, ConvMode, Padding, Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const ELU_ALPHA: f64 = 1.0;
pub const NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
const POOL1: usize = 4;
const POOL2: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Batch,
    Layer,
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NormKind::Batch => "batch",
            NormKind::Layer => "layer",
        })
    }
}

impl std::str::FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "batch" => Ok(NormKind::Batch),
            "layer" => Ok(NormKind::Layer),
            _ => Err(Error::InvalidArgument(format!("unknown norm kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub channels: usize,
    pub time_points: usize,
    pub n_classes: usize,
    pub norm: NormKind,
    pub dropout_p: f64,
    pub temporal_filters: usize,
    pub temporal_kernel: usize,
    pub depth_multiplier: usize,
    pub separable_filters: usize,
    pub separable_kernel: usize,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            channels: 64,
            time_points: 321,
            n_classes: 2,
            norm: NormKind::Layer,
            dropout_p: 0.25,
            temporal_filters: 8,
            temporal_kernel: 64,
            depth_multiplier: 2,
            separable_filters: 16,
            separable_kernel: 16,
        }
    }
}

impl ClassifierSpec {
    pub fn with_norm(norm: NormKind) -> Self {
        ClassifierSpec {
            norm,
            ..Self::default()
        }
    }

    pub fn depthwise_filters(&self) -> usize {
        self.temporal_filters * self.depth_multiplier
    }

    pub fn pooled_time(&self) -> usize {
        self.time_points / POOL1 / POOL2
    }

    pub fn flatten_width(&self) -> usize {
        self.separable_filters * self.pooled_time()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("time_points", self.time_points),
            ("n_classes", self.n_classes),
            ("temporal_filters", self.temporal_filters),
            ("temporal_kernel", self.temporal_kernel),
            ("depth_multiplier", self.depth_multiplier),
            ("separable_filters", self.separable_filters),
            ("separable_kernel", self.separable_kernel),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("classifier spec: {name} must be positive")));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument("classifier spec: need at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidArgument(format!("dropout {} not in [0, 1)", self.dropout_p)));
        }
        if self.pooled_time() == 0 {
            return Err(Error::InvalidArgument(format!(
                "{} time points leave nothing after pooling by {POOL1} and {POOL2}",
                self.time_points
            )));
        }
        Ok(())
    }
}

/// Trials with class labels; `inputs` is `[B, channels, time_points]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.rank() != 3 || inputs.shape()[0] != labels.len() {
            return Err(shape_err!(
                "batch of shape {:?} with {} labels",
                inputs.shape(),
                labels.len()
            ));
        }
        Ok(LabeledBatch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Concatenates batches along the sample axis.
    pub fn concat(batches: &[&LabeledBatch]) -> Result<Self> {
        let first = batches
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero batches".into()))?;
        let tail = first.inputs.shape()[1..].to_vec();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for b in batches {
            if b.inputs.shape()[1..] != tail[..] {
                return Err(shape_err!("concat: {:?} vs {:?}", b.inputs.shape(), tail));
            }
            data.extend_from_slice(b.inputs.data());
            labels.extend_from_slice(&b.labels);
        }
        let mut shape = vec![labels.len()];
        shape.extend(tail);
        LabeledBatch::new(Tensor::new(shape, data)?, labels)
    }
}

/// Output of one traced forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Var,
    /// `(stage, per-sample shape)` after each block boundary.
    pub trace: Vec<(&'static str, Vec<usize>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eegnet {
    pub spec: ClassifierSpec,
}

fn glorot_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

fn conv_kernel<R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor {
    let receptive = shape[2] * shape[3];
    glorot_uniform(&shape, shape[1] * receptive, shape[0] * receptive, rng)
}

/// Builds freshly initialized parameters for `spec`.
pub fn build_classifier<R: Rng + ?Sized>(spec: &ClassifierSpec, rng: &mut R) -> Result<ParamSet> {
    spec.validate()?;
    let s = spec;
    let f1 = s.temporal_filters;
    let f12 = s.depthwise_filters();
    let mut p = ParamSet::new();
    p.insert("temporal.kernel", conv_kernel([f1, 1, 1, s.temporal_kernel], rng))?;
    add_norm(&mut p, s.norm, "norm1", &[f1, s.channels, s.time_points])?;
    p.insert("depthwise.kernel", conv_kernel([f12, 1, s.channels, 1], rng))?;
    add_norm(&mut p, s.norm, "norm2", &[f12, 1, s.time_points])?;
    p.insert("separable.depthwise", conv_kernel([f12, 1, 1, s.separable_kernel], rng))?;
    p.insert("separable.pointwise", conv_kernel([s.separable_filters, f12, 1, 1], rng))?;
    add_norm(&mut p, s.norm, "norm3", &[s.separable_filters, 1, s.time_points / POOL1])?;
    let flat = s.flatten_width();
    p.insert("dense.weight", glorot_uniform(&[s.n_classes, flat], flat, s.n_classes, rng))?;
    p.insert("dense.bias", Tensor::zeros(&[s.n_classes]))?;
    Ok(p)
}

fn add_norm(p: &mut ParamSet, kind: NormKind, prefix: &str, sample_shape: &[usize]) -> Result<()> {
    let affine_shape = match kind {
        NormKind::Layer => sample_shape.to_vec(),
        NormKind::Batch => vec![sample_shape[0]],
    };
    p.insert(format!("{prefix}.gain"), Tensor::full(&affine_shape, 1.0))?;
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&affine_shape))?;
    if kind == NormKind::Batch {
        p.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&affine_shape))?;
        p.insert_buffer(format!("{prefix}.running_var"), Tensor::full(&affine_shape, 1.0))?;
    }
    Ok(())
}

pub fn param_count(params: &ParamSet) -> usize {
    params.param_count()
}

/// Deep copy; later updates to either set never affect the other.
pub fn clone_params(params: &ParamSet) -> ParamSet {
    params.clone()
}

impl Eegnet {
    pub fn new(spec: ClassifierSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Eegnet { spec })
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        build_classifier(&self.spec, rng)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = &self.spec;
        if shape.len() != 3 || shape[1] != s.channels || shape[2] != s.time_points {
            return Err(shape_err!(
                "expected [B, {}, {}] input, got {shape:?}",
                s.channels,
                s.time_points
            ));
        }
        Ok(())
    }

    fn norm(
        &self,
        tape: &mut Tape,
        params: &mut ParamSet,
        bound: &BoundParams,
        prefix: &str,
        x: Var,
        training: bool,
    ) -> Result<Var> {
        let gain = bound.var(params, &format!("{prefix}.gain"))?;
        let bias = bound.var(params, &format!("{prefix}.bias"))?;
        match self.spec.norm {
            NormKind::Layer => tape.layer_norm(x, gain, bias, NORM_EPS),
            NormKind::Batch => {
                let mean_name = format!("{prefix}.running_mean");
                let var_name = format!("{prefix}.running_var");
                if training {
                    let (y, stats) = tape.batch_norm(x, gain, bias, None, NORM_EPS)?;
                    let stats = stats.expect("training mode returns batch stats");
                    let mut mean = params.get(&mean_name)?.clone();
                    let var = params.get_mut(&var_name)?;
                    stats.update_running(mean.data_mut(), var.data_mut(), BATCH_NORM_MOMENTUM);
                    *params.get_mut(&mean_name)? = mean;
                    Ok(y)
                } else {
                    let state = BatchNormState {
                        running_mean: params.get(&mean_name)?.data(),
                        running_var: params.get(&var_name)?.data(),
                    };
                    Ok(tape.batch_norm(x, gain, bias, Some(state), NORM_EPS)?.0)
                }
            }
        }
    }

    /// Records the full network on `tape` for input `x: [B, channels, time_points]`.
    ///
    /// In training mode dropout draws from `rng` and batch-norm layers use batch
    /// statistics, updating the running estimates stored in `params`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &mut ParamSet,
        bound: &BoundParams,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Forward> {
        let s = self.spec;
        self.check_input(tape.shape(x))?;
        let batch = tape.shape(x)[0];
        let mut trace = Vec::new();
        let mut record = |tape: &Tape, stage: &'static str, v: Var| trace.push((stage, tape.shape(v)[1..].to_vec()));

        let x = tape.reshape(x, vec![batch, 1, s.channels, s.time_points])?;
        let k = bound.var(params, "temporal.kernel")?;
        let h = tape.conv2d(x, k, ConvMode::Standard, Padding::Same)?;
        record(tape, "temporal_conv", h);
        let h = self.norm(tape, params, bound, "norm1", h, training)?;

        let k = bound.var(params, "depthwise.kernel")?;
        let mode = ConvMode::Depthwise { multiplier: s.depth_multiplier };
        let h = tape.conv2d(h, k, mode, Padding::Valid)?;
        record(tape, "depthwise_conv", h);
        let h = self.norm(tape, params, bound, "norm2", h, training)?;
        let h = tape.elu(h, ELU_ALPHA)?;
        let h = tape.avg_pool2d(h, (1, POOL1), (1, POOL1))?;
        record(tape, "pool1", h);
        let h = tape.dropout(h, s.dropout_p, training, rng)?;

        let dk = bound.var(params, "separable.depthwise")?;
        let pk = bound.var(params, "separable.pointwise")?;
        let h = tape.separable_conv2d(h, dk, pk)?;
        record(tape, "separable_conv", h);
        let h = self.norm(tape, params, bound, "norm3", h, training)?;
        let h = tape.elu(h, ELU_ALPHA)?;
        let h = tape.avg_pool2d(h, (1, POOL2), (1, POOL2))?;
        record(tape, "pool2", h);
        let h = tape.dropout(h, s.dropout_p, training, rng)?;
        let h = tape.flatten(h)?;
        record(tape, "flatten", h);

        let w = bound.var(params, "dense.weight")?;
        let b = bound.var(params, "dense.bias")?;
        let logits = tape.dense(h, w, b)?;
        record(tape, "logits", logits);
        Ok(Forward { logits, trace })
    }

    /// Logits `[B, n_classes]` for `batch`.
    pub fn forward_logits<R: Rng + ?Sized>(
        &self,
        params: &mut ParamSet,
        batch: &Tensor,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = tape.bind_params(params);
        let x = tape.leaf(batch.clone(), false);
        let out = self.forward(&mut tape, params, &bound, x, training, rng)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Eval-mode logits; never touches `params`.
    pub fn predict(&self, params: &ParamSet, batch: &Tensor) -> Result<Tensor> {
        let mut scratch = params.clone();
        // eval mode draws nothing from the rng
        self.forward_logits(&mut scratch, batch, false, &mut crate::rng::stream(0))
    }

    /// Mean cross-entropy over `batch`; gradients are added into `params`.
    pub fn accumulate_gradients<R: Rng + ?Sized>(
        &self,
        params: &mut ParamSet,
        batch: &LabeledBatch,
        training: bool,
        rng: &mut R,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = tape.bind_params(params);
        let x = tape.leaf(batch.inputs.clone(), false);
        let out = self.forward(&mut tape, params, &bound, x, training, rng)?;
        let loss = tape.softmax_cross_entropy(out.logits, &batch.labels)?;
        let grads = tape.backward(loss)?;
        bound.accumulate_into(params, &grads)?;
        tape.value(loss).item()
    }
}
