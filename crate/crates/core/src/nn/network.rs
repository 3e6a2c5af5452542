//! Network assembly: a feedforward or stacked-LSTM body followed by a dense
//! output head, with batched forward and exact backward passes.
//!
//! Batches are time-major: row `t * batch + b` holds step `t` of sequence `b`.
//! The LSTM head reads the concatenation of every layer's hidden vector; the
//! feedforward head reads the last hidden layer.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{lstm_step, sigmoid, tanh, Activation, FeedforwardLayerParams, LstmLayerParams, LstmState};
use super::linalg::{gemm, View, ViewMut};
use crate::error::{Error, Result};
use crate::mdn::DensityForm;
use crate::tensor::{init_uniform, Tensor};

pub const DEFAULT_UNROLL: usize = 50;
pub const DEFAULT_KERNELS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Body {
    Feedforward { layers: usize, width: usize },
    Lstm { layers: usize, width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Head {
    Mse,
    Mdn { kernels: usize, density: DensityForm },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub body: Body,
    pub head: Head,
    pub input_dim: usize,
    pub output_dim: usize,
    pub unroll: usize,
}

impl NetworkSpec {
    /// Width of the raw head output: `c` for MSE, `(c + 2) m` for MDN.
    pub fn raw_output_dim(&self) -> usize {
        match self.head {
            Head::Mse => self.output_dim,
            Head::Mdn { kernels, .. } => (self.output_dim + 2) * kernels,
        }
    }

    /// Width of the feature vector the head is connected to.
    pub fn feature_dim(&self) -> usize {
        match self.body {
            Body::Feedforward { width, .. } => width,
            Body::Lstm { layers, width } => layers * width,
        }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self.body, Body::Lstm { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let (layers, width) = match self.body {
            Body::Feedforward { layers, width } | Body::Lstm { layers, width } => (layers, width),
        };
        if layers == 0 || width == 0 || self.input_dim == 0 || self.output_dim == 0 || self.unroll == 0 {
            return Err(Error::Invalid(format!("degenerate network spec {self:?}")));
        }
        if let Head::Mdn { kernels: 0, .. } = self.head {
            return Err(Error::Invalid("mixture head needs at least one kernel".into()));
        }
        Ok(())
    }
}

/// The four controller structures compared in the architecture study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    #[serde(rename = "ff-mse")]
    FeedforwardMse,
    #[serde(rename = "lstm-mse")]
    LstmMse,
    #[serde(rename = "ff-mdn")]
    FeedforwardMdn,
    #[serde(rename = "lstm-mdn")]
    LstmMdn,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::FeedforwardMse,
        Architecture::LstmMse,
        Architecture::FeedforwardMdn,
        Architecture::LstmMdn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::FeedforwardMse => "ff-mse",
            Architecture::LstmMse => "lstm-mse",
            Architecture::FeedforwardMdn => "ff-mdn",
            Architecture::LstmMdn => "lstm-mdn",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Architecture::FeedforwardMse => "Feedforward-MSE",
            Architecture::LstmMse => "LSTM-MSE",
            Architecture::FeedforwardMdn => "Feedforward-MDN",
            Architecture::LstmMdn => "LSTM-MDN",
        }
    }

    /// 3x100 feedforward or 3x50 LSTM, MSE or a 20-kernel mixture head.
    pub fn spec(self, input_dim: usize, output_dim: usize) -> NetworkSpec {
        let ff = Body::Feedforward { layers: 3, width: 100 };
        let lstm = Body::Lstm { layers: 3, width: 50 };
        let mdn = Head::Mdn {
            kernels: DEFAULT_KERNELS,
            density: DensityForm::Normalized,
        };
        let (body, head) = match self {
            Architecture::FeedforwardMse => (ff, Head::Mse),
            Architecture::LstmMse => (lstm, Head::Mse),
            Architecture::FeedforwardMdn => (ff, mdn),
            Architecture::LstmMdn => (lstm, mdn),
        };
        NetworkSpec {
            body,
            head,
            input_dim,
            output_dim,
            unroll: DEFAULT_UNROLL,
        }
    }

    /// The architecture whose standard spec is exactly `spec`, if any.
    pub fn of_spec(spec: &NetworkSpec) -> Option<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.spec(spec.input_dim, spec.output_dim) == *spec)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown architecture '{s}' (expected ff-mse, lstm-mse, ff-mdn or lstm-mdn)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BodyParams {
    Feedforward(Vec<FeedforwardLayerParams>),
    Lstm(Vec<LstmLayerParams>),
}

/// Every learned tensor of a network. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub body: BodyParams,
    pub head: FeedforwardLayerParams,
}

impl Parameters {
    /// Tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match &self.body {
            BodyParams::Feedforward(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    out.push((format!("ff.{i}.weights"), &l.weights));
                    out.push((format!("ff.{i}.biases"), &l.biases));
                }
            }
            BodyParams::Lstm(layers) => {
                for (i, l) in layers.iter().enumerate() {
                    out.push((format!("lstm.{i}.input_weights"), &l.input_weights));
                    out.push((format!("lstm.{i}.recurrent_weights"), &l.recurrent_weights));
                    out.push((format!("lstm.{i}.biases"), &l.biases));
                }
            }
        }
        out.push(("head.weights".to_string(), &self.head.weights));
        out.push(("head.biases".to_string(), &self.head.biases));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Same order as [`Parameters::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        match &mut self.body {
            BodyParams::Feedforward(layers) => {
                for l in layers.iter_mut() {
                    out.push(&mut l.weights);
                    out.push(&mut l.biases);
                }
            }
            BodyParams::Lstm(layers) => {
                for l in layers.iter_mut() {
                    out.push(&mut l.input_weights);
                    out.push(&mut l.recurrent_weights);
                    out.push(&mut l.biases);
                }
            }
        }
        out.push(&mut self.head.weights);
        out.push(&mut self.head.biases);
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    pub fn add_assign(&mut self, other: &Parameters) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
    }

    /// Rounds every value through IEEE single precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Time-major batch of input sequences. Sequences are ordered by
/// non-increasing length and step `t` stores rows only for the `active[t]`
/// sequences still running, so no work is spent on padding.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub steps: usize,
    pub batch: usize,
    pub input_dim: usize,
    /// Running sequences per step; non-increasing, starts at `batch`.
    pub active: Vec<usize>,
    /// `sum(active) * input_dim` values.
    pub inputs: Vec<f64>,
}

impl SequenceBatch {
    /// `batch` sequences of equal length `steps`.
    pub fn dense(steps: usize, batch: usize, input_dim: usize, inputs: Vec<f64>) -> Self {
        Self {
            steps,
            batch,
            input_dim,
            active: vec![batch; steps],
            inputs,
        }
    }

    pub fn from_sequence(inputs: &[Vec<f64>]) -> Result<Self> {
        let input_dim = inputs.first().map(|v| v.len()).unwrap_or(0);
        if inputs.iter().any(|v| v.len() != input_dim) {
            return Err(Error::Invalid("ragged input sequence".into()));
        }
        Ok(Self::dense(inputs.len(), 1, input_dim, inputs.iter().flatten().copied().collect()))
    }

    pub fn rows(&self) -> usize {
        self.active.iter().sum()
    }

    fn check(&self) -> Result<()> {
        let ordered = self.active.windows(2).all(|w| w[1] <= w[0]);
        if self.active.len() != self.steps
            || !ordered
            || self.active.first() != Some(&self.batch)
            || self.active.last() == Some(&0)
        {
            return Err(Error::Shape("active counts must be non-increasing from the batch size".into()));
        }
        if self.inputs.len() != self.rows() * self.input_dim {
            return Err(Error::Shape("batch input length does not match its dimensions".into()));
        }
        Ok(())
    }
}

/// First row of each step in a packed layout.
fn offsets(active: &[usize]) -> Vec<usize> {
    let mut off = Vec::with_capacity(active.len());
    let mut acc = 0;
    for &n in active {
        off.push(acc);
        acc += n;
    }
    off
}

#[derive(Debug, Clone)]
enum LayerCache {
    Feedforward {
        out: Vec<f64>,
    },
    Lstm {
        /// Activated gates, `rows x 4H`, ordered `[i | f | o | g]`.
        gates: Vec<f64>,
        cell: Vec<f64>,
        cell_tanh: Vec<f64>,
        hidden: Vec<f64>,
    },
}

/// Activations retained by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    spec: NetworkSpec,
    pub steps: usize,
    pub batch: usize,
    pub active: Vec<usize>,
    input: Vec<f64>,
    layers: Vec<LayerCache>,
    /// Raw head outputs in the packed row layout of the input batch.
    pub outputs: Vec<f64>,
}

impl ForwardCache {
    /// Output of `sequence` at `step`; panics if that sequence had ended.
    pub fn output(&self, step: usize, sequence: usize) -> &[f64] {
        assert!(sequence < self.active[step], "sequence {sequence} ended before step {step}");
        let d = self.spec.raw_output_dim();
        let row = offsets(&self.active)[step] + sequence;
        &self.outputs[row * d..(row + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Parameters,
}

impl Network {
    /// Builds a network with every parameter drawn from U[-0.08, 0.08].
    pub fn new<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let body = match spec.body {
            Body::Feedforward { layers, width } => {
                let mut v = Vec::with_capacity(layers);
                for i in 0..layers {
                    let n_in = if i == 0 { spec.input_dim } else { width };
                    v.push(FeedforwardLayerParams::new(
                        init_uniform(&[width, n_in], rng)?,
                        init_uniform(&[width], rng)?,
                        Activation::Tanh,
                    )?);
                }
                BodyParams::Feedforward(v)
            }
            Body::Lstm { layers, width } => {
                let mut v = Vec::with_capacity(layers);
                for i in 0..layers {
                    let n_in = if i == 0 { spec.input_dim } else { width };
                    v.push(LstmLayerParams::new(
                        init_uniform(&[4 * width, n_in], rng)?,
                        init_uniform(&[4 * width, width], rng)?,
                        init_uniform(&[4 * width], rng)?,
                    )?);
                }
                BodyParams::Lstm(v)
            }
        };
        let head = FeedforwardLayerParams::new(
            init_uniform(&[spec.raw_output_dim(), spec.feature_dim()], rng)?,
            init_uniform(&[spec.raw_output_dim()], rng)?,
            Activation::Identity,
        )?;
        Ok(Self {
            spec,
            params: Parameters { body, head },
        })
    }

    /// Assembles a network from existing tensors, checking every shape.
    pub fn from_parts(spec: NetworkSpec, params: Parameters) -> Result<Self> {
        spec.validate()?;
        match (&spec.body, &params.body) {
            (Body::Feedforward { layers, width }, BodyParams::Feedforward(ls)) => {
                if ls.len() != *layers {
                    return Err(Error::Shape(format!("expected {layers} feedforward layers, got {}", ls.len())));
                }
                for (i, l) in ls.iter().enumerate() {
                    let n_in = if i == 0 { spec.input_dim } else { *width };
                    if l.weights.shape() != [*width, n_in] {
                        return Err(Error::LayerDim {
                            layer: i,
                            expected: n_in,
                            got: l.inputs(),
                        });
                    }
                }
            }
            (Body::Lstm { layers, width }, BodyParams::Lstm(ls)) => {
                if ls.len() != *layers {
                    return Err(Error::Shape(format!("expected {layers} LSTM layers, got {}", ls.len())));
                }
                for (i, l) in ls.iter().enumerate() {
                    let n_in = if i == 0 { spec.input_dim } else { *width };
                    if l.width != *width || l.inputs() != n_in {
                        return Err(Error::LayerDim {
                            layer: i,
                            expected: n_in,
                            got: l.inputs(),
                        });
                    }
                }
            }
            _ => return Err(Error::Invalid("parameter body does not match the spec".into())),
        }
        if params.head.weights.shape() != [spec.raw_output_dim(), spec.feature_dim()] {
            return Err(Error::Shape(format!(
                "head weights {:?}, expected [{}, {}]",
                params.head.weights.shape(),
                spec.raw_output_dim(),
                spec.feature_dim()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Parameters {
        &mut self.params
    }

    pub fn into_params(self) -> Parameters {
        self.params
    }

    pub fn initial_state(&self) -> LstmState {
        match &self.params.body {
            BodyParams::Lstm(layers) => LstmState::zeros(layers),
            BodyParams::Feedforward(_) => LstmState::empty(),
        }
    }

    /// Single inference step; the feedforward body ignores `state`.
    pub fn step(&self, x: &[f64], state: &mut LstmState) -> Result<Vec<f64>> {
        if x.len() != self.spec.input_dim {
            return Err(Error::LayerDim {
                layer: 0,
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        let features = match &self.params.body {
            BodyParams::Lstm(layers) => {
                let (features, next) = lstm_step(x, state, layers)?;
                *state = next;
                features
            }
            BodyParams::Feedforward(layers) => {
                let mut h = x.to_vec();
                for l in layers {
                    h = l.forward(&h);
                }
                h
            }
        };
        Ok(self.params.head.forward(&features))
    }

    /// Runs one sequence from a zero state; rejects sequences longer than the
    /// unroll limit.
    pub fn forward_sequence(&self, inputs: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
        let batch = SequenceBatch::from_sequence(inputs)?;
        let cache = self.forward_batch(&batch)?;
        let d = self.spec.raw_output_dim();
        let outputs = cache.outputs.chunks(d).map(|c| c.to_vec()).collect();
        Ok((outputs, cache))
    }

    /// Backward pass for a single-sequence cache; `grads[t]` is dLoss/dOutput at step `t`.
    pub fn backward_sequence(&self, cache: &ForwardCache, grads: &[Vec<f64>]) -> Result<Parameters> {
        if cache.batch != 1 || grads.len() != cache.steps {
            return Err(Error::Invalid(format!(
                "{} gradient rows for a cache of {} steps x {} sequences",
                grads.len(),
                cache.steps,
                cache.batch
            )));
        }
        let flat: Vec<f64> = grads.iter().flatten().copied().collect();
        self.backward_batch(cache, &flat)
    }

    pub fn forward_batch(&self, batch: &SequenceBatch) -> Result<ForwardCache> {
        let spec = &self.spec;
        if batch.steps == 0 || batch.batch == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        if batch.steps > spec.unroll {
            return Err(Error::SequenceTooLong {
                len: batch.steps,
                limit: spec.unroll,
            });
        }
        if batch.input_dim != spec.input_dim {
            return Err(Error::LayerDim {
                layer: 0,
                expected: spec.input_dim,
                got: batch.input_dim,
            });
        }
        batch.check()?;
        let rows = batch.rows();
        let mut caches = Vec::new();
        match &self.params.body {
            BodyParams::Feedforward(layers) => {
                for l in layers.iter() {
                    let x: &[f64] = match caches.last() {
                        Some(LayerCache::Feedforward { out }) => out,
                        _ => &batch.inputs,
                    };
                    let out = dense_forward(l, x, rows);
                    caches.push(LayerCache::Feedforward { out });
                }
            }
            BodyParams::Lstm(layers) => {
                for l in layers.iter() {
                    let x: &[f64] = match caches.last() {
                        Some(LayerCache::Lstm { hidden, .. }) => hidden,
                        _ => &batch.inputs,
                    };
                    caches.push(lstm_layer_forward(l, x, &batch.active));
                }
            }
        }

        let head = &self.params.head;
        let out_dim = spec.raw_output_dim();
        let feat = spec.feature_dim();
        let mut outputs = vec![0.0; rows * out_dim];
        for r in 0..rows {
            outputs[r * out_dim..(r + 1) * out_dim].copy_from_slice(head.biases.data());
        }
        match (&self.params.body, caches.last()) {
            (BodyParams::Lstm(layers), _) => {
                for (li, c) in caches.iter().enumerate() {
                    let LayerCache::Lstm { hidden, .. } = c else { unreachable!() };
                    let h = layers[li].width;
                    gemm(
                        View::row_major(hidden, rows, h),
                        View::column_block(head.weights.data(), out_dim, feat, li * h, h).t(),
                        1.0,
                        ViewMut::row_major(&mut outputs, rows, out_dim),
                    );
                }
            }
            (BodyParams::Feedforward(_), Some(LayerCache::Feedforward { out })) => {
                gemm(
                    View::row_major(out, rows, feat),
                    View::row_major(head.weights.data(), out_dim, feat).t(),
                    1.0,
                    ViewMut::row_major(&mut outputs, rows, out_dim),
                );
            }
            _ => unreachable!("feedforward body has at least one layer"),
        }
        if outputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network output".into()));
        }
        Ok(ForwardCache {
            spec: *spec,
            steps: batch.steps,
            batch: batch.batch,
            active: batch.active.clone(),
            input: batch.inputs.clone(),
            layers: caches,
            outputs,
        })
    }

    /// Exact gradients of a loss whose output gradient is `d_outputs`
    /// (same layout as `cache.outputs`) with respect to every parameter.
    pub fn backward_batch(&self, cache: &ForwardCache, d_outputs: &[f64]) -> Result<Parameters> {
        let spec = &self.spec;
        if cache.spec != *spec || cache.layers.is_empty() {
            return Err(Error::Invalid("forward cache was not produced by this network".into()));
        }
        let rows: usize = cache.active.iter().sum();
        let out_dim = spec.raw_output_dim();
        let feat = spec.feature_dim();
        if d_outputs.len() != rows * out_dim {
            return Err(Error::Shape(format!(
                "output gradient has {} values, expected {}",
                d_outputs.len(),
                rows * out_dim
            )));
        }
        let mut grads = self.params.zeros_like();
        let head = &self.params.head;

        // head
        {
            let gb = grads.head.biases.data_mut();
            for r in 0..rows {
                for (g, d) in gb.iter_mut().zip(&d_outputs[r * out_dim..(r + 1) * out_dim]) {
                    *g += d;
                }
            }
        }

        match (&self.params.body, &mut grads.body) {
            (BodyParams::Lstm(layers), BodyParams::Lstm(glayers)) => {
                // head gradient into each layer's hidden sequence
                let mut d_hidden: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
                for (li, (l, c)) in layers.iter().zip(&cache.layers).enumerate() {
                    let LayerCache::Lstm { hidden, .. } = c else { unreachable!() };
                    let h = l.width;
                    gemm(
                        View::row_major(d_outputs, rows, out_dim).t(),
                        View::row_major(hidden, rows, h),
                        0.0,
                        ViewMut::column_block(grads.head.weights.data_mut(), out_dim, feat, li * h, h),
                    );
                    let mut dh = vec![0.0; rows * h];
                    gemm(
                        View::row_major(d_outputs, rows, out_dim),
                        View::column_block(head.weights.data(), out_dim, feat, li * h, h),
                        0.0,
                        ViewMut::row_major(&mut dh, rows, h),
                    );
                    d_hidden.push(dh);
                }
                for li in (0..layers.len()).rev() {
                    let input: &[f64] = if li == 0 {
                        &cache.input
                    } else {
                        let LayerCache::Lstm { hidden, .. } = &cache.layers[li - 1] else { unreachable!() };
                        hidden
                    };
                    let d_input = lstm_layer_backward(
                        &layers[li],
                        &cache.layers[li],
                        input,
                        &d_hidden[li],
                        &cache.active,
                        &mut glayers[li],
                    );
                    if li > 0 {
                        d_hidden[li - 1].iter_mut().zip(&d_input).for_each(|(a, b)| *a += b);
                    }
                }
            }
            (BodyParams::Feedforward(layers), BodyParams::Feedforward(glayers)) => {
                let Some(LayerCache::Feedforward { out: last }) = cache.layers.last() else { unreachable!() };
                gemm(
                    View::row_major(d_outputs, rows, out_dim).t(),
                    View::row_major(last, rows, feat),
                    0.0,
                    ViewMut::row_major(grads.head.weights.data_mut(), out_dim, feat),
                );
                let mut d_out = vec![0.0; rows * feat];
                gemm(
                    View::row_major(d_outputs, rows, out_dim),
                    View::row_major(head.weights.data(), out_dim, feat),
                    0.0,
                    ViewMut::row_major(&mut d_out, rows, feat),
                );
                for li in (0..layers.len()).rev() {
                    let LayerCache::Feedforward { out } = &cache.layers[li] else { unreachable!() };
                    let input: &[f64] = if li == 0 {
                        &cache.input
                    } else {
                        let LayerCache::Feedforward { out } = &cache.layers[li - 1] else { unreachable!() };
                        out
                    };
                    d_out = dense_backward(&layers[li], input, out, d_out, rows, &mut glayers[li], li > 0);
                }
            }
            _ => unreachable!("gradient layout mirrors the parameters"),
        }
        Ok(grads)
    }
}

fn dense_forward(l: &FeedforwardLayerParams, x: &[f64], rows: usize) -> Vec<f64> {
    let (n_out, n_in) = (l.outputs(), l.inputs());
    let mut out = vec![0.0; rows * n_out];
    for r in 0..rows {
        out[r * n_out..(r + 1) * n_out].copy_from_slice(l.biases.data());
    }
    gemm(
        View::row_major(x, rows, n_in),
        View::row_major(l.weights.data(), n_out, n_in).t(),
        1.0,
        ViewMut::row_major(&mut out, rows, n_out),
    );
    out.iter_mut().for_each(|v| *v = l.activation.apply(*v));
    out
}

/// Returns the gradient with respect to the layer input when `need_input`.
fn dense_backward(
    l: &FeedforwardLayerParams,
    input: &[f64],
    out: &[f64],
    mut d_out: Vec<f64>,
    rows: usize,
    grad: &mut FeedforwardLayerParams,
    need_input: bool,
) -> Vec<f64> {
    let (n_out, n_in) = (l.outputs(), l.inputs());
    for (d, y) in d_out.iter_mut().zip(out) {
        *d *= l.activation.derivative_from_output(*y);
    }
    gemm(
        View::row_major(&d_out, rows, n_out).t(),
        View::row_major(input, rows, n_in),
        0.0,
        ViewMut::row_major(grad.weights.data_mut(), n_out, n_in),
    );
    let gb = grad.biases.data_mut();
    for r in 0..rows {
        for (g, d) in gb.iter_mut().zip(&d_out[r * n_out..(r + 1) * n_out]) {
            *g += d;
        }
    }
    if !need_input {
        return Vec::new();
    }
    let mut d_in = vec![0.0; rows * n_in];
    gemm(
        View::row_major(&d_out, rows, n_out),
        View::row_major(l.weights.data(), n_out, n_in),
        0.0,
        ViewMut::row_major(&mut d_in, rows, n_in),
    );
    d_in
}

fn lstm_layer_forward(l: &LstmLayerParams, x: &[f64], active: &[usize]) -> LayerCache {
    let h = l.width;
    let g4 = 4 * h;
    let n_in = l.inputs();
    let off = offsets(active);
    let rows: usize = active.iter().sum();
    let mut gates = vec![0.0; rows * g4];
    for r in 0..rows {
        gates[r * g4..(r + 1) * g4].copy_from_slice(l.biases.data());
    }
    gemm(
        View::row_major(x, rows, n_in),
        View::row_major(l.input_weights.data(), g4, n_in).t(),
        1.0,
        ViewMut::row_major(&mut gates, rows, g4),
    );
    let mut cell = vec![0.0; rows * h];
    let mut cell_tanh = vec![0.0; rows * h];
    let mut hidden = vec![0.0; rows * h];
    for (t, &n) in active.iter().enumerate() {
        let (done_h, cur_h) = hidden.split_at_mut(off[t] * h);
        let block = &mut gates[off[t] * g4..(off[t] + n) * g4];
        if t > 0 {
            gemm(
                View::row_major(&done_h[off[t - 1] * h..], n, h),
                View::row_major(l.recurrent_weights.data(), g4, h).t(),
                1.0,
                ViewMut::row_major(block, n, g4),
            );
        }
        let (done_c, cur_c) = cell.split_at_mut(off[t] * h);
        let cur_tc = &mut cell_tanh[off[t] * h..];
        for b in 0..n {
            let z = &mut block[b * g4..(b + 1) * g4];
            for j in 0..h {
                let i_g = sigmoid(z[j]);
                let f_g = sigmoid(z[h + j]);
                let o_g = sigmoid(z[2 * h + j]);
                let g = tanh(z[3 * h + j]);
                z[j] = i_g;
                z[h + j] = f_g;
                z[2 * h + j] = o_g;
                z[3 * h + j] = g;
                let c_prev = if t > 0 { done_c[off[t - 1] * h + b * h + j] } else { 0.0 };
                let c = f_g * c_prev + i_g * g;
                let tc = tanh(c);
                cur_c[b * h + j] = c;
                cur_tc[b * h + j] = tc;
                cur_h[b * h + j] = o_g * tc;
            }
        }
    }
    LayerCache::Lstm {
        gates,
        cell,
        cell_tanh,
        hidden,
    }
}

/// BPTT through one layer. Accumulates parameter gradients into `grad` and
/// returns dLoss/dInput for every row.
fn lstm_layer_backward(
    l: &LstmLayerParams,
    cache: &LayerCache,
    input: &[f64],
    d_hidden: &[f64],
    active: &[usize],
    grad: &mut LstmLayerParams,
) -> Vec<f64> {
    let LayerCache::Lstm {
        gates,
        cell,
        cell_tanh,
        hidden,
    } = cache
    else {
        unreachable!()
    };
    let h = l.width;
    let g4 = 4 * h;
    let n_in = l.inputs();
    let off = offsets(active);
    let steps = active.len();
    let batch = active[0];
    let rows: usize = active.iter().sum();
    let mut dz = vec![0.0; rows * g4];
    // rows of sequences that end before t + 1 keep a zero carry
    let mut dc_next = vec![0.0; batch * h];
    let mut dh = vec![0.0; batch * h];
    for t in (0..steps).rev() {
        let n = active[t];
        let dh = &mut dh[..n * h];
        dh.copy_from_slice(&d_hidden[off[t] * h..(off[t] + n) * h]);
        let (cur, later) = dz.split_at_mut(off[t] * g4 + n * g4);
        if t + 1 < steps {
            let m = active[t + 1];
            gemm(
                View::row_major(&later[..m * g4], m, g4),
                View::row_major(l.recurrent_weights.data(), g4, h),
                1.0,
                ViewMut::row_major(&mut dh[..m * h], m, h),
            );
        }
        let dz_t = &mut cur[off[t] * g4..];
        for b in 0..n {
            let r = off[t] + b;
            let gt = &gates[r * g4..(r + 1) * g4];
            let dzb = &mut dz_t[b * g4..(b + 1) * g4];
            for j in 0..h {
                let idx = r * h + j;
                let (i_g, f_g, o_g, g) = (gt[j], gt[h + j], gt[2 * h + j], gt[3 * h + j]);
                let tc = cell_tanh[idx];
                let c_prev = if t > 0 { cell[off[t - 1] * h + b * h + j] } else { 0.0 };
                let dhj = dh[b * h + j];
                let dc = dhj * o_g * (1.0 - tc * tc) + dc_next[b * h + j];
                dzb[j] = dc * g * i_g * (1.0 - i_g);
                dzb[h + j] = dc * c_prev * f_g * (1.0 - f_g);
                dzb[2 * h + j] = dhj * tc * o_g * (1.0 - o_g);
                dzb[3 * h + j] = dc * i_g * (1.0 - g * g);
                dc_next[b * h + j] = dc * f_g;
            }
        }
    }
    gemm(
        View::row_major(&dz, rows, g4).t(),
        View::row_major(input, rows, n_in),
        0.0,
        ViewMut::row_major(grad.input_weights.data_mut(), g4, n_in),
    );
    if steps > 1 {
        // previous hidden state of every row after the first step
        let r1 = rows - batch;
        let mut prev = Vec::with_capacity(r1 * h);
        for t in 1..steps {
            prev.extend_from_slice(&hidden[off[t - 1] * h..(off[t - 1] + active[t]) * h]);
        }
        gemm(
            View::row_major(&dz[batch * g4..], r1, g4).t(),
            View::row_major(&prev, r1, h),
            0.0,
            ViewMut::row_major(grad.recurrent_weights.data_mut(), g4, h),
        );
    }
    let gb = grad.biases.data_mut();
    for r in 0..rows {
        for (g, d) in gb.iter_mut().zip(&dz[r * g4..(r + 1) * g4]) {
            *g += d;
        }
    }
    let mut d_in = vec![0.0; rows * n_in];
    gemm(
        View::row_major(&dz, rows, g4),
        View::row_major(l.input_weights.data(), g4, n_in),
        0.0,
        ViewMut::row_major(&mut d_in, rows, n_in),
    );
    d_in
}
