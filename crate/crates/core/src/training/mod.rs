//! Minibatch BPTT training with windowing, masking and early stopping.

mod checkpoint;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::demos::{Dataset, Demonstration, NormStats};
use crate::error::{Error, Result};
use crate::mdn::{nll_loss, split_activations_with};
use crate::nn::{
    clip_gradients, Architecture, decay_for_waypoints, mse_loss, Head, Network, NetworkSpec, OptimizerState, Parameters,
    SequenceBatch, DEFAULT_CLIP, DEFAULT_LEARNING_RATE,
};
use crate::sim::{TaskKind, GRIPPER_DIM, OBS_DIM};
use crate::wire::to_line;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

const EVAL_BATCH: usize = 64;

/// Sized so all four architectures train on both 600-demo corpora within an
/// hour on one desktop core; patience usually never triggers before it.
pub const DEFAULT_MAX_EPOCHS: usize = 30;

pub const DEFAULT_EPOCH_DECAY: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub minibatch: usize,
    pub learning_rate: f64,
    /// Factor applied to the learning rate after every epoch.
    pub epoch_decay: f64,
    /// RMSProp decay; picked from the training-set size when absent.
    pub decay: Option<f64>,
    pub clip: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Relative validation improvement that resets the patience counter.
    pub min_improvement: f64,
    pub seed: u64,
    pub include_failures: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            minibatch: 10,
            learning_rate: DEFAULT_LEARNING_RATE,
            epoch_decay: DEFAULT_EPOCH_DECAY,
            decay: None,
            clip: DEFAULT_CLIP,
            patience: 20,
            max_epochs: DEFAULT_MAX_EPOCHS,
            min_improvement: 1e-5,
            seed: 0,
            include_failures: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch == 0 || self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Invalid("minibatch, patience and max_epochs must be positive".into()));
        }
        if !(self.epoch_decay > 0.0 && self.epoch_decay <= 1.0) {
            return Err(Error::Invalid(format!("epoch_decay {} must lie in (0, 1]", self.epoch_decay)));
        }
        if !(self.learning_rate > 0.0) || !(self.clip > 0.0) || !(self.min_improvement >= 0.0) {
            return Err(Error::Invalid("learning_rate and clip must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 over the configuration and network spec.
    pub fn digest(&self, spec: &NetworkSpec) -> Result<String> {
        let line = to_line(&(self, spec))?;
        Ok(hex::encode(Sha256::digest(line.as_bytes())))
    }
}

/// A training sequence of at most `unroll` supervised steps. For
/// demonstrations, step `t` maps the normalized observation at waypoint `t`
/// to the normalized gripper vector at waypoint `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub len: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub raw_id: u64,
}

impl Window {
    /// Row-major `len x input_dim` inputs and `len x output_dim` targets.
    pub fn new(inputs: Vec<f64>, targets: Vec<f64>, input_dim: usize, output_dim: usize, raw_id: u64) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || inputs.is_empty() || inputs.len() % input_dim != 0 {
            return Err(Error::Shape(format!("{} inputs do not form rows of {input_dim}", inputs.len())));
        }
        let len = inputs.len() / input_dim;
        if targets.len() != len * output_dim {
            return Err(Error::Shape(format!("{len} steps need {} targets, got {}", len * output_dim, targets.len())));
        }
        Ok(Self {
            inputs,
            targets,
            len,
            input_dim,
            output_dim,
            raw_id,
        })
    }

    pub fn input(&self, t: usize) -> &[f64] {
        &self.inputs[t * self.input_dim..(t + 1) * self.input_dim]
    }

    pub fn target(&self, t: usize) -> &[f64] {
        &self.targets[t * self.output_dim..(t + 1) * self.output_dim]
    }

    /// Validity of each of `unroll` padded positions.
    pub fn mask(&self, unroll: usize) -> Vec<bool> {
        (0..unroll).map(|t| t < self.len).collect()
    }
}

/// Cuts every demonstration into windows; each window starts from a fresh
/// recurrent state.
pub fn make_windows<'a>(demos: impl IntoIterator<Item = &'a Demonstration>, stats: &NormStats, unroll: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for d in demos {
        let steps = d.len().saturating_sub(1);
        let mut start = 0;
        while start < steps {
            let len = unroll.min(steps - start);
            let mut inputs = Vec::with_capacity(len * OBS_DIM);
            let mut targets = Vec::with_capacity(len * GRIPPER_DIM);
            for t in start..start + len {
                inputs.extend(stats.normalize(&d.waypoints[t].input()));
                targets.extend(stats.normalize_tail(&d.waypoints[t + 1].gripper));
            }
            out.push(Window {
                inputs,
                targets,
                len,
                input_dim: OBS_DIM,
                output_dim: GRIPPER_DIM,
                raw_id: d.raw_id,
            });
            start += len;
        }
    }
    out
}

/// `count` one-dimensional sequences of 5 to 15 steps with inputs uniform in
/// [-1, 1) and targets drawn from {-1, +1} independently of the inputs, so
/// every observation has two equally good answers. The best squared-error
/// fit is 0, a value no target ever takes.
pub fn bimodal_windows(count: usize, seed: u64) -> Vec<Window> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let len = rng.gen_range(5..=15);
            let inputs = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let targets = (0..len).map(|_| if rng.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
            Window {
                inputs,
                targets,
                len,
                input_dim: 1,
                output_dim: 1,
                raw_id: i as u64,
            }
        })
        .collect()
}

/// Per-step head loss and its gradient with respect to the raw outputs.
pub fn head_loss(spec: &NetworkSpec, raw: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    match spec.head {
        Head::Mse => mse_loss(raw, target),
        Head::Mdn { kernels, density } => {
            let mix = split_activations_with(raw, kernels, spec.output_dim, density)?;
            nll_loss(&mix, target)
        }
    }
}

struct Batch {
    inputs: SequenceBatch,
    targets: Vec<f64>,
}

/// Packs windows longest first so each step only holds running sequences.
fn assemble(windows: &[&Window]) -> Batch {
    let mut order: Vec<&Window> = windows.to_vec();
    order.sort_by(|a, b| b.len.cmp(&a.len));
    let steps = order.first().map(|w| w.len).unwrap_or(0);
    let (input_dim, output_dim) = order.first().map(|w| (w.input_dim, w.output_dim)).unwrap_or((0, 0));
    let active: Vec<usize> = (0..steps).map(|t| order.iter().filter(|w| w.len > t).count()).collect();
    let rows: usize = active.iter().sum();
    let mut inputs = Vec::with_capacity(rows * input_dim);
    let mut targets = Vec::with_capacity(rows * output_dim);
    for (t, &n) in active.iter().enumerate() {
        for w in &order[..n] {
            inputs.extend_from_slice(w.input(t));
            targets.extend_from_slice(w.target(t));
        }
    }
    Batch {
        inputs: SequenceBatch {
            steps,
            batch: order.len(),
            input_dim,
            active,
            inputs,
        },
        targets,
    }
}

/// Summed head loss, number of supervised steps and, on request, the gradient
/// of the mean loss with respect to the parameters.
fn batch_loss(net: &Network, batch: &Batch, want_grad: bool) -> Result<(f64, usize, Option<Parameters>)> {
    let spec = net.spec();
    let cache = net.forward_batch(&batch.inputs)?;
    let d = spec.raw_output_dim();
    let c = spec.output_dim;
    let count = batch.inputs.rows();
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    let mut d_out = if want_grad { vec![0.0; cache.outputs.len()] } else { Vec::new() };
    for row in 0..count {
        let raw = &cache.outputs[row * d..(row + 1) * d];
        let target = &batch.targets[row * c..(row + 1) * c];
        let (loss, grad) = head_loss(spec, raw, target)?;
        total += loss;
        if want_grad {
            for (o, g) in d_out[row * d..(row + 1) * d].iter_mut().zip(grad) {
                *o = g * scale;
            }
        }
    }
    let grads = if want_grad { Some(net.backward_batch(&cache, &d_out)?) } else { None };
    Ok((total, count, grads))
}

pub fn validate_windows(net: &Network, windows: &[Window]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    let refs: Vec<&Window> = windows.iter().collect();
    for chunk in refs.chunks(EVAL_BATCH) {
        let (loss, n, _) = batch_loss(net, &assemble(chunk), false)?;
        total += loss;
        count += n;
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}

/// Validation loss of a checkpoint on the given demonstrations.
pub fn validate<'a>(checkpoint: &Checkpoint, demos: impl IntoIterator<Item = &'a Demonstration>) -> Result<f64> {
    let net = checkpoint.network()?;
    let windows = make_windows(demos, &checkpoint.stats, checkpoint.spec.unroll);
    validate_windows(&net, &windows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    /// Mean training loss of each epoch (index 0 is epoch 1).
    pub train_loss: Vec<f64>,
    /// Validation loss before training followed by one value per epoch.
    pub validation_loss: Vec<f64>,
    pub epochs: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub wall_time_secs: f64,
}

fn rounded(net: &Network) -> Result<Network> {
    let mut p = net.params().clone();
    p.round_to_f32();
    Network::from_parts(*net.spec(), p)
}

pub fn train(dataset: &Dataset, spec: NetworkSpec, cfg: &TrainConfig) -> Result<(Checkpoint, TrainStats)> {
    train_with_progress(dataset, spec, cfg, |_| {})
}

/// Trains on the training split and keeps the parameters with the lowest
/// validation loss. Validation always runs on single-precision-rounded
/// parameters, which are exactly what a saved checkpoint holds.
pub fn train_with_progress(
    dataset: &Dataset,
    spec: NetworkSpec,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochReport),
) -> Result<(Checkpoint, TrainStats)> {
    if spec.input_dim != OBS_DIM || spec.output_dim != GRIPPER_DIM {
        return Err(Error::Invalid(format!(
            "network maps {} -> {}, demonstrations need {OBS_DIM} -> {GRIPPER_DIM}",
            spec.input_dim, spec.output_dim
        )));
    }
    let keep = |d: &&Demonstration| cfg.include_failures || d.outcome == crate::demos::Outcome::Success;
    let train_windows = make_windows(dataset.train_demos().filter(keep), &dataset.stats, spec.unroll);
    let val_windows = make_windows(dataset.validation_demos().filter(keep), &dataset.stats, spec.unroll);
    let decay = cfg.decay.unwrap_or_else(|| decay_for_waypoints(dataset.train_waypoints()));
    let fitted = fit_with_decay(&train_windows, &val_windows, spec, cfg, decay, on_epoch)?;

    let tasks: std::collections::BTreeSet<TaskKind> = dataset.demos.iter().map(|d| d.task).collect();
    let task = if tasks.len() == 1 { tasks.into_iter().next() } else { None };
    let checkpoint = Checkpoint {
        spec,
        params: fitted.network.into_params(),
        stats: dataset.stats.clone(),
        task,
        architecture: Architecture::of_spec(&spec),
        seed: cfg.seed,
        config_digest: cfg.digest(&spec)?,
        validation_loss: fitted.validation_loss,
        epoch: fitted.stats.best_epoch,
    };
    Ok((checkpoint, fitted.stats))
}

/// Best network found by [`fit`], rounded to single precision.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub network: Network,
    pub validation_loss: f64,
    pub stats: TrainStats,
}

/// Training loop over prepared windows of any dimensionality.
pub fn fit(train: &[Window], validation: &[Window], spec: NetworkSpec, cfg: &TrainConfig) -> Result<Fitted> {
    let steps: usize = train.iter().map(|w| w.len).sum();
    let decay = cfg.decay.unwrap_or_else(|| decay_for_waypoints(steps));
    fit_with_decay(train, validation, spec, cfg, decay, |_| {})
}

fn fit_with_decay(
    train_windows: &[Window],
    val_windows: &[Window],
    spec: NetworkSpec,
    cfg: &TrainConfig,
    decay: f64,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Fitted> {
    cfg.validate()?;
    spec.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::Invalid("training needs non-empty training and validation splits".into()));
    }
    for w in train_windows.iter().chain(val_windows) {
        if (w.input_dim, w.output_dim) != (spec.input_dim, spec.output_dim) {
            return Err(Error::Shape(format!(
                "window maps {} -> {}, network {} -> {}",
                w.input_dim, w.output_dim, spec.input_dim, spec.output_dim
            )));
        }
        if w.len > spec.unroll {
            return Err(Error::SequenceTooLong {
                len: w.len,
                limit: spec.unroll,
            });
        }
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::new(spec, &mut rng)?;
    let mut opt = OptimizerState::new(net.params(), cfg.learning_rate, decay)?;

    let mut best = rounded(&net)?;
    let mut best_loss = validate_windows(&best, val_windows)?;
    let mut stats = TrainStats {
        train_loss: Vec::new(),
        validation_loss: vec![best_loss],
        epochs: 0,
        best_epoch: 0,
        stopped_early: false,
        wall_time_secs: 0.0,
    };
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_windows.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        opt.learning_rate = cfg.learning_rate * cfg.epoch_decay.powi(epoch as i32 - 1);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for (b, idx) in order.chunks(cfg.minibatch).enumerate() {
            let refs: Vec<&Window> = idx.iter().map(|&i| &train_windows[i]).collect();
            let diverged = |detail: String| Error::Diverged { epoch, batch: b, detail };
            let (loss, n, grads) = batch_loss(&net, &assemble(&refs), true).map_err(|e| diverged(e.to_string()))?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss {loss}")));
            }
            total += loss;
            count += n;
            if let Some(mut g) = grads {
                clip_gradients(&mut g, cfg.clip);
                opt.rmsprop_update(net.params_mut(), &g).map_err(|e| diverged(e.to_string()))?;
            }
        }
        let train_loss = total / count.max(1) as f64;
        let candidate = rounded(&net)?;
        let val = validate_windows(&candidate, val_windows)?;
        if !val.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: order.len().div_ceil(cfg.minibatch),
                detail: format!("validation loss {val}"),
            });
        }
        stats.train_loss.push(train_loss);
        stats.validation_loss.push(val);
        stats.epochs = epoch;
        if best_loss - val > cfg.min_improvement * best_loss.abs().max(f64::MIN_POSITIVE) {
            best_loss = val;
            best = candidate;
            stats.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        on_epoch(&EpochReport {
            epoch,
            train_loss,
            validation_loss: val,
            best_epoch: stats.best_epoch,
        });
        if since_best >= cfg.patience {
            stats.stopped_early = true;
            break;
        }
    }
    stats.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(Fitted {
        network: best,
        validation_loss: best_loss,
        stats,
    })
}
