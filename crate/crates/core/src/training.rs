//! Joint P50/P90 quantile loss, the AdamW training loop, and checkpoints.

use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{make_batches, Batch, DataError, Dataset};
use crate::model::{init_model, ModelConfig, ModelError, ModelParams};
use crate::numerics::{
    finite_difference_check, stream_rng, AdamW, AdamWConfig, Array, GradCheckReport, Graph,
    NumericsError, ParamStore, Pass, Var,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite gradient for `{param}` at epoch {epoch}, batch {batch}")]
    NonFiniteGradient {
        epoch: usize,
        batch: usize,
        param: String,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Quantile levels of the two output tracks.
pub const QUANTILES: [f64; 2] = [0.5, 0.9];

/// `Σ pinball_0.5(y, p50) + Σ pinball_0.9(y, p90)` over batch and horizon,
/// divided by the batch size.
pub fn quantile_loss(y: &Array, p50: &Array, p90: &Array) -> Result<f64, NumericsError> {
    if y.shape() != p50.shape() || y.shape() != p90.shape() || y.ndim() == 0 {
        return Err(NumericsError::Shape {
            op: "quantile_loss",
            lhs: y.shape().to_vec(),
            rhs: if y.shape() != p50.shape() { p50.shape() } else { p90.shape() }.to_vec(),
        });
    }
    let pin = |level: f64, y: f64, p: f64| level * (y - p).max(0.0) + (1.0 - level) * (p - y).max(0.0);
    let mut total = 0.0;
    for ((&t, &a), &b) in y.data().iter().zip(p50.data()).zip(p90.data()) {
        total += pin(QUANTILES[0], t, a) + pin(QUANTILES[1], t, b);
    }
    Ok(total / y.shape()[0] as f64)
}

/// [`quantile_loss`] as a differentiable graph node.
pub fn quantile_loss_on(g: &mut Graph, y: &Array, p50: Var, p90: Var) -> Result<Var, NumericsError> {
    let b = y.shape().first().copied().unwrap_or(0);
    if b == 0 {
        return Err(NumericsError::InvalidArgument("quantile loss over an empty batch".into()));
    }
    let a = g.pinball(p50, y, QUANTILES[0])?;
    let a = g.sum(a)?;
    let c = g.pinball(p90, y, QUANTILES[1])?;
    let c = g.sum(c)?;
    let total = g.add(a, c)?;
    g.scale(total, 1.0 / b as f64)
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    512
}
fn default_epochs() -> usize {
    50
}
fn default_patience() -> usize {
    5
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[serde(rename = "AdamW", alias = "adamw")]
    AdamW,
}

fn default_optimizer() -> Optimizer {
    Optimizer::AdamW
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: Optimizer,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Stop once the epoch loss has not improved for `patience` epochs.
    #[serde(default)]
    pub early_stop: bool,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Debug aid: abort on the first non-finite gradient, naming the parameter.
    #[serde(skip)]
    pub check_finite: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Published settings: AdamW, learning rate 1e-3, batch 512, no early stopping.
    pub fn paper() -> Self {
        Self {
            optimizer: Optimizer::AdamW,
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            weight_decay: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            grad_clip: None,
            seed: 0,
            early_stop: false,
            patience: default_patience(),
            check_finite: false,
        }
    }

    /// Single-core settings for the synthetic dataset.
    pub fn desk() -> Self {
        Self {
            learning_rate: 2e-3,
            batch_size: 64,
            epochs: 35,
            grad_clip: Some(1.0),
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)");
        }
        if self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return fail("adam_eps must be positive and weight_decay non-negative");
        }
        if matches!(self.grad_clip, Some(c) if c <= 0.0 || !c.is_finite()) {
            return fail("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub param_norm: f64,
    /// Wall-clock time; kept out of serialized history so reruns are byte-identical.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// `epoch,loss,param_norm` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,param_norm\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.mean_loss, e.param_norm));
        }
        s
    }

    /// `epoch,seconds` rows.
    pub fn timings_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:.3}\n", e.epoch, e.seconds));
        }
        s
    }
}

const SHUFFLE_STREAM_BASE: u64 = 1 << 40;
const DROPOUT_STREAM_BASE: u64 = 2 << 40;

/// Loss and parameter gradients of one batch.
pub fn batch_gradients(
    params: &ModelParams,
    batch: &Batch,
    training: bool,
    dropout_stream: u64,
    seed: u64,
) -> Result<(f64, Vec<Array>), TrainError> {
    let target = batch
        .target
        .as_ref()
        .ok_or_else(|| DataError::Invalid("training samples need targets".into()))?;
    let mut g = Graph::new();
    let vars = params.store().bind(&mut g);
    let mut rng = stream_rng(seed, dropout_stream);
    let mut pass = Pass {
        graph: &mut g,
        params: &vars,
        training,
        rng: &mut rng,
    };
    let out = params.forward_on(&mut pass, &batch.statics, &batch.observed, &batch.context, false)?;
    let loss = quantile_loss_on(&mut g, target, out.p50, out.p90)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    Ok((value, vars.iter().map(|&v| g.grad_or_zeros(v)).collect()))
}

fn clip(grads: &mut [Array], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Seeded single-threaded training on an already normalized dataset.
///
/// Each epoch reshuffles with a stream derived from `(seed, epoch)`; dropout
/// draws from a stream derived from `(seed, epoch, batch)`.
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    dataset: &Dataset,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    train_from(init_model(model_config)?, train_config, dataset, |_| {})
}

/// [`train`] from given parameters, calling `on_epoch` after every epoch.
pub fn train_from(
    mut params: ModelParams,
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainHistory), TrainError> {
    cfg.validate()?;
    params.config().check_schema(&dataset.schema)?;
    let shapes: Vec<&[usize]> = params.store().values().iter().map(Array::shape).collect();
    let mut opt = AdamW::new(cfg.adamw(), &shapes);
    let names = params.store().names().to_vec();
    let mut history = TrainHistory::default();
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let batches = make_batches(dataset, cfg.batch_size, Some(cfg.seed ^ (SHUFFLE_STREAM_BASE + epoch as u64)))?;
        let mut total = 0.0;
        let mut count = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let stream = DROPOUT_STREAM_BASE + ((epoch as u64) << 24) + bi as u64;
            let (loss, mut grads) = batch_gradients(&params, batch, true, stream, cfg.seed)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch: epoch + 1,
                    batch: bi,
                });
            }
            if cfg.check_finite {
                if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
                    return Err(TrainError::NonFiniteGradient {
                        epoch: epoch + 1,
                        batch: bi,
                        param: names[i].clone(),
                    });
                }
            }
            if let Some(c) = cfg.grad_clip {
                clip(&mut grads, c);
            }
            opt.step(params.store_mut().values_mut(), &grads, &names)?;
            total += loss * batch.len() as f64;
            count += batch.len();
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            mean_loss: total / count as f64,
            param_norm: params.store().norm(),
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        let loss = record.mean_loss;
        history.epochs.push(record);
        if cfg.early_stop {
            if loss < best {
                best = loss;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    Ok((params, history))
}

/// Finite-difference check of the full forward pass plus quantile loss, with
/// dropout disabled.
pub fn check_gradients(
    params: &ModelParams,
    batch: &Batch,
    eps: f64,
) -> Result<(GradCheckReport, Option<String>), TrainError> {
    let target = batch
        .target
        .clone()
        .ok_or_else(|| DataError::Invalid("gradient check needs targets".into()))?;
    let report = finite_difference_check(
        |g: &mut Graph, vars: &[Var]| -> Result<Var, TrainError> {
            let mut rng = stream_rng(0, 0);
            let mut pass = Pass {
                graph: g,
                params: vars,
                training: false,
                rng: &mut rng,
            };
            let out = params.forward_on(&mut pass, &batch.statics, &batch.observed, &batch.context, false)?;
            Ok(quantile_loss_on(g, &target, out.p50, out.p90)?)
        },
        params.store().values(),
        eps,
    )?;
    let name = report.worst.map(|(p, _)| params.store().names()[p].clone());
    Ok((report, name))
}

/// Model and random batch of `n` samples for [`check_gradients`]. The
/// zero-initialized calibration output layer is set to a small constant so
/// every parameter receives a nonzero gradient.
pub fn gradient_probe(config: &ModelConfig, n: usize) -> Result<(ModelParams, Batch), TrainError> {
    let mut params = init_model(config)?;
    if let Some(id) = params.store().find("calibration.output.weight") {
        params.store_mut().get_mut(id).data_mut().fill(0.3);
    }
    let mut rng = stream_rng(config.seed, PROBE_STREAM);
    let (l, h) = (config.lookback, config.horizon);
    let mut draw = |len: usize, lo: f64, hi: f64| -> Vec<f64> { (0..len).map(|_| rng.random_range(lo..hi)).collect() };
    let observed = Array::new(vec![n, l, config.d_observed], draw(n * l * config.d_observed, 0.0, 2.0))?;
    let context = Array::new(vec![n, l + h, config.d_context], draw(n * (l + h) * config.d_context, -1.0, 1.0))?;
    let target = Array::new(vec![n, h], draw(n * h, 0.0, 2.0))?;
    let statics = (0..n)
        .map(|_| config.static_cardinalities.iter().map(|&k| rng.random_range(0..k)).collect())
        .collect();
    Ok((
        params,
        Batch {
            indices: (0..n).collect(),
            statics,
            observed,
            context,
            target: Some(target),
        },
    ))
}

const PROBE_STREAM: u64 = 0x5052_4f42;

pub const CHECKPOINT_FORMAT: &str = "tat-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    params: ParamStore,
    history: TrainHistory,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

/// Serializes config, named parameters, and history as JSON. Floats use the
/// shortest representation that parses back to the same bits.
pub fn checkpoint_to_string(params: &ModelParams, history: &TrainHistory) -> Result<String, TrainError> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: params.config().clone(),
        params: params.store().clone(),
        history: history.clone(),
    };
    serde_json::to_string(&ck).map_err(|e| TrainError::Corrupt(e.to_string()))
}

pub fn checkpoint_from_str(text: &str) -> Result<(ModelParams, TrainHistory), TrainError> {
    let header: Header = serde_json::from_str(text).map_err(|e| TrainError::Corrupt(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(TrainError::Corrupt(format!("unknown format tag `{}`", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(TrainError::Version {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let ck: Checkpoint = serde_json::from_str(text).map_err(|e| TrainError::Corrupt(e.to_string()))?;
    let params = ModelParams::from_parts(ck.config, ck.params)
        .map_err(|e| TrainError::Corrupt(e.to_string()))?;
    if !params.store().values().iter().all(Array::is_finite) {
        return Err(TrainError::Corrupt("non-finite parameter value".into()));
    }
    Ok((params, ck.history))
}

pub fn save_checkpoint(params: &ModelParams, history: &TrainHistory, path: &Path) -> Result<(), TrainError> {
    std::fs::write(path, checkpoint_to_string(params, history)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, TrainHistory), TrainError> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}
