//! The full network: embeddings, encoder blocks (alignment attention then
//! self-attention), channel-token translation, decoder blocks, a two-quantile
//! head, and multiplicative posterior calibration from the horizon context.

mod config;

pub use config::{ModelConfig, Variant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionTrace, SelfAttentionBlock, TemporalAlignment, Translation};
use crate::data::{Batch, DataError, Dataset};
use crate::embedding::{EmbeddingSpec, Embeddings};
use crate::numerics::{
    stream_rng, Array, Graph, Linear, NumericsError, ParamBuilder, ParamStore, Pass, StreamRng, Var,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

trait AtStage<T> {
    fn at(self, stage: &'static str) -> Result<T, ModelError>;
}

impl<T, E: std::fmt::Display> AtStage<T> for Result<T, E> {
    fn at(self, stage: &'static str) -> Result<T, ModelError> {
        self.map_err(|e| ModelError::Stage {
            stage,
            message: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    alignment: Option<TemporalAlignment>,
    self_attention: Option<SelfAttentionBlock>,
}

impl Block {
    fn build(b: &mut ParamBuilder, name: &str, c: &ModelConfig) -> Self {
        b.scoped(name, |b| Self {
            alignment: c
                .use_taa
                .then(|| TemporalAlignment::build(b, "alignment", c.d_hidden, c.n_heads, c.dropout_other)),
            self_attention: c.use_self_attention.then(|| {
                SelfAttentionBlock::build(b, "self_attention", c.d_hidden, c.n_heads, c.dropout_other)
            }),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        pass: &mut Pass<'_>,
        stream: Var,
        context: Var,
        statics: Var,
        capture: bool,
        prefix: &str,
        traces: &mut Vec<NamedTrace>,
    ) -> Result<Var, ModelError> {
        let mut h = stream;
        if let Some(a) = &self.alignment {
            let (out, tr) = a.forward(pass, h, context, statics, capture).at("alignment attention")?;
            h = out;
            push_trace(traces, format!("{prefix}.alignment"), tr);
        }
        if let Some(s) = &self.self_attention {
            let (out, tr) = s.forward(pass, h, capture).at("self-attention")?;
            h = out;
            push_trace(traces, format!("{prefix}.self_attention"), tr);
        }
        Ok(h)
    }
}

fn push_trace(traces: &mut Vec<NamedTrace>, stage: String, trace: Option<AttentionTrace>) {
    if let Some(trace) = trace {
        traces.push(NamedTrace { stage, trace });
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Calibration {
    hidden: Linear,
    output: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embeddings: Embeddings,
    encoder: Vec<Block>,
    translation: Translation,
    decoder: Vec<Block>,
    head: Linear,
    calibration: Option<Calibration>,
}

impl Layout {
    fn build(c: &ModelConfig) -> (Self, ParamStore) {
        let mut b = ParamBuilder::new(c.seed);
        let spec = EmbeddingSpec {
            cardinalities: c.static_cardinalities.clone(),
            d_observed: c.d_observed,
            d_context: c.d_context,
            lookback: c.lookback,
            horizon: c.horizon,
            d_hidden: c.d_hidden,
            conv_kernel: c.conv_kernel,
            conv_dilations: c.conv_dilations.clone(),
            dropout_static: c.dropout_static,
            dropout_other: c.dropout_other,
        };
        let embeddings = Embeddings::build(&mut b, &spec);
        let encoder = (0..c.n_encoder_blocks)
            .map(|i| Block::build(&mut b, &format!("encoder{i}"), c))
            .collect();
        let translation = Translation::build(&mut b, c.lookback, c.horizon, c.dropout_other);
        let decoder = (0..c.n_decoder_blocks)
            .map(|i| Block::build(&mut b, &format!("decoder{i}"), c))
            .collect();
        let head = b.linear("head", c.d_hidden, 2);
        let calibration = c.use_calibration.then(|| {
            b.scoped("calibration", |b| Calibration {
                hidden: b.linear("hidden", c.d_context, c.calib_hidden),
                output: b.linear_zeros("output", c.calib_hidden, 1),
            })
        });
        let layout = Self {
            embeddings,
            encoder,
            translation,
            decoder,
            head,
            calibration,
        };
        (layout, b.finish())
    }
}

/// Trained or freshly initialized network: config, named parameters, and the
/// handles that map layers onto them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    store: ParamStore,
    layout: Layout,
}

/// Seeded initialization; identical configs give bitwise-identical parameters.
///
/// Linear and conv weights are `U(±1/√fan_in)`, lookup and position tables
/// `N(0, 0.1²)`, layer norms start at unit gain and zero bias, and the last
/// calibration layer starts at zero so calibration begins as the identity.
pub fn init_model(config: &ModelConfig) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let (layout, store) = Layout::build(config);
    Ok(ModelParams {
        config: config.clone(),
        store,
        layout,
    })
}

pub fn count_parameters(params: &ModelParams) -> usize {
    params.store.count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTrace {
    pub stage: String,
    pub trace: AttentionTrace,
}

/// Intermediate values captured on request.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelTraces {
    pub attention: Vec<NamedTrace>,
    /// `[B, d]`
    pub static_embedding: Array,
    /// `[B, L, d]`
    pub encoded: Array,
    /// `[B, H, d]`
    pub decoded: Array,
    /// `[B, H, 2]` head output before calibration.
    pub head: Array,
    /// `[B, H]` calibration factor `c`, absent when calibration is disabled.
    pub calibration: Option<Array>,
}

impl ModelTraces {
    pub fn find(&self, stage: &str) -> Option<&AttentionTrace> {
        self.attention.iter().find(|t| t.stage == stage).map(|t| &t.trace)
    }
}

/// P50 and P90 forecasts for a batch, each `[B, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastOutput {
    pub p50: Array,
    pub p90: Array,
    pub traces: Option<ModelTraces>,
}

/// Graph handles of one forward evaluation.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub p50: Var,
    pub p90: Var,
    pub statics: Var,
    pub encoded: Var,
    pub decoded: Var,
    pub head: Var,
    pub calibration: Option<Var>,
    pub traces: Vec<NamedTrace>,
}

/// One sample's forecasts, in the units of the dataset passed to [`predict`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleForecast {
    pub series_id: String,
    pub origin_time: i64,
    pub p50: Vec<f64>,
    pub p90: Vec<f64>,
}

/// Stream used for the unused generator of inference passes.
const INFERENCE_STREAM: u64 = 0x494e_4645;

impl ModelParams {
    /// Rebuilds the layer layout for `config` and adopts `store` if its names and
    /// shapes match.
    pub fn from_parts(config: ModelConfig, store: ParamStore) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, fresh) = Layout::build(&config);
        fresh
            .check_layout(&store)
            .map_err(|e| ModelError::Config(format!("parameters do not fit the config: {e}")))?;
        Ok(Self {
            config,
            store,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Builds the forward graph on `pass`. Inputs are a batch's statics,
    /// observed `[B, L, d_b]`, and context `[B, L + H, d_c]`.
    pub fn forward_on(
        &self,
        pass: &mut Pass<'_>,
        statics: &[Vec<usize>],
        observed: &Array,
        context: &Array,
        capture: bool,
    ) -> Result<ForwardVars, ModelError> {
        let c = &self.config;
        let (l, h) = (c.lookback, c.horizon);
        let b = statics.len();
        if observed.shape() != [b, l, c.d_observed] {
            return Err(ModelError::Stage {
                stage: "input",
                message: format!(
                    "observed has shape {:?}, expected [{b}, {l}, {}]",
                    observed.shape(),
                    c.d_observed
                ),
            });
        }
        if context.shape() != [b, l + h, c.d_context] {
            return Err(ModelError::Stage {
                stage: "input",
                message: format!(
                    "context has shape {:?}, expected [{b}, {}, {}]",
                    context.shape(),
                    l + h,
                    c.d_context
                ),
            });
        }
        let lay = &self.layout;
        let e = lay.embeddings.forward(pass, statics, observed, context).at("embedding")?;
        let mut traces = Vec::new();

        let mut stream = e.observed;
        for (i, block) in lay.encoder.iter().enumerate() {
            stream = block.forward(pass, stream, e.context_past, e.statics, capture, &format!("encoder{i}"), &mut traces)?;
        }
        let encoded = stream;

        let (mut dec, tr) = lay.translation.forward(pass, encoded, capture).at("translation")?;
        push_trace(&mut traces, "translation".into(), tr);
        for (i, block) in lay.decoder.iter().enumerate() {
            dec = block.forward(pass, dec, e.context_future, e.statics, capture, &format!("decoder{i}"), &mut traces)?;
        }

        let head = lay.head.forward(pass, dec).at("head")?;
        let raw50 = pass.graph.select_last(head, 0).at("head")?;
        let raw90 = pass.graph.select_last(head, 1).at("head")?;
        let (p50, p90, calibration) = match &lay.calibration {
            None => (raw50, raw90, None),
            Some(cal) => {
                let future = pass.graph.constant(context.slice_time(l, l + h)?);
                let hid = cal.hidden.forward(pass, future).at("calibration")?;
                let hid = pass.graph.relu(hid)?;
                let out = cal.output.forward(pass, hid).at("calibration")?;
                let out = pass.graph.tanh(out)?;
                let factor = pass.graph.reshape(out, &[b, h]).at("calibration")?;
                let scale = pass.graph.add_scalar(factor, 1.0)?;
                let p50 = pass.graph.mul(raw50, scale).at("calibration")?;
                let p90 = pass.graph.mul(raw90, scale).at("calibration")?;
                (p50, p90, Some(factor))
            }
        };
        Ok(ForwardVars {
            p50,
            p90,
            statics: e.statics,
            encoded,
            decoded: dec,
            head,
            calibration,
            traces,
        })
    }

    /// Forward pass on a fresh graph. Dropout is active only when `training`.
    pub fn forward(
        &self,
        batch: &Batch,
        training: bool,
        rng: &mut StreamRng,
    ) -> Result<ForecastOutput, ModelError> {
        self.forward_inner(batch, training, rng, false)
    }

    /// As [`forward`](Self::forward), also returning attention scores and activations.
    pub fn forward_traced(
        &self,
        batch: &Batch,
        training: bool,
        rng: &mut StreamRng,
    ) -> Result<ForecastOutput, ModelError> {
        self.forward_inner(batch, training, rng, true)
    }

    fn forward_inner(
        &self,
        batch: &Batch,
        training: bool,
        rng: &mut StreamRng,
        capture: bool,
    ) -> Result<ForecastOutput, ModelError> {
        let mut g = Graph::new();
        let vars = self.store.bind(&mut g);
        let mut pass = Pass {
            graph: &mut g,
            params: &vars,
            training,
            rng,
        };
        let out = self.forward_on(&mut pass, &batch.statics, &batch.observed, &batch.context, capture)?;
        let traces = capture.then(|| ModelTraces {
            static_embedding: g.value(out.statics).clone(),
            encoded: g.value(out.encoded).clone(),
            decoded: g.value(out.decoded).clone(),
            head: g.value(out.head).clone(),
            calibration: out.calibration.map(|v| g.value(v).clone()),
            attention: out.traces.clone(),
        });
        let (p50, p90) = (g.value(out.p50).clone(), g.value(out.p90).clone());
        if !p50.is_finite() || !p90.is_finite() {
            return Err(ModelError::Stage {
                stage: "output",
                message: "non-finite forecast".into(),
            });
        }
        Ok(ForecastOutput { p50, p90, traces })
    }
}

/// Inference over a whole dataset in sample order. Batches run in parallel; the
/// result does not depend on `batch_size`.
pub fn predict(
    params: &ModelParams,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<Vec<SampleForecast>, ModelError> {
    params.config.check_schema(&dataset.schema)?;
    if batch_size == 0 {
        return Err(ModelError::Config("batch_size must be at least 1".into()));
    }
    let h = params.config.horizon;
    let order: Vec<usize> = (0..dataset.len()).collect();
    let chunks: Vec<Vec<SampleForecast>> = order
        .par_chunks(batch_size)
        .map(|idx| {
            let batch = Batch::from_samples(dataset, idx)?;
            let mut rng = stream_rng(0, INFERENCE_STREAM);
            let out = params.forward(&batch, false, &mut rng)?;
            Ok(idx
                .iter()
                .enumerate()
                .map(|(row, &i)| {
                    let s = &dataset.samples[i];
                    SampleForecast {
                        series_id: s.series_id.clone(),
                        origin_time: s.origin_time,
                        p50: out.p50.data()[row * h..(row + 1) * h].to_vec(),
                        p90: out.p90.data()[row * h..(row + 1) * h].to_vec(),
                    }
                })
                .collect())
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(chunks.into_iter().flatten().collect())
}
