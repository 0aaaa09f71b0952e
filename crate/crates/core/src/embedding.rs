//! Input embeddings: categorical static features, and dilated-convolution token
//! embeddings with learned positions for the observed and known-context series.

use thiserror::Error;

use crate::numerics::{Array, Linear, NumericsError, ParamBuilder, ParamId, Pass, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("static feature {feature}: index {index} >= cardinality {cardinality}")]
    Vocabulary {
        feature: usize,
        index: usize,
        cardinality: usize,
    },
    #[error("{what}: expected {expected}, found {found}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Per-feature lookup tables, concatenated, dropped out, and projected to `d_hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticEmbedding {
    pub tables: Vec<ParamId>,
    pub cardinalities: Vec<usize>,
    pub projection: Linear,
    pub dropout: f64,
}

impl StaticEmbedding {
    pub fn build(b: &mut ParamBuilder, cardinalities: &[usize], d_hidden: usize, dropout: f64) -> Self {
        b.scoped("static", |b| {
            let tables = cardinalities
                .iter()
                .enumerate()
                .map(|(i, &c)| b.normal(&format!("table{i}"), &[c, d_hidden], TABLE_SD))
                .collect();
            Self {
                tables,
                cardinalities: cardinalities.to_vec(),
                projection: b.linear("projection", cardinalities.len() * d_hidden, d_hidden),
                dropout,
            }
        })
    }

    /// `statics: [B][d_s]` → `[B, d_hidden]`.
    pub fn forward(&self, pass: &mut Pass<'_>, statics: &[Vec<usize>]) -> Result<Var, EmbeddingError> {
        for row in statics {
            if row.len() != self.cardinalities.len() {
                return Err(EmbeddingError::Length {
                    what: "static features per sample",
                    expected: self.cardinalities.len(),
                    found: row.len(),
                });
            }
            for (feature, (&index, &cardinality)) in row.iter().zip(&self.cardinalities).enumerate() {
                if index >= cardinality {
                    return Err(EmbeddingError::Vocabulary {
                        feature,
                        index,
                        cardinality,
                    });
                }
            }
        }
        let mut parts = Vec::with_capacity(self.tables.len());
        for (f, &table) in self.tables.iter().enumerate() {
            let idx: Vec<usize> = statics.iter().map(|r| r[f]).collect();
            let t = pass.p(table);
            parts.push(pass.graph.gather(t, &idx)?);
        }
        let joined = pass.graph.concat(&parts)?;
        let dropped = pass.dropout(joined, self.dropout)?;
        Ok(self.projection.forward(pass, dropped)?)
    }
}

/// Standard deviation of the normal initialization of lookup and position tables.
pub const TABLE_SD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub dilation: usize,
}

/// Causal dilated conv stack (ReLU between layers) plus a learned position table.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbedding {
    pub layers: Vec<ConvLayer>,
    pub position: ParamId,
    pub length: usize,
    pub d_in: usize,
    pub dropout: f64,
}

impl TokenEmbedding {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        b: &mut ParamBuilder,
        name: &str,
        d_in: usize,
        length: usize,
        d_hidden: usize,
        kernel: usize,
        dilations: &[usize],
        dropout: f64,
    ) -> Self {
        b.scoped(name, |b| {
            let mut layers = Vec::with_capacity(dilations.len());
            let mut c_in = d_in;
            for (i, &dilation) in dilations.iter().enumerate() {
                let bound = 1.0 / ((kernel * c_in) as f64).sqrt();
                layers.push(ConvLayer {
                    kernel: b.uniform(&format!("conv{i}.kernel"), &[kernel, c_in, d_hidden], bound),
                    bias: b.uniform(&format!("conv{i}.bias"), &[d_hidden], bound),
                    dilation,
                });
                c_in = d_hidden;
            }
            Self {
                layers,
                position: b.normal("position", &[length, d_hidden], TABLE_SD),
                length,
                d_in,
                dropout,
            }
        })
    }

    /// `x: [B, T, d_in]` (a constant input) → `[B, T, d_hidden]`.
    pub fn forward(&self, pass: &mut Pass<'_>, x: Var) -> Result<Var, EmbeddingError> {
        let shape = pass.graph.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.length {
            return Err(EmbeddingError::Length {
                what: "time steps",
                expected: self.length,
                found: shape.get(1).copied().unwrap_or(0),
            });
        }
        if shape[2] != self.d_in {
            return Err(EmbeddingError::Length {
                what: "input channels",
                expected: self.d_in,
                found: shape[2],
            });
        }
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = pass.graph.relu(h)?;
            }
            let k = pass.p(layer.kernel);
            h = pass.graph.dilated_conv1d(h, k, layer.dilation)?;
            let bias = pass.p(layer.bias);
            h = pass.graph.add(h, bias)?;
        }
        let pos = pass.p(self.position);
        let h = pass.graph.add(h, pos)?;
        Ok(pass.dropout(h, self.dropout)?)
    }
}

/// `[B, d] → [B, T, d]`, every step a copy of the row.
pub fn broadcast_static(pass: &mut Pass<'_>, e_static: Var, t: usize) -> Result<Var, EmbeddingError> {
    Ok(pass.graph.broadcast_time(e_static, t)?)
}

/// Embedding sizes and regularization shared by the four input streams.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSpec {
    pub cardinalities: Vec<usize>,
    pub d_observed: usize,
    pub d_context: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub d_hidden: usize,
    pub conv_kernel: usize,
    pub conv_dilations: Vec<usize>,
    pub dropout_static: f64,
    pub dropout_other: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub statics: StaticEmbedding,
    pub observed: TokenEmbedding,
    pub context_past: TokenEmbedding,
    pub context_future: TokenEmbedding,
}

/// The four embedded streams of one batch.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddedInputs {
    /// `[B, d]`
    pub statics: Var,
    /// `[B, L, d]`
    pub observed: Var,
    /// `[B, L, d]`
    pub context_past: Var,
    /// `[B, H, d]`
    pub context_future: Var,
}

impl Embeddings {
    pub fn build(b: &mut ParamBuilder, spec: &EmbeddingSpec) -> Self {
        b.scoped("embed", |b| {
            let token = |b: &mut ParamBuilder, name: &str, d_in: usize, length: usize| {
                TokenEmbedding::build(
                    b,
                    name,
                    d_in,
                    length,
                    spec.d_hidden,
                    spec.conv_kernel,
                    &spec.conv_dilations,
                    spec.dropout_other,
                )
            };
            Self {
                statics: StaticEmbedding::build(b, &spec.cardinalities, spec.d_hidden, spec.dropout_static),
                observed: token(b, "observed", spec.d_observed, spec.lookback),
                context_past: token(b, "context_past", spec.d_context, spec.lookback),
                context_future: token(b, "context_future", spec.d_context, spec.horizon),
            }
        })
    }

    pub fn embed_static(&self, pass: &mut Pass<'_>, statics: &[Vec<usize>]) -> Result<Var, EmbeddingError> {
        self.statics.forward(pass, statics)
    }

    /// `observed: [B, L, d_b]`
    pub fn embed_observed(&self, pass: &mut Pass<'_>, observed: &Array) -> Result<Var, EmbeddingError> {
        let x = pass.graph.constant(observed.clone());
        self.observed.forward(pass, x)
    }

    /// `context: [B, L + H, d_c]`, split at `L` before any convolution so the
    /// historical part never sees horizon rows.
    pub fn embed_context(&self, pass: &mut Pass<'_>, context: &Array) -> Result<(Var, Var), EmbeddingError> {
        let (l, h) = (self.context_past.length, self.context_future.length);
        let rows = context.shape().get(1).copied().unwrap_or(0);
        if context.ndim() != 3 || rows != l + h {
            return Err(EmbeddingError::Length {
                what: "context rows",
                expected: l + h,
                found: rows,
            });
        }
        let past = pass.graph.constant(context.slice_time(0, l)?);
        let future = pass.graph.constant(context.slice_time(l, l + h)?);
        let past = self.context_past.forward(pass, past)?;
        let future = self.context_future.forward(pass, future)?;
        Ok((past, future))
    }

    pub fn forward(
        &self,
        pass: &mut Pass<'_>,
        statics: &[Vec<usize>],
        observed: &Array,
        context: &Array,
    ) -> Result<EmbeddedInputs, EmbeddingError> {
        let s = self.embed_static(pass, statics)?;
        let b = self.embed_observed(pass, observed)?;
        let (cl, ch) = self.embed_context(pass, context)?;
        Ok(EmbeddedInputs {
            statics: s,
            observed: b,
            context_past: cl,
            context_future: ch,
        })
    }
}
