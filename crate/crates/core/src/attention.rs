//! Multi-head scaled dot-product attention and the blocks built from it:
//! temporal alignment attention, plain self-attention, and the channel-token
//! translation from lookback length to horizon length.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Array, LayerNorm, Linear, NumericsError, ParamBuilder, Pass, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("{projection} projection expects width {expected}, found {found}")]
    Width {
        projection: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Post-softmax scores (and the logits feeding them) of one attention call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub heads: usize,
    pub query_len: usize,
    pub key_len: usize,
    /// `[B, heads, query_len, key_len]`
    pub scores: Array,
    /// Scaled pre-softmax logits, same shape as `scores`.
    pub logits: Array,
}

impl AttentionTrace {
    /// `[query_len, key_len]` score matrix of one sample and head.
    pub fn matrix(&self, sample: usize, head: usize) -> Vec<Vec<f64>> {
        let (q, k) = (self.query_len, self.key_len);
        let base = (sample * self.heads + head) * q * k;
        self.scores.data()[base..base + q * k]
            .chunks(k)
            .map(<[f64]>::to_vec)
            .collect()
    }

    /// Largest deviation of any score row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.scores
            .data()
            .chunks(self.key_len.max(1))
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub d_model: usize,
}

fn rank3(pass: &Pass<'_>, x: Var, what: &str) -> Result<[usize; 3], AttentionError> {
    match *pass.graph.shape(x) {
        [b, t, d] => Ok([b, t, d]),
        ref s => Err(AttentionError::Shape(format!("{what} must be [B, T, d], got {s:?}"))),
    }
}

impl MultiHeadAttention {
    pub fn build(
        b: &mut ParamBuilder,
        name: &str,
        widths: [usize; 3],
        d_model: usize,
        heads: usize,
    ) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "d_model must divide into heads");
        b.scoped(name, |b| Self {
            query: b.linear("query", widths[0], d_model),
            key: b.linear("key", widths[1], d_model),
            value: b.linear("value", widths[2], d_model),
            output: b.linear("output", d_model, d_model),
            heads,
            d_model,
        })
    }

    pub fn count(&self) -> usize {
        self.query.count() + self.key.count() + self.value.count() + self.output.count()
    }

    fn split_heads(&self, pass: &mut Pass<'_>, x: Var, b: usize, t: usize) -> Result<Var, NumericsError> {
        if self.heads == 1 {
            return Ok(x);
        }
        let dh = self.d_model / self.heads;
        let x = pass.graph.reshape(x, &[b, t, self.heads, dh])?;
        let x = pass.graph.permute(x, &[0, 2, 1, 3])?;
        pass.graph.reshape(x, &[b * self.heads, t, dh])
    }

    /// Returns `[B, T_q, d_model]` and, when `trace` is set, the score matrices.
    pub fn forward(
        &self,
        pass: &mut Pass<'_>,
        q_src: Var,
        k_src: Var,
        v_src: Var,
        trace: bool,
    ) -> Result<(Var, Option<AttentionTrace>), AttentionError> {
        let [bq, tq, dq] = rank3(pass, q_src, "query source")?;
        let [bk, tk, dk] = rank3(pass, k_src, "key source")?;
        let [bv, tv, dv] = rank3(pass, v_src, "value source")?;
        for (projection, lin, found) in [
            ("query", &self.query, dq),
            ("key", &self.key, dk),
            ("value", &self.value, dv),
        ] {
            if lin.d_in != found {
                return Err(AttentionError::Width {
                    projection,
                    expected: lin.d_in,
                    found,
                });
            }
        }
        if tk != tv || bq != bk || bq != bv {
            return Err(AttentionError::Shape(format!(
                "batch/length mismatch: query [{bq}, {tq}], key [{bk}, {tk}], value [{bv}, {tv}]"
            )));
        }
        let b = bq;
        let dh = self.d_model / self.heads;

        let q = self.query.forward(pass, q_src)?;
        let k = self.key.forward(pass, k_src)?;
        let v = self.value.forward(pass, v_src)?;
        let q = self.split_heads(pass, q, b, tq)?;
        let k = self.split_heads(pass, k, b, tk)?;
        let v = self.split_heads(pass, v, b, tk)?;

        let kt = pass.graph.transpose_last2(k)?;
        let logits = pass.graph.matmul(q, kt)?;
        let logits = pass.graph.scale(logits, 1.0 / (dh as f64).sqrt())?;
        let scores = pass.graph.softmax(logits)?;
        let ctx = pass.graph.matmul(scores, v)?;

        let ctx = if self.heads == 1 {
            ctx
        } else {
            let c = pass.graph.reshape(ctx, &[b, self.heads, tq, dh])?;
            let c = pass.graph.permute(c, &[0, 2, 1, 3])?;
            pass.graph.reshape(c, &[b, tq, self.d_model])?
        };
        let out = self.output.forward(pass, ctx)?;

        let trace = if trace {
            let shape = vec![b, self.heads, tq, tk];
            Some(AttentionTrace {
                heads: self.heads,
                query_len: tq,
                key_len: tk,
                scores: pass.graph.value(scores).clone().reshape(shape.clone())?,
                logits: pass.graph.value(logits).clone().reshape(shape)?,
            })
        } else {
            None
        };
        Ok((out, trace))
    }
}

/// Temporal alignment attention: the target stream queries keys built from the
/// known context and the broadcast static embedding; values carry all three.
///
/// Output is `LayerNorm(query + dropout(attention))`. The same block serves the
/// encoder (lookback streams, `L×L` scores) and the decoder (horizon streams,
/// `H×H` scores).
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalAlignment {
    pub attention: MultiHeadAttention,
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl TemporalAlignment {
    pub fn build(b: &mut ParamBuilder, name: &str, d: usize, heads: usize, dropout: f64) -> Self {
        b.scoped(name, |b| Self {
            attention: MultiHeadAttention::build(b, "attention", [d, 2 * d, 3 * d], d, heads),
            norm: b.layer_norm("norm", d),
            dropout,
        })
    }

    pub fn count(&self) -> usize {
        self.attention.count() + 2 * self.norm.d
    }

    /// `query: [B, T, d]`, `context: [B, T, d]`, `statics: [B, d]`.
    pub fn forward(
        &self,
        pass: &mut Pass<'_>,
        query: Var,
        context: Var,
        statics: Var,
        trace: bool,
    ) -> Result<(Var, Option<AttentionTrace>), AttentionError> {
        let [bq, t, _] = rank3(pass, query, "target stream")?;
        let [bc, tc, _] = rank3(pass, context, "context stream")?;
        if bq != bc || t != tc {
            return Err(AttentionError::Shape(format!(
                "target stream [{bq}, {t}] and context stream [{bc}, {tc}] disagree"
            )));
        }
        let s = pass.graph.broadcast_time(statics, t)?;
        let keys = pass.graph.concat(&[context, s])?;
        let values = pass.graph.concat(&[query, context, s])?;
        let (a, tr) = self.attention.forward(pass, query, keys, values, trace)?;
        let a = pass.dropout(a, self.dropout)?;
        let r = pass.graph.add(query, a)?;
        Ok((self.norm.forward(pass, r)?, tr))
    }
}

/// `LayerNorm(x + dropout(MultiHead(x, x, x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttentionBlock {
    pub attention: MultiHeadAttention,
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl SelfAttentionBlock {
    pub fn build(b: &mut ParamBuilder, name: &str, d: usize, heads: usize, dropout: f64) -> Self {
        b.scoped(name, |b| Self {
            attention: MultiHeadAttention::build(b, "attention", [d, d, d], d, heads),
            norm: b.layer_norm("norm", d),
            dropout,
        })
    }

    pub fn count(&self) -> usize {
        self.attention.count() + 2 * self.norm.d
    }

    pub fn forward(
        &self,
        pass: &mut Pass<'_>,
        x: Var,
        trace: bool,
    ) -> Result<(Var, Option<AttentionTrace>), AttentionError> {
        let (a, tr) = self.attention.forward(pass, x, x, x, trace)?;
        let a = pass.dropout(a, self.dropout)?;
        let r = pass.graph.add(x, a)?;
        Ok((self.norm.forward(pass, r)?, tr))
    }
}

/// Encoder-to-decoder translation. Each hidden channel becomes a token of
/// length `L`; single-head self-attention mixes channels (`d×d` scores), a
/// layer norm follows the residual, then a linear map resizes `L → H`.
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub attention: MultiHeadAttention,
    pub norm: LayerNorm,
    pub resize: Linear,
    pub dropout: f64,
}

impl Translation {
    pub fn build(b: &mut ParamBuilder, lookback: usize, horizon: usize, dropout: f64) -> Self {
        b.scoped("translate", |b| Self {
            attention: MultiHeadAttention::build(b, "attention", [lookback; 3], lookback, 1),
            norm: b.layer_norm("norm", lookback),
            resize: b.linear("resize", lookback, horizon),
            dropout,
        })
    }

    pub fn count(&self) -> usize {
        self.attention.count() + 2 * self.norm.d + self.resize.count()
    }

    /// `[B, L, d] → [B, H, d]`.
    pub fn forward(
        &self,
        pass: &mut Pass<'_>,
        encoded: Var,
        trace: bool,
    ) -> Result<(Var, Option<AttentionTrace>), AttentionError> {
        let [_, l, _] = rank3(pass, encoded, "encoder output")?;
        if l != self.resize.d_in {
            return Err(AttentionError::Width {
                projection: "translation",
                expected: self.resize.d_in,
                found: l,
            });
        }
        let tokens = pass.graph.transpose_last2(encoded)?;
        let (a, tr) = self.attention.forward(pass, tokens, tokens, tokens, trace)?;
        let a = pass.dropout(a, self.dropout)?;
        let r = pass.graph.add(tokens, a)?;
        let z = self.norm.forward(pass, r)?;
        let resized = self.resize.forward(pass, z)?;
        Ok((pass.graph.transpose_last2(resized)?, tr))
    }
}
