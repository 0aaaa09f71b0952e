use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use tat_core::attention::{
    AttentionError, MultiHeadAttention, SelfAttentionBlock, TemporalAlignment, Translation,
};
use tat_core::data::{
    Batch, ContextColumn, ContextKind, Dataset, DatasetSchema, ObservedColumn, Sample, StaticFeature,
};
use tat_core::embedding::{broadcast_static, EmbeddingError, StaticEmbedding, TokenEmbedding};
use tat_core::model::{count_parameters, init_model, predict, ModelConfig, ModelError, Variant};
use tat_core::numerics::{
    finite_difference_check, stream_rng, Array, Graph, NumericsError, ParamBuilder, ParamStore,
    Pass, StreamRng, Var,
};
use tat_core::training::check_gradients;

fn randn(rng: &mut StreamRng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn run<T>(store: &ParamStore, f: impl FnOnce(&mut Pass<'_>) -> T) -> (T, Graph) {
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let mut rng = stream_rng(0, 0);
    let out = {
        let mut pass = Pass {
            graph: &mut g,
            params: &vars,
            training: false,
            rng: &mut rng,
        };
        f(&mut pass)
    };
    (out, g)
}

fn max_abs_diff(a: &Array, b: &Array) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- embedding

#[test]
fn static_zero_row_gives_projection_bias() {
    let mut b = ParamBuilder::new(1);
    let emb = StaticEmbedding::build(&mut b, &[3], 4, 0.5);
    let mut store = b.finish();
    let table = store.get_mut(emb.tables[0]);
    for j in 0..4 {
        table.set(&[0, j], 0.0);
    }
    let (v, g) = run(&store, |p| emb.forward(p, &[vec![0], vec![0]]).unwrap());
    let bias = store.get(emb.projection.bias).data().to_vec();
    let out = g.value(v);
    assert_eq!(out.shape(), &[2, 4]);
    assert_eq!(&out.data()[..4], &bias[..]);
    assert_eq!(&out.data()[4..], &bias[..]);
}

#[test]
fn static_embedding_contract() {
    let mut b = ParamBuilder::new(2);
    let emb = StaticEmbedding::build(&mut b, &[3, 5], 6, 0.5);
    let store = b.finish();
    let (v, g) = run(&store, |p| emb.forward(p, &[vec![1, 4], vec![2, 0], vec![1, 4]]).unwrap());
    let out = g.value(v);
    assert_eq!(out.shape(), &[3, 6]);
    assert_eq!(out.data()[..6], out.data()[12..]);
    assert_ne!(out.data()[..6], out.data()[6..12]);
    let (err, _) = run(&store, |p| emb.forward(p, &[vec![3, 0]]).unwrap_err());
    assert_eq!(
        err,
        EmbeddingError::Vocabulary {
            feature: 0,
            index: 3,
            cardinality: 3
        }
    );
}

fn token(b: &mut ParamBuilder, d_in: usize, len: usize, d: usize, dil: &[usize]) -> TokenEmbedding {
    TokenEmbedding::build(b, "tok", d_in, len, d, 3, dil, 0.1)
}

#[test]
fn token_embedding_zero_in_zero_out() {
    let mut b = ParamBuilder::new(3);
    let emb = token(&mut b, 2, 7, 5, &[1, 2]);
    let mut store = b.finish();
    for layer in &emb.layers {
        *store.get_mut(layer.bias) = Array::zeros(&[5]);
    }
    *store.get_mut(emb.position) = Array::zeros(&[7, 5]);
    let (v, g) = run(&store, |p| {
        let x = p.graph.constant(Array::zeros(&[2, 7, 2]));
        emb.forward(p, x).unwrap()
    });
    assert_eq!(g.value(v).shape(), &[2, 7, 5]);
    assert!(g.value(v).data().iter().all(|&x| x == 0.0));

    let (err, _) = run(&store, |p| {
        let x = p.graph.constant(Array::zeros(&[2, 6, 2]));
        emb.forward(p, x).unwrap_err()
    });
    assert!(matches!(err, EmbeddingError::Length { expected: 7, found: 6, .. }));
}

#[test]
fn single_conv_layer_is_causal_and_local() {
    let mut b = ParamBuilder::new(4);
    let emb = token(&mut b, 2, 10, 3, &[2]);
    let store = b.finish();
    let mut rng = stream_rng(9, 0);
    let x = randn(&mut rng, &[1, 10, 2]);
    let t0 = 3;
    let mut y = x.clone();
    y.set(&[0, t0, 1], x.get(&[0, t0, 1]) + 1.0);
    let eval = |input: &Array| {
        let (v, g) = run(&store, |p| {
            let c = p.graph.constant(input.clone());
            emb.forward(p, c).unwrap()
        });
        g.value(v).clone()
    };
    let (a, c) = (eval(&x), eval(&y));
    // kernel 3, dilation 2: step t0 feeds t0, t0 + 2, t0 + 4
    for t in 0..10 {
        let changed = (0..3).any(|j| a.get(&[0, t, j]) != c.get(&[0, t, j]));
        assert_eq!(changed, [3, 5, 7].contains(&t), "t = {t}");
    }
}

fn context_embedder(l: usize, h: usize, d_c: usize, d: usize) -> (tat_core::embedding::Embeddings, ParamStore) {
    let mut b = ParamBuilder::new(5);
    let spec = tat_core::embedding::EmbeddingSpec {
        cardinalities: vec![2],
        d_observed: 1,
        d_context: d_c,
        lookback: l,
        horizon: h,
        d_hidden: d,
        conv_kernel: 3,
        conv_dilations: vec![1, 2],
        dropout_static: 0.5,
        dropout_other: 0.1,
    };
    let e = tat_core::embedding::Embeddings::build(&mut b, &spec);
    (e, b.finish())
}

#[test]
fn context_split_contract() {
    let (l, h, d) = (6, 3, 4);
    let (emb, store) = context_embedder(l, h, 2, d);
    let mut ctx = Array::zeros(&[2, l + h, 2]);
    let eval = |ctx: &Array| {
        let ((cl, ch), g) = run(&store, |p| emb.embed_context(p, ctx).unwrap());
        (g.value(cl).clone(), g.value(ch).clone())
    };
    let (past, future) = eval(&ctx);
    assert_eq!(past.shape(), &[2, l, d]);
    assert_eq!(future.shape(), &[2, h, d]);
    assert_eq!(past.shape()[1] + future.shape()[1], l + h);

    // an event flag moved around the horizon never reaches the historical embedding
    for h_star in 0..h {
        ctx.set(&[0, l + h_star, 0], 1.0);
        let (p2, f2) = eval(&ctx);
        assert_eq!(p2, past);
        assert_ne!(f2, future);
        ctx.set(&[0, l + h_star, 0], 0.0);
    }
    let (err, _) = run(&store, |p| emb.embed_context(p, &Array::zeros(&[2, l + h - 1, 2])).unwrap_err());
    assert!(matches!(err, EmbeddingError::Length { what: "context rows", .. }));
}

#[test]
fn broadcast_static_contract() {
    let store = ParamStore::default();
    let mut rng = stream_rng(1, 1);
    let e = randn(&mut rng, &[2, 3]);
    let (v, g) = run(&store, |p| {
        let x = p.graph.constant(e.clone());
        broadcast_static(p, x, 1).unwrap()
    });
    assert_eq!(g.value(v).data(), e.data());
    assert_eq!(g.value(v).shape(), &[2, 1, 3]);
    let (v, g) = run(&store, |p| {
        let x = p.graph.constant(e.clone());
        broadcast_static(p, x, 4).unwrap()
    });
    let out = g.value(v);
    for b in 0..2 {
        for t in 1..4 {
            for j in 0..3 {
                assert_eq!(out.get(&[b, t, j]).to_bits(), out.get(&[b, 0, j]).to_bits());
            }
        }
    }
    let (err, _) = run(&store, |p| {
        let x = p.graph.constant(e.clone());
        broadcast_static(p, x, 0).unwrap_err()
    });
    assert!(matches!(err, EmbeddingError::Numerics(NumericsError::InvalidArgument(_))));

    // d/de Σ broadcast(e) = T, checked against central differences
    let t = 5;
    let report = finite_difference_check(
        |g: &mut Graph, v: &[Var]| -> Result<Var, NumericsError> {
            let b = g.broadcast_time(v[0], t)?;
            g.sum(b)
        },
        std::slice::from_ref(&e),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-8);
    let mut g = Graph::new();
    let x = g.param(e.clone());
    let b = g.broadcast_time(x, t).unwrap();
    let s = g.sum(b).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).unwrap().data().iter().all(|&d| d == t as f64));
}

// ---------------------------------------------------------------- attention

fn set_identity(store: &mut ParamStore, lin: &tat_core::numerics::Linear) {
    let mut w = Array::zeros(&[lin.d_in, lin.d_out]);
    for i in 0..lin.d_in.min(lin.d_out) {
        w.set(&[i, i], 1.0);
    }
    *store.get_mut(lin.weight) = w;
    *store.get_mut(lin.bias) = Array::zeros(&[lin.d_out]);
}

fn brute_attention(q: &Array, k: &Array, v: &Array) -> Vec<f64> {
    let (b, tq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let tk = k.shape()[1];
    let mut out = vec![0.0; b * tq * d];
    for bi in 0..b {
        for i in 0..tq {
            let logits: Vec<f64> = (0..tk)
                .map(|j| (0..d).map(|c| q.get(&[bi, i, c]) * k.get(&[bi, j, c])).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..d {
                out[(bi * tq + i) * d + c] = (0..tk).map(|j| e[j] / z * v.get(&[bi, j, c])).sum();
            }
        }
    }
    out
}

#[test]
fn identity_projections_match_textbook_attention() {
    let mut b = ParamBuilder::new(6);
    let mha = MultiHeadAttention::build(&mut b, "mha", [5, 5, 5], 5, 1);
    let mut store = b.finish();
    for lin in [mha.query, mha.key, mha.value, mha.output] {
        set_identity(&mut store, &lin);
    }
    let mut rng = stream_rng(2, 0);
    let (q, k, v) = (randn(&mut rng, &[3, 4, 5]), randn(&mut rng, &[3, 6, 5]), randn(&mut rng, &[3, 6, 5]));
    let ((out, trace), g) = run(&store, |p| {
        let (a, b, c) = (p.graph.constant(q.clone()), p.graph.constant(k.clone()), p.graph.constant(v.clone()));
        mha.forward(p, a, b, c, true).unwrap()
    });
    let expect = brute_attention(&q, &k, &v);
    let err = g.value(out).data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
    let trace = trace.unwrap();
    assert_eq!(trace.scores.shape(), &[3, 1, 4, 6]);
    assert!(trace.max_row_sum_error() < 1e-12);
}

#[test]
fn multi_head_matches_per_head_brute_force() {
    let (d, heads) = (6, 3);
    let mut b = ParamBuilder::new(7);
    let mha = MultiHeadAttention::build(&mut b, "mha", [d, d, d], d, heads);
    let mut store = b.finish();
    for lin in [mha.query, mha.key, mha.value, mha.output] {
        set_identity(&mut store, &lin);
    }
    let mut rng = stream_rng(3, 0);
    let (q, k) = (randn(&mut rng, &[2, 3, d]), randn(&mut rng, &[2, 5, d]));
    let v = randn(&mut rng, &[2, 5, d]);
    let ((out, trace), g) = run(&store, |p| {
        let (a, b, c) = (p.graph.constant(q.clone()), p.graph.constant(k.clone()), p.graph.constant(v.clone()));
        mha.forward(p, a, b, c, true).unwrap()
    });
    let dh = d / heads;
    let head_slice = |x: &Array, h: usize| {
        let (b, t) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::new();
        for bi in 0..b {
            for ti in 0..t {
                for c in 0..dh {
                    data.push(x.get(&[bi, ti, h * dh + c]));
                }
            }
        }
        Array::new(vec![b, t, dh], data).unwrap()
    };
    let out = g.value(out);
    for h in 0..heads {
        let expect = brute_attention(&head_slice(&q, h), &head_slice(&k, h), &head_slice(&v, h));
        let got = head_slice(out, h);
        let err = got.data().iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "head {h}: {err}");
    }
    assert_eq!(trace.unwrap().scores.shape(), &[2, heads, 3, 5]);
}

#[test]
fn single_key_scores_one_and_identical_keys_split_evenly() {
    let mut b = ParamBuilder::new(8);
    let mha = MultiHeadAttention::build(&mut b, "mha", [2, 2, 2], 2, 1);
    let store = b.finish();
    let mut rng = stream_rng(4, 0);
    let x = randn(&mut rng, &[1, 1, 2]);
    let ((_, trace), _) = run(&store, |p| {
        let c = p.graph.constant(x.clone());
        mha.forward(p, c, c, c, true).unwrap()
    });
    assert_eq!(trace.unwrap().scores.data(), &[1.0]);

    // two identical keys and values: scores 0.5 each, output is the projected value row
    let q = randn(&mut rng, &[1, 1, 2]);
    let row = [0.3, -1.2];
    let kv = Array::new(vec![1, 2, 2], [row, row].concat()).unwrap();
    let ((out, trace), g) = run(&store, |p| {
        let (a, b) = (p.graph.constant(q.clone()), p.graph.constant(kv.clone()));
        mha.forward(p, a, b, b, true).unwrap()
    });
    assert_eq!(trace.unwrap().scores.data(), &[0.5, 0.5]);
    let lin = |w: &Array, bias: &Array, x: &[f64]| -> Vec<f64> {
        (0..2).map(|j| bias.data()[j] + (0..2).map(|i| x[i] * w.get(&[i, j])).sum::<f64>()).collect()
    };
    let v = lin(store.get(mha.value.weight), store.get(mha.value.bias), &row);
    let expect = lin(store.get(mha.output.weight), store.get(mha.output.bias), &v);
    let got = g.value(out).data();
    assert!((got[0] - expect[0]).abs() < 1e-14 && (got[1] - expect[1]).abs() < 1e-14);
}

#[test]
fn width_mismatch_names_the_projection() {
    let mut b = ParamBuilder::new(9);
    let mha = MultiHeadAttention::build(&mut b, "mha", [4, 8, 12], 4, 2);
    let store = b.finish();
    let (err, _) = run(&store, |p| {
        let q = p.graph.constant(Array::zeros(&[1, 2, 4]));
        let k = p.graph.constant(Array::zeros(&[1, 3, 7]));
        let v = p.graph.constant(Array::zeros(&[1, 3, 12]));
        mha.forward(p, q, k, v, false).unwrap_err()
    });
    assert_eq!(
        err,
        AttentionError::Width {
            projection: "key",
            expected: 8,
            found: 7
        }
    );
    assert!(err.to_string().contains("key"));
}

fn alignment_setup(d: usize, t: usize, b: usize, seed: u64) -> (TemporalAlignment, ParamStore, [Array; 3]) {
    let mut pb = ParamBuilder::new(seed);
    let taa = TemporalAlignment::build(&mut pb, "taa", d, 1, 0.1);
    let store = pb.finish();
    let mut rng = stream_rng(seed, 1);
    let inputs = [randn(&mut rng, &[b, t, d]), randn(&mut rng, &[b, t, d]), randn(&mut rng, &[b, d])];
    (taa, store, inputs)
}

fn align(taa: &TemporalAlignment, store: &ParamStore, x: &[Array; 3]) -> (Array, tat_core::attention::AttentionTrace) {
    let ((out, tr), g) = run(store, |p| {
        let (q, c, s) = (p.graph.constant(x[0].clone()), p.graph.constant(x[1].clone()), p.graph.constant(x[2].clone()));
        taa.forward(p, q, c, s, true).unwrap()
    });
    (g.value(out).clone(), tr.unwrap())
}

#[test]
fn encoder_alignment_scores_are_lookback_square() {
    let (l, d) = (7, 4);
    let (taa, mut store, x) = alignment_setup(d, l, 2, 10);
    assert_eq!(taa.attention.key.d_in, 2 * d);
    assert_eq!(taa.attention.value.d_in, 3 * d);
    let (out, tr) = align(&taa, &store, &x);
    assert_eq!(out.shape(), &[2, l, d]);
    assert_eq!((tr.query_len, tr.key_len), (l, l));

    *store.get_mut(taa.attention.key.weight) = Array::zeros(&[2 * d, d]);
    let (_, tr) = align(&taa, &store, &x);
    assert!(tr.scores.data().iter().all(|&s| (s - 1.0 / l as f64).abs() < 1e-15));
}

#[test]
fn alignment_keeps_samples_independent() {
    let (taa, store, x) = alignment_setup(4, 5, 3, 11);
    let (out, _) = align(&taa, &store, &x);
    let perm = [2, 0, 1];
    let permute = |a: &Array| {
        let row = a.len() / a.shape()[0];
        let data: Vec<f64> = perm.iter().flat_map(|&i| a.data()[i * row..(i + 1) * row].to_vec()).collect();
        Array::new(a.shape().to_vec(), data).unwrap()
    };
    let px = [permute(&x[0]), permute(&x[1]), permute(&x[2])];
    let (pout, _) = align(&taa, &store, &px);
    assert!(max_abs_diff(&pout, &permute(&out)) < 1e-14);
}

#[test]
fn decoder_alignment_logit_columns_follow_context_steps() {
    let (h, d) = (5, 4);
    let (taa, store, x) = alignment_setup(d, h, 1, 12);
    let (_, base) = align(&taa, &store, &x);
    assert_eq!((base.query_len, base.key_len), (h, h));
    for step in 0..h {
        let mut y = x.clone();
        for j in 0..d {
            y[1].set(&[0, step, j], x[1].get(&[0, step, j]) + 0.5);
        }
        let (_, tr) = align(&taa, &store, &y);
        for i in 0..h {
            for k in 0..h {
                let idx = i * h + k;
                let moved = (tr.logits.data()[idx] - base.logits.data()[idx]).abs() > 0.0;
                assert_eq!(moved, k == step, "query {i}, key {k}, step {step}");
            }
        }
    }
    let (taa1, store1, x1) = alignment_setup(d, 1, 2, 13);
    let (_, tr) = align(&taa1, &store1, &x1);
    assert_eq!(tr.scores.data(), &[1.0, 1.0]);
}

#[test]
fn translation_shapes_and_truncation() {
    let (l, h, d) = (6, 4, 5);
    let mut pb = ParamBuilder::new(14);
    let tr = Translation::build(&mut pb, l, h, 0.1);
    let mut store = pb.finish();
    let mut rng = stream_rng(14, 1);
    let mut x = randn(&mut rng, &[2, l, d]);
    let ((out, trace), g) = run(&store, |p| {
        let c = p.graph.constant(x.clone());
        tr.forward(p, c, true).unwrap()
    });
    assert_eq!(g.value(out).shape(), &[2, h, d]);
    let trace = trace.unwrap();
    assert_eq!((trace.query_len, trace.key_len), (d, d));

    // standardize each channel over time so the inner layer norm is (nearly) the identity
    for b in 0..2 {
        for c in 0..d {
            let col: Vec<f64> = (0..l).map(|t| x.get(&[b, t, c])).collect();
            let m = col.iter().sum::<f64>() / l as f64;
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / l as f64).sqrt();
            for t in 0..l {
                x.set(&[b, t, c], (col[t] - m) / sd);
            }
        }
    }
    *store.get_mut(tr.attention.output.weight) = Array::zeros(&[l, l]);
    *store.get_mut(tr.attention.output.bias) = Array::zeros(&[l]);
    set_identity(&mut store, &tr.resize);
    let ((out, _), g) = run(&store, |p| {
        let c = p.graph.constant(x.clone());
        tr.forward(p, c, false).unwrap()
    });
    let expect = x.slice_time(0, h).unwrap();
    assert!(max_abs_diff(g.value(out), &expect) < 1e-4);
}

#[test]
fn self_attention_block_contract() {
    let d = 4;
    let mut pb = ParamBuilder::new(15);
    let sa = SelfAttentionBlock::build(&mut pb, "sa", d, 2, 0.1);
    let store = pb.finish();
    let mut rng = stream_rng(15, 1);
    let x = randn(&mut rng, &[1, 3, d]);
    let ((out, _), g) = run(&store, |p| {
        let c = p.graph.constant(x.clone());
        sa.forward(p, c, false).unwrap()
    });
    assert_eq!(g.value(out).shape(), &[1, 3, d]);

    let mut zeroed = store.clone();
    *zeroed.get_mut(sa.attention.output.weight) = Array::zeros(&[d, d]);
    *zeroed.get_mut(sa.attention.output.bias) = Array::zeros(&[d]);
    let ((y, _), g) = run(&zeroed, |p| {
        let c = p.graph.constant(x.clone());
        sa.forward(p, c, false).unwrap()
    });
    let (ln, g2) = run(&zeroed, |p| {
        let c = p.graph.constant(x.clone());
        sa.norm.forward(p, c).unwrap()
    });
    assert_eq!(g.value(y), g2.value(ln));

    // gradient check over the block parameters and its input
    let weights = randn(&mut rng, &[1, 3, d]);
    let mut values = store.values().to_vec();
    values.push(x.clone());
    let report = finite_difference_check(
        |g: &mut Graph, v: &[Var]| -> Result<Var, AttentionError> {
            let n = v.len() - 1;
            let mut rng = stream_rng(0, 0);
            let mut pass = Pass {
                graph: g,
                params: &v[..n],
                training: false,
                rng: &mut rng,
            };
            let (out, _) = sa.forward(&mut pass, v[n], false)?;
            let w = g.constant(weights.clone());
            let m = g.mul(out, w)?;
            Ok(g.sum(m)?)
        },
        &values,
        1e-6,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
    // four projections with weight and bias, plus the norm's gain and bias
    assert_eq!(store.len(), 10);
}

// ---------------------------------------------------------------- model

fn micro_schema(c: &ModelConfig) -> DatasetSchema {
    DatasetSchema {
        lookback: c.lookback,
        horizon: c.horizon,
        static_features: c
            .static_cardinalities
            .iter()
            .enumerate()
            .map(|(i, &k)| StaticFeature {
                name: format!("s{i}"),
                cardinality: k,
            })
            .collect(),
        observed: (0..c.d_observed)
            .map(|i| ObservedColumn {
                name: format!("b{i}"),
                scaled: true,
            })
            .collect(),
        context: (0..c.d_context)
            .map(|i| ContextColumn {
                name: format!("c{i}"),
                kind: ContextKind::Other,
            })
            .collect(),
        ignorable_columns: vec![],
    }
}

fn random_dataset(c: &ModelConfig, n: usize, seed: u64) -> Dataset {
    let mut rng = stream_rng(seed, 77);
    let (l, h) = (c.lookback, c.horizon);
    let samples = (0..n)
        .map(|i| Sample {
            series_id: format!("x{i}"),
            static_features: c.static_cardinalities.iter().map(|&k| rng.random_range(0..k)).collect(),
            observed: (0..l).map(|_| (0..c.d_observed).map(|_| rng.random_range(0.0..2.0)).collect()).collect(),
            context: (0..l + h).map(|_| (0..c.d_context).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            target: Some((0..h).map(|_| rng.random_range(0.0..2.0)).collect()),
            origin_time: 100,
        })
        .collect();
    Dataset::new(micro_schema(c), samples).unwrap()
}

fn full_batch(d: &Dataset) -> Batch {
    Batch::from_samples(d, &(0..d.len()).collect::<Vec<_>>()).unwrap()
}

/// Closed-form count of trainable values for a config.
fn expected_parameters(c: &ModelConfig) -> usize {
    let d = c.d_hidden;
    let k = c.conv_kernel;
    let token = |d_in: usize, t: usize| {
        (k * d_in * d + d) + (c.conv_dilations.len() - 1) * (k * d * d + d) + t * d
    };
    let statics: usize = c.static_cardinalities.iter().map(|&v| v * d).sum::<usize>() + c.d_static() * d * d + d;
    let taa = 7 * d * d + 4 * d + 2 * d;
    let sa = 4 * (d * d + d) + 2 * d;
    let per_block = if c.use_taa { taa } else { 0 } + if c.use_self_attention { sa } else { 0 };
    let (l, h) = (c.lookback, c.horizon);
    let translate = 4 * (l * l + l) + 2 * l + l * h + h;
    let calib = if c.use_calibration {
        c.d_context * c.calib_hidden + c.calib_hidden + c.calib_hidden + 1
    } else {
        0
    };
    statics
        + token(c.d_observed, l)
        + token(c.d_context, l)
        + token(c.d_context, h)
        + (c.n_encoder_blocks + c.n_decoder_blocks) * per_block
        + translate
        + (2 * d + 2)
        + calib
}

#[test]
fn init_is_deterministic_and_validated() {
    let c = ModelConfig::micro();
    assert_eq!(init_model(&c).unwrap(), init_model(&c).unwrap());
    let other = init_model(&ModelConfig { seed: 1, ..c.clone() }).unwrap();
    assert_ne!(init_model(&c).unwrap(), other);
    for bad in [
        ModelConfig { n_heads: 3, ..c.clone() },
        ModelConfig { dropout_other: 1.0, ..c.clone() },
        ModelConfig { d_hidden: 0, ..c.clone() },
        ModelConfig { conv_dilations: vec![], ..c.clone() },
    ] {
        assert!(matches!(init_model(&bad), Err(ModelError::Config(_))));
    }
}

#[test]
fn parameter_counts_match_closed_form() {
    let base = ModelConfig::micro();
    let mut rng = stream_rng(5, 5);
    let mut configs = vec![base.clone()];
    for _ in 0..3 {
        let heads = rng.random_range(1..3);
        configs.push(ModelConfig {
            lookback: rng.random_range(3..12),
            horizon: rng.random_range(1..6),
            static_cardinalities: (0..rng.random_range(1..3)).map(|_| rng.random_range(1..6)).collect(),
            d_observed: rng.random_range(1..4),
            d_context: rng.random_range(1..5),
            d_hidden: heads * rng.random_range(2..6),
            n_heads: heads,
            n_encoder_blocks: rng.random_range(1..3),
            n_decoder_blocks: rng.random_range(1..3),
            calib_hidden: rng.random_range(1..6),
            conv_dilations: vec![1; rng.random_range(1..4)],
            ..base.clone()
        });
    }
    for c in configs {
        for v in Variant::ALL {
            let cv = c.with_variant(v);
            assert_eq!(count_parameters(&init_model(&cv).unwrap()), expected_parameters(&cv), "{cv:?}");
            assert!(cv.parameter_bound() >= expected_parameters(&cv));
        }
        let full = count_parameters(&init_model(&c).unwrap());
        let no_taa = count_parameters(&init_model(&c.with_variant(Variant::NoTaa)).unwrap());
        let no_cal = count_parameters(&init_model(&c.with_variant(Variant::NoCalibration)).unwrap());
        let d = c.d_hidden;
        let blocks = c.n_encoder_blocks + c.n_decoder_blocks;
        assert_eq!(full - no_taa, blocks * (7 * d * d + 6 * d));
        assert!(no_cal < full);
        let wider = ModelConfig { d_hidden: 2 * d, ..c.clone() };
        assert!(count_parameters(&init_model(&wider).unwrap()) > full);
    }
}

#[test]
fn oversized_configs_are_rejected_before_allocation() {
    let huge = ModelConfig {
        d_hidden: 1 << 20,
        ..ModelConfig::micro()
    };
    assert!(matches!(huge.validate(), Err(ModelError::Config(ref m)) if m.contains("parameters")));
    assert!(init_model(&huge).is_err());
    let overflow = ModelConfig {
        lookback: usize::MAX / 2,
        ..ModelConfig::micro()
    };
    assert!(overflow.validate().is_err());
}

#[test]
fn forward_shapes_and_calibration_identity() {
    let c = ModelConfig::micro();
    let data = random_dataset(&c, 3, 1);
    let batch = full_batch(&data);
    let params = init_model(&c).unwrap();
    let mut rng = stream_rng(0, 0);
    let out = params.forward_traced(&batch, false, &mut rng).unwrap();
    assert_eq!(out.p50.shape(), &[3, c.horizon]);
    assert_eq!(out.p90.shape(), &[3, c.horizon]);
    let tr = out.traces.unwrap();
    // zero-initialized calibration: predictions are exactly the head outputs
    assert!(tr.calibration.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
    let head = tr.head.data();
    for i in 0..3 * c.horizon {
        assert_eq!(out.p50.data()[i].to_bits(), head[2 * i].to_bits());
        assert_eq!(out.p90.data()[i].to_bits(), head[2 * i + 1].to_bits());
    }
    let off = init_model(&c.with_variant(Variant::NoCalibration)).unwrap();
    let out_off = off.forward_traced(&batch, false, &mut rng).unwrap();
    assert_eq!(out_off.p50, out.p50);
    assert_eq!(out_off.p90, out.p90);
    let tr_off = out_off.traces.unwrap();
    assert_eq!(tr_off.encoded, tr.encoded);
    assert_eq!(tr_off.decoded, tr.decoded);
    assert!(tr_off.calibration.is_none());
    assert!(count_parameters(&off) < count_parameters(&params));
}

#[test]
fn trained_calibration_changes_predictions_multiplicatively() {
    let c = ModelConfig::micro();
    let data = random_dataset(&c, 2, 2);
    let batch = full_batch(&data);
    let mut params = init_model(&c).unwrap();
    let id = params.store().find("calibration.output.bias").unwrap();
    *params.store_mut().get_mut(id) = Array::from_vec(vec![0.5]);
    let mut rng = stream_rng(0, 0);
    let out = params.forward_traced(&batch, false, &mut rng).unwrap();
    let tr = out.traces.unwrap();
    let cal = tr.calibration.unwrap();
    for i in 0..cal.len() {
        assert!(cal.data()[i] > -1.0 && cal.data()[i] < 1.0 && cal.data()[i] != 0.0);
        assert_eq!(out.p50.data()[i], tr.head.data()[2 * i] * (1.0 + cal.data()[i]));
    }
}

#[test]
fn traces_have_the_declared_shapes() {
    let mut rng = stream_rng(6, 6);
    for _ in 0..5 {
        let heads = rng.random_range(1..3);
        let c = ModelConfig {
            lookback: rng.random_range(3..10),
            horizon: rng.random_range(1..5),
            d_hidden: heads * rng.random_range(2..5),
            n_heads: heads,
            ..ModelConfig::micro()
        };
        let data = random_dataset(&c, 2, 3);
        let params = init_model(&c).unwrap();
        let out = params.forward_traced(&full_batch(&data), false, &mut rng).unwrap();
        let tr = out.traces.unwrap();
        let enc = tr.find("encoder0.alignment").unwrap();
        let dec = tr.find("decoder0.alignment").unwrap();
        let tl = tr.find("translation").unwrap();
        assert_eq!((enc.query_len, enc.key_len, enc.heads), (c.lookback, c.lookback, heads));
        assert_eq!((dec.query_len, dec.key_len), (c.horizon, c.horizon));
        assert_eq!((tl.query_len, tl.key_len), (c.d_hidden, c.d_hidden));
        for t in &tr.attention {
            assert!(t.trace.max_row_sum_error() < 1e-12, "{}", t.stage);
        }
    }
}

#[test]
fn ablation_flags_remove_sublayers() {
    let c = ModelConfig::micro();
    let data = random_dataset(&c, 2, 4);
    let batch = full_batch(&data);
    let mut rng = stream_rng(0, 0);
    let stages = |v: Variant| -> Vec<String> {
        let p = init_model(&c.with_variant(v)).unwrap();
        let out = p.forward_traced(&batch, false, &mut stream_rng(0, 0)).unwrap();
        out.traces.unwrap().attention.into_iter().map(|t| t.stage).collect()
    };
    assert_eq!(
        stages(Variant::Full),
        ["encoder0.alignment", "encoder0.self_attention", "translation", "decoder0.alignment", "decoder0.self_attention"]
    );
    assert_eq!(stages(Variant::NoTaa), ["encoder0.self_attention", "translation", "decoder0.self_attention"]);
    assert_eq!(stages(Variant::NoSelfAttention), ["encoder0.alignment", "translation", "decoder0.alignment"]);
    let p = init_model(&c.with_variant(Variant::NoTaa)).unwrap();
    assert!(p.store().names().iter().all(|n| !n.contains("alignment")));
    assert!(p.forward(&batch, true, &mut rng).is_ok());
}

#[test]
fn static_index_changes_alignment_keys() {
    let c = ModelConfig::micro();
    let data = random_dataset(&c, 1, 5);
    let mut other = data.samples[0].clone();
    other.static_features[0] = (other.static_features[0] + 1) % c.static_cardinalities[0];
    let pair = data.with_samples(vec![data.samples[0].clone(), other]);
    let params = init_model(&c).unwrap();
    let out = params.forward_traced(&full_batch(&pair), false, &mut stream_rng(0, 0)).unwrap();
    let tr = out.traces.unwrap();
    let e = &tr.static_embedding;
    let d = c.d_hidden;
    assert_ne!(e.data()[..d], e.data()[d..]);
    // keys are the static half of concat(context, static) projected; logits differ
    let enc = tr.find("encoder0.alignment").unwrap();
    let per = enc.logits.len() / 2;
    assert_ne!(enc.logits.data()[..per], enc.logits.data()[per..]);
}

#[test]
fn micro_model_gradients_match_finite_differences() {
    let c = ModelConfig::micro();
    let data = random_dataset(&c, 2, 6);
    let mut params = init_model(&c).unwrap();
    // give the calibration path a nonzero gradient everywhere
    let id = params.store().find("calibration.output.weight").unwrap();
    let w = params.store().get(id).clone();
    *params.store_mut().get_mut(id) = Array::new(w.shape().to_vec(), vec![0.3; w.len()]).unwrap();
    let (report, name) = check_gradients(&params, &full_batch(&data), 1e-6).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?} at {name:?}");
    assert_eq!(report.coordinates, count_parameters(&params));
}

#[test]
fn predict_contract() {
    let c = ModelConfig::micro();
    let data = random_dataset(&c, 10, 7);
    let params = init_model(&c).unwrap();
    let one = predict(&params, &data, 1).unwrap();
    let many = predict(&params, &data, 64).unwrap();
    let three = predict(&params, &data, 3).unwrap();
    assert_eq!(one.len(), 10);
    for ((a, b), s) in one.iter().zip(&many).zip(&data.samples) {
        assert_eq!(a.series_id, s.series_id);
        for (x, y) in a.p50.iter().chain(&a.p90).zip(b.p50.iter().chain(&b.p90)) {
            assert!((x - y).abs() <= 1e-10);
        }
    }
    assert_eq!(one, three);
    assert!(predict(&params, &data.with_samples(vec![]), 4).unwrap().is_empty());

    let wide = ModelConfig { d_context: 5, ..c.clone() };
    let err = predict(&init_model(&wide).unwrap(), &data, 4).unwrap_err();
    assert!(matches!(err, ModelError::Schema(ref m) if m.contains("context width")), "{err}");
}

#[test]
fn forward_rejects_misshaped_batches() {
    let c = ModelConfig::micro();
    let data = random_dataset(&c, 2, 8);
    let mut batch = full_batch(&data);
    batch.context = batch.context.slice_time(0, c.lookback).unwrap();
    let params = init_model(&c).unwrap();
    let err = params.forward(&batch, false, &mut stream_rng(0, 0)).unwrap_err();
    assert!(matches!(err, ModelError::Stage { stage: "input", .. }), "{err}");
}

#[test]
fn outputs_finite_on_random_micro_batches() {
    let c = ModelConfig::micro();
    let params = init_model(&c).unwrap();
    let mut rng = stream_rng(8, 8);
    for i in 0..1000 {
        let data = random_dataset(&c, 2, 1000 + i);
        let training = i % 2 == 0;
        let out = params.forward(&full_batch(&data), training, &mut rng).unwrap();
        assert!(out.p50.is_finite() && out.p90.is_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..10_000, heads in 1usize..3, t in 1usize..6) {
        let d = 2 * heads;
        let mut pb = ParamBuilder::new(seed);
        let mha = MultiHeadAttention::build(&mut pb, "m", [d, d, d], d, heads);
        let store = pb.finish();
        let mut rng = stream_rng(seed, 3);
        let x = randn(&mut rng, &[2, t, d]);
        let ((_, tr), _) = run(&store, |p| {
            let c = p.graph.constant(x.clone());
            mha.forward(p, c, c, c, true).unwrap()
        });
        let tr = tr.unwrap();
        prop_assert!(tr.max_row_sum_error() < 1e-12);
        prop_assert!(tr.scores.data().iter().all(|&s| (0.0..=1.0).contains(&s)));
    }

    #[test]
    fn eval_forward_is_deterministic(seed in 0u64..1000) {
        let c = ModelConfig { seed, ..ModelConfig::micro() };
        let data = random_dataset(&c, 2, seed);
        let params = init_model(&c).unwrap();
        let a = params.forward(&full_batch(&data), false, &mut stream_rng(1, 1)).unwrap();
        let b = params.forward(&full_batch(&data), false, &mut stream_rng(2, 2)).unwrap();
        prop_assert_eq!(a, b);
    }
}
